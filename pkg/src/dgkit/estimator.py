"""scikit-learn compatible classifier trained with the three ablation modes.

``mode`` selects the training signal:

* ``"baseline"``: single-branch cross-entropy SGD;
* ``"ddc"``: siamese twin loss on (x, amplitude-mixed x'), every layer weight 1;
* ``"ddc+digb"``: as ``"ddc"`` with per-layer gradient re-weighting.
"""
import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import DTYPE, Rng
from .digb import EnhancementState, OptimizerConfig, baseline_step, digb_step
from .exceptions import ParameterError
from .network import Network, default_architecture
from .spectral import AugmentConfig, augment_batch

MODES = ("baseline", "ddc", "ddc+digb")


def _as_images(X):
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 4:
        raise ParameterError(f"expected images shaped (N, C, H, W), got {X.shape}")
    return X


def accuracy_from_logits(logits, labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ParameterError("cannot score an empty split")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(net, X, labels, batch_size=256):
    """Fraction of argmax-correct predictions; ``labels`` are 0-based."""
    if len(X) == 0:
        raise ParameterError("cannot evaluate on an empty split")
    return accuracy_from_logits(net.predict_logits(X, batch_size), labels)


class DomainInvariantClassifier(ClassifierMixin, BaseEstimator):
    """Small CNN trained with amplitude-mixed contrastive pairs and
    gradient-agreement layer re-weighting.

    Parameters
    ----------
    mode : {"baseline", "ddc", "ddc+digb"}
    architecture : str or None
        Layer string understood by :meth:`Network.from_architecture`; ``None``
        builds the default four-layer network for the input shape.
    epochs, batch_size : int
    learning_rate : float
        Initial rate of the cosine schedule, which decays to 0 at the last step.
    beta : float
        EMA momentum of the enhancement vector.
    alpha_beta, lambda_beta : tuple of float
        Beta shapes for the mask size and the mixing weight.  A zero first
        shape in ``lambda_beta`` pins the mixing weight to 0 (identity pairs).
    similarity_on_weights_only : bool
        Exclude bias gradients from the layer similarity.
    input_offset : float
        Constant subtracted from pixels before they enter the network.
        Augmentation happens on the raw pixels.
    random_state : int
        Seeds initialisation, batch order and augmentation as separate streams,
        so different modes with one seed start from identical parameters and
        visit batches in the same order.
    """

    def __init__(self, mode="ddc+digb", architecture=None, epochs=30, batch_size=16,
                 learning_rate=0.2, beta=0.9, alpha_beta=(1.0, 1.0), lambda_beta=(0.1, 0.1),
                 similarity_on_weights_only=False, input_offset=0.5, random_state=0):
        self.mode = mode
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta = beta
        self.alpha_beta = alpha_beta
        self.lambda_beta = lambda_beta
        self.similarity_on_weights_only = similarity_on_weights_only
        self.input_offset = input_offset
        self.random_state = random_state

    def _validate_params(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be at least 2 so every sample can get a donor")
        if self.epochs < 1:
            raise ParameterError("epochs must be positive")

    def fit(self, X, y, domains=None, monitor=None, step_monitor=None):
        """Train on ``X`` of shape (N, C, H, W).

        ``domains`` steers donor choice toward other domains.  ``monitor`` is
        called as ``monitor(epoch, estimator, record)`` after each epoch and
        ``step_monitor(step, net)`` after every update.
        """
        self._validate_params()
        X, y = check_X_y(X, y, allow_nd=True, dtype=DTYPE)
        X = _as_images(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        domains = np.zeros(len(y), int) if domains is None else np.asarray(domains)
        n = len(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]

        init_rng, order_rng, aug_rng = Rng(self.random_state).spawn(3)
        arch = self.architecture or default_architecture(X.shape[1], len(self.classes_))
        net = Network.from_architecture(arch, seed=self.random_state, init=False)
        if net.n_classes != len(self.classes_):
            raise ParameterError(f"architecture has {net.n_classes} outputs for {len(self.classes_)} classes")
        net.init_parameters(init_rng)

        steps_per_epoch = math.ceil(n / self.batch_size)
        cfg = OptimizerConfig(lr=self.learning_rate, total_steps=self.epochs * steps_per_epoch,
                              beta=self.beta, digb=self.mode == "ddc+digb",
                              similarity_on_weights_only=self.similarity_on_weights_only)
        state = EnhancementState.create(net.n_param_layers, beta=self.beta)
        aug = AugmentConfig(tuple(self.alpha_beta), tuple(self.lambda_beta))
        self.history_ = []

        for epoch in range(self.epochs):
            order = order_rng.permutation(n)
            losses, losses_p = [], []
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                xb, yb = X[idx], y_idx[idx]
                if self.mode == "baseline":
                    losses.append(baseline_step(net, self.prepare(xb), yb, cfg))
                else:
                    xb_p = augment_batch(xb, domains[idx], aug_rng, aug)[0]
                    loss, loss_p, net, state = digb_step(net, self.prepare(xb), self.prepare(xb_p),
                                                         yb, state, cfg)
                    losses.append(loss)
                    losses_p.append(loss_p)
                if step_monitor is not None:
                    step_monitor(cfg.step, net)
            record = {
                "epoch": epoch + 1,
                "step": cfg.step,
                "loss": float(np.mean(losses)),
                "loss_prime": float(np.mean(losses_p)) if losses_p else None,
                "lr": float(cfg.lr_at(max(cfg.step - 1, 0))),
                "w": state.w.tolist() if cfg.digb else [1.0] * net.n_param_layers,
                "w_hat": state.last_w_hat.tolist() if state.last_w_hat is not None else None,
                "degenerate": bool(state.last_degenerate),
            }
            self.history_.append(record)
            self.net_ = net
            if monitor is not None:
                monitor(epoch + 1, self, record)

        self.net_ = net
        self.enhancement_ = state
        self.optimizer_ = cfg
        return self

    def prepare(self, X):
        return np.asarray(X, dtype=DTYPE) - self.input_offset

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = _as_images(check_array(X, allow_nd=True, dtype=DTYPE))
        return self.net_.predict_logits(self.prepare(X))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
