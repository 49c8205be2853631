"""Per-layer gradient agreement between the two siamese branches, and the
re-weighted SGD update built on it."""
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DTYPE
from .exceptions import ParameterError, ScheduleExhaustedError, ShapeError
from .network import LayerGradients

NORM_EPS = 1e-12
RANGE_EPS = 1e-12


def layer_similarity(g, g_prime, return_degenerate=False):
    """Cosine similarity of matching layer gradients.

    A layer whose gradient norm (on either branch) is below ``1e-12`` gets
    similarity 0 and is flagged degenerate.
    """
    g.check_compatible(g_prime)
    s = np.zeros(len(g), dtype=DTYPE)
    degenerate = np.zeros(len(g), dtype=bool)
    for l, (a, b) in enumerate(zip(g.vectors, g_prime.vectors)):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < NORM_EPS or nb < NORM_EPS:
            degenerate[l] = True
            continue
        s[l] = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    if return_degenerate:
        return s, degenerate
    return s


def normalize(s):
    """Min-max map of similarities to [0, 1]; constant input gives all ones."""
    s = np.asarray(s, dtype=DTYPE)
    if s.ndim != 1 or s.size < 1:
        raise ShapeError(f"expected a non-empty vector, got shape {s.shape}")
    lo, hi = s.min(), s.max()
    if hi - lo < RANGE_EPS:
        return np.ones_like(s)
    return (s - lo) / (hi - lo)


@dataclass
class EnhancementState:
    """EMA-smoothed enhancement vector plus diagnostics from the last step."""

    w: np.ndarray
    beta: float = 0.999
    initialized: bool = False
    n_updates: int = 0
    last_similarity: np.ndarray = None
    last_w_hat: np.ndarray = None
    last_degenerate: bool = False

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=DTYPE)
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta must lie in [0, 1], got {self.beta}")
        if np.any(self.w < 0) or np.any(self.w > 1):
            raise ParameterError("enhancement weights must lie in [0, 1]")

    @classmethod
    def create(cls, n_layers, beta=0.999):
        return cls(np.ones(n_layers, dtype=DTYPE), beta=beta)


def ema_update(state, w_hat):
    w_hat = np.asarray(w_hat, dtype=DTYPE)
    if w_hat.shape != state.w.shape:
        raise ShapeError(f"w_hat has shape {w_hat.shape}, state holds {state.w.shape}")
    if not state.initialized:
        w = w_hat.copy()
    else:
        w = state.beta * state.w + (1.0 - state.beta) * w_hat
        # guard against rounding just outside the unit interval
        np.clip(w, 0.0, 1.0, out=w)
    return replace(state, w=w, initialized=True, n_updates=state.n_updates + 1)


def reweight(g, g_prime, w):
    g.check_compatible(g_prime)
    w = np.asarray(w, dtype=DTYPE)
    if w.shape != (len(g),):
        raise ShapeError(f"need one weight per layer ({len(g)}), got shape {w.shape}")
    return LayerGradients([(a + b) * wl for a, b, wl in zip(g.vectors, g_prime.vectors, w)],
                          list(g.weight_sizes))


@dataclass
class OptimizerConfig:
    """Plain SGD with cosine learning-rate decay from ``lr`` to 0 over
    ``total_steps``.  ``step`` is advanced by :func:`sgd_step`."""

    lr: float = 0.01
    total_steps: int = 1000
    step: int = 0
    beta: float = 0.9
    digb: bool = True
    similarity_on_weights_only: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.total_steps < 1 or not 0 <= self.step <= self.total_steps:
            raise ParameterError(f"need 0 <= step <= total_steps, got {self.step}/{self.total_steps}")
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta must lie in [0, 1], got {self.beta}")

    def lr_at(self, t=None):
        t = self.step if t is None else t
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * t / self.total_steps))


def sgd_step(net, g_hat, cfg):
    """In-place ``theta_l -= lr_t * g_hat_l``; returns ``net``."""
    if cfg.step >= cfg.total_steps:
        raise ScheduleExhaustedError(f"learning-rate schedule exhausted after {cfg.total_steps} steps")
    layers = net.param_layers
    if len(g_hat) != len(layers):
        raise ShapeError(f"{len(g_hat)} gradient vectors for {len(layers)} layers")
    eta = cfg.lr_at()
    for layer, vec in zip(layers, g_hat.vectors):
        i = 0
        for p in layer.params():
            p -= eta * vec[i:i + p.size].reshape(p.shape)
            i += p.size
    cfg.step += 1
    net.mark_updated()
    return net


def digb_step(net, x, x_prime, labels, state, cfg):
    """One siamese step: both branches share ``net``; gradients are combined
    per layer and scaled by the freshly updated enhancement vector.

    With ``cfg.digb`` off the scale is 1 for every layer and ``state`` is
    returned untouched.  Returns ``(loss, loss_prime, net, state)``.
    """
    loss, g = net.loss_and_grads(x, labels)
    loss_p, g_p = net.loss_and_grads(x_prime, labels)
    if cfg.digb:
        a, b = (g.weights_only(), g_p.weights_only()) if cfg.similarity_on_weights_only else (g, g_p)
        s = layer_similarity(a, b)
        w_hat = normalize(s)
        state = ema_update(state, w_hat)
        state.last_similarity = s
        state.last_w_hat = w_hat
        state.last_degenerate = bool(s.max() - s.min() < RANGE_EPS)
        w = state.w
    else:
        w = np.ones(len(g), dtype=DTYPE)
    sgd_step(net, reweight(g, g_p, w), cfg)
    return loss, loss_p, net, state


def baseline_step(net, x, labels, cfg):
    """Single-branch cross-entropy SGD step; returns the loss."""
    loss, g = net.loss_and_grads(x, labels)
    sgd_step(net, g, cfg)
    return loss
