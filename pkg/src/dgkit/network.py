"""A small layered classifier with hand-written forward and backward passes.

Only the parameter-bearing layers (conv3x3, dense) count towards the layer
index ``l`` used for per-layer gradient statistics; activations, pooling and
flatten carry no parameters.
"""
import copy
from dataclasses import dataclass

import numpy as np

from .core import DTYPE, Rng, as_rng
from .exceptions import LabelError, ParameterError, ShapeError, StateError


class Layer:
    kind = None
    has_params = False

    def params(self):
        return []

    def spec(self):
        return self.kind


class Conv3x3(Layer):
    """3x3 convolution, zero padding 1, configurable stride."""

    kind = "conv3x3"
    has_params = True

    def __init__(self, in_channels, out_channels, stride=1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = np.zeros((out_channels, in_channels, 3, 3), dtype=DTYPE)
        self.bias = np.zeros(out_channels, dtype=DTYPE)

    @property
    def fan_in(self):
        return self.in_channels * 9

    def params(self):
        return [self.weight, self.bias]

    def spec(self):
        return f"conv3x3:{self.in_channels}:{self.out_channels}:{self.stride}"

    def out_shape(self, h, w):
        return (h - 1) // self.stride + 1, (w - 1) // self.stride + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.spec()} expects (B, {self.in_channels}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        ho, wo = self.out_shape(h, w)
        s = self.stride
        # channels-last im2col: each tap copies contiguous runs of c values
        xp = np.zeros((b, h + 2, w + 2, c), dtype=DTYPE)
        xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
        cols = np.empty((b, ho, wo, 9, c), dtype=DTYPE)
        for k in range(9):
            ki, kj = divmod(k, 3)
            cols[:, :, :, k, :] = xp[:, ki:ki + s * ho:s, kj:kj + s * wo:s, :]
        cols = cols.reshape(b * ho * wo, 9 * c)
        out = cols @ self._w2().T + self.bias
        out = out.reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)

    def _w2(self):
        # (out, c, 3, 3) -> (out, 9c) matching the tap-major column order
        return self.weight.transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def backward(self, dout, cache, need_input_grad=True):
        cols, (b, c, h, w) = cache
        ho, wo = dout.shape[2:]
        s = self.stride
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dw = (d2.T @ cols).reshape(self.out_channels, 3, 3, c).transpose(0, 3, 1, 2)
        db = d2.sum(axis=0)
        grads = [np.ascontiguousarray(dw), db]
        if not need_input_grad:
            return None, grads
        dcols = (d2 @ self._w2()).reshape(b, ho, wo, 9, c)
        dxp = np.zeros((b, h + 2, w + 2, c), dtype=DTYPE)
        for k in range(9):
            ki, kj = divmod(k, 3)
            dxp[:, ki:ki + s * ho:s, kj:kj + s * wo:s, :] += dcols[:, :, :, k, :]
        return np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)), grads


class Dense(Layer):
    kind = "dense"
    has_params = True

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features), dtype=DTYPE)
        self.bias = np.zeros(out_features, dtype=DTYPE)

    @property
    def fan_in(self):
        return self.in_features

    def params(self):
        return [self.weight, self.bias]

    def spec(self):
        return f"dense:{self.in_features}:{self.out_features}"

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.spec()} expects (B, {self.in_features}), got {x.shape}")
        return x @ self.weight.T + self.bias, x

    def backward(self, dout, x):
        return dout @ self.weight, [dout.T @ x, dout.sum(axis=0)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask):
        return dout * mask, []


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dout, shape):
        b, c, h, w = shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy(), []


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), []


def parse_layer(token):
    parts = token.split(":")
    name, args = parts[0], [int(a) for a in parts[1:]]
    if name == "conv3x3":
        return Conv3x3(*args)
    if name == "dense":
        return Dense(*args)
    if name == "relu":
        return ReLU()
    if name == "gap":
        return GlobalAvgPool()
    if name == "flatten":
        return Flatten()
    raise ParameterError(f"unknown layer token {token!r}")


def default_architecture(in_channels=3, n_classes=7, widths=(16, 32, 32), stride=2):
    """Three strided 3x3 convolutions, global average pooling and a dense
    classifier: four parameter-bearing layers."""
    tokens = []
    c_in = in_channels
    for c_out in widths:
        tokens += [f"conv3x3:{c_in}:{c_out}:{stride}", "relu"]
        c_in = c_out
    tokens += ["gap", f"dense:{c_in}:{n_classes}"]
    return ",".join(tokens)


@dataclass
class LayerGradients:
    """One flat gradient vector per parameter-bearing layer.

    ``weight_sizes[l]`` is how many leading entries of ``vectors[l]`` belong to
    the weight tensor; the rest is the bias.
    """

    vectors: list
    weight_sizes: list

    def __len__(self):
        return len(self.vectors)

    def __getitem__(self, l):
        return self.vectors[l]

    def weights_only(self):
        return LayerGradients([v[:n] for v, n in zip(self.vectors, self.weight_sizes)],
                              list(self.weight_sizes))

    def check_compatible(self, other):
        if len(self) != len(other) or any(a.shape != b.shape for a, b in zip(self.vectors, other.vectors)):
            raise ShapeError("layer gradient structures differ")


class ForwardCache:
    __slots__ = ("entries", "version", "batch_size", "used")

    def __init__(self, entries, version, batch_size):
        self.entries = entries
        self.version = version
        self.batch_size = batch_size
        self.used = False


class Network:
    """Ordered stack of layers with explicit forward/backward.

    Parameters are updated in place by optimizers; every update should go
    through :meth:`mark_updated` so outstanding forward caches become stale.
    """

    def __init__(self, layers, n_classes, seed=None, architecture=None):
        self.layers = list(layers)
        self.n_classes = n_classes
        self.seed = seed
        self.architecture = architecture or ",".join(l.spec() for l in self.layers)
        self.version = 0
        last = self.param_layers[-1] if self.param_layers else None
        if last is None or last.out_features != n_classes:
            raise ShapeError("last parameter-bearing layer must be dense with n_classes outputs")

    @classmethod
    def from_architecture(cls, architecture, seed=None, init=True):
        layers = [parse_layer(t) for t in architecture.split(",") if t]
        last = [l for l in layers if l.has_params][-1]
        net = cls(layers, last.out_features, seed=seed, architecture=architecture)
        if init:
            net.init_parameters(as_rng(seed))
        return net

    @property
    def param_layers(self):
        return [l for l in self.layers if l.has_params]

    @property
    def n_param_layers(self):
        return len(self.param_layers)

    def n_parameters(self):
        return sum(p.size for l in self.param_layers for p in l.params())

    def init_parameters(self, rng):
        # He-uniform weights, zero biases
        for layer in self.param_layers:
            limit = np.sqrt(6.0 / layer.fan_in)
            layer.weight[...] = (2.0 * rng.uniform(layer.weight.shape) - 1.0) * limit
            layer.bias[...] = 0.0
        self.mark_updated()

    def mark_updated(self):
        self.version += 1

    def copy(self):
        return copy.deepcopy(self)

    def get_flat(self):
        return np.concatenate([p.ravel() for l in self.param_layers for p in l.params()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.n_parameters():
            raise ShapeError(f"expected {self.n_parameters()} parameters, got {flat.size}")
        i = 0
        for layer in self.param_layers:
            for p in layer.params():
                p[...] = flat[i:i + p.size].reshape(p.shape)
                i += p.size
        self.mark_updated()

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        entries = []
        for layer in self.layers:
            x, c = layer.forward(x)
            entries.append(c)
        return x, ForwardCache(entries, self.version, len(x))

    def predict_logits(self, x, batch_size=256):
        x = np.asarray(x, dtype=DTYPE)
        out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def backward(self, cache, logits, labels):
        """Mean cross-entropy gradients for every parameter-bearing layer."""
        if cache is None or not isinstance(cache, ForwardCache):
            raise StateError("backward needs the cache returned by forward")
        if cache.version != self.version:
            raise StateError("forward cache is stale: parameters changed since forward")
        if cache.used:
            raise StateError("forward cache already consumed by a backward pass")
        cache.used = True
        dout = cross_entropy_grad(logits, labels)
        grads = []
        first = self.layers[0]
        for layer, entry in zip(reversed(self.layers), reversed(cache.entries)):
            if layer is first and isinstance(layer, Conv3x3):
                # nothing upstream needs the input gradient
                dout, g = layer.backward(dout, entry, need_input_grad=False)
            else:
                dout, g = layer.backward(dout, entry)
            if layer.has_params:
                grads.append(g)
        grads.reverse()
        return LayerGradients(
            [np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads],
            [gw.size for gw, _ in grads],
        )

    def loss_and_grads(self, x, labels):
        logits, cache = self.forward(x)
        return cross_entropy(logits, labels), self.backward(cache, logits, labels)


def _check_labels(labels, n, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``; labels are 0-based."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = _check_labels(labels, len(logits), logits.shape[1])
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels):
    labels = _check_labels(labels, len(logits), logits.shape[1])
    p = np.exp(log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def perturb_parameters(net, sigma, rng):
    """Copy of ``net`` with i.i.d. N(0, sigma^2) noise added to every parameter."""
    from .core import sample_gaussian

    out = net.copy()
    out.set_flat(net.get_flat() + sample_gaussian(rng, sigma, net.n_parameters()))
    return out
