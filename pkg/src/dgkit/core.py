"""Deterministic random streams and the small sampling toolbox the rest of the
package draws from.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; nothing here
wraps them.  Every stochastic routine takes an explicit :class:`Rng`.
"""
import numpy as np

from .exceptions import ParameterError

DTYPE = np.float64


class Rng:
    """Seeded counter-based generator (Philox) with deterministic children.

    Two instances built from the same seed produce bit-identical streams for
    the same sequence of calls.  ``spawn`` derives independent child streams
    from the parent seed so that per-sample work can be split without
    consuming the parent's state.
    """

    def __init__(self, seed=0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            seed = int(seed)
            if seed < 0 or seed >= 2**64:
                raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
            self._seq = np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    @property
    def seed(self):
        return self._seq.entropy

    def spawn(self, n):
        return [Rng(s) for s in self._seq.spawn(n)]

    def uniform(self, size=None):
        return self.generator.random(size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)


def as_rng(rng):
    if isinstance(rng, Rng):
        return rng
    if rng is None:
        return Rng(0)
    return Rng(rng)


def _log_gamma_variate(rng, shape):
    # log of a Gamma(shape, 1) draw.  For shape < 1 use the boost
    # G(a) = G(a + 1) * U**(1/a), carried out in log space so tiny shapes
    # never underflow to an exact zero.
    if shape >= 1.0:
        return np.log(rng.generator.standard_gamma(shape))
    g = rng.generator.standard_gamma(shape + 1.0)
    u = rng.generator.random()
    while u == 0.0:
        u = rng.generator.random()
    return np.log(g) + np.log(u) / shape


def sample_beta(rng, a, b):
    """Draw one value from Beta(a, b) as G_a / (G_a + G_b)."""
    if not (a > 0 and b > 0) or not np.isfinite(a) or not np.isfinite(b):
        raise ParameterError(f"beta shape parameters must be positive, got a={a}, b={b}")
    la = _log_gamma_variate(rng, float(a))
    lb = _log_gamma_variate(rng, float(b))
    # G_a / (G_a + G_b) == 1 / (1 + exp(lb - la)), stable at both tails
    d = lb - la
    if d > 0:
        e = np.exp(-d)
        return float(e / (1.0 + e))
    return float(1.0 / (1.0 + np.exp(d)))


def sample_gaussian(rng, sigma, n):
    if not sigma >= 0 or not np.isfinite(sigma):
        raise ParameterError(f"sigma must be a finite nonnegative number, got {sigma}")
    n = int(n)
    if n < 0:
        raise ParameterError(f"n must be nonnegative, got {n}")
    draws = rng.normal(n)
    if sigma == 0:
        return np.zeros(n, dtype=DTYPE)
    return sigma * draws


def as_tensor(x, ndim=None, name="x"):
    """Convert ``x`` to a finite float64 array, optionally checking its rank."""
    from .exceptions import ShapeError

    arr = np.asarray(x, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr
