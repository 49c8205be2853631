"""Fourier amplitude/phase decomposition and amplitude mixing.

Every transform acts on the last two axes, so a single sample ``(C, H, W)``
and a batch ``(B, C, H, W)`` go through the same code.  Spectra are stored
centred: the zero frequency sits at ``(H // 2, W // 2)``.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import DTYPE, as_rng, sample_beta
from .exceptions import NumericError, ParameterError, ShapeError

IMAG_TOL = 1e-6


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m):
    return np.exp(-2j * np.pi * np.arange(m // 2) / m)


def _fft_radix2(x):
    # iterative decimation-in-time along the last axis; the transform axis is
    # moved to the front so butterflies run over long contiguous rows
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = np.moveaxis(x, -1, 0).reshape(n, -1)[_bit_reverse(n)].astype(np.complex128)
    rest = y.shape[1]
    tmp = np.empty((n // 2, rest), dtype=np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        blocks = y.reshape(n // m, 2, half, rest)
        even = blocks[:, 0]
        odd = blocks[:, 1]
        t = tmp.reshape(n // m, half, rest)
        np.multiply(odd, _twiddles(m)[:, None], out=t)
        np.subtract(even, t, out=odd)
        even += t
        m *= 2
    return np.moveaxis(y.reshape((n,) + lead), 0, -1)


def _dft_direct(x):
    n = x.shape[-1]
    k = np.arange(n)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x.astype(np.complex128) @ mat.T


def fft_last_axis(x):
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128)
    if _is_pow2(n):
        return _fft_radix2(x)
    return _dft_direct(x)


def ifft_last_axis(x):
    n = x.shape[-1]
    return np.conj(fft_last_axis(np.conj(x))) / n


def fft2_complex(x):
    """Uncentred 2-D DFT over the last two axes."""
    y = fft_last_axis(np.asarray(x))
    y = np.swapaxes(fft_last_axis(np.swapaxes(y, -1, -2)), -1, -2)
    return np.ascontiguousarray(y)


def ifft2_complex(f):
    y = ifft_last_axis(np.asarray(f))
    y = np.swapaxes(ifft_last_axis(np.swapaxes(y, -1, -2)), -1, -2)
    return y


def center(f):
    return np.fft.fftshift(f, axes=(-2, -1))


def uncenter(f):
    return np.fft.ifftshift(f, axes=(-2, -1))


@dataclass
class Spectrum:
    """Amplitude and phase planes of one sample or a batch.

    ``hermitian`` records whether the spectrum is claimed to come from a real
    signal; :func:`ifft2` enforces a vanishing imaginary part only then.
    """

    amplitude: np.ndarray
    phase: np.ndarray
    centered: bool = True
    hermitian: bool = True

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape:
            raise ShapeError(
                f"amplitude {self.amplitude.shape} and phase {self.phase.shape} differ"
            )

    def to_complex(self):
        f = self.amplitude * np.exp(1j * self.phase)
        return uncenter(f) if self.centered else f


def fft2(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 2:
        raise ShapeError(f"fft2 needs at least 2 dimensions, got shape {x.shape}")
    f = center(fft2_complex(x))
    phase = np.angle(f)
    phase[phase <= -np.pi] = np.pi
    return Spectrum(np.abs(f), phase, centered=True, hermitian=True)


def ifft2(s):
    z = ifft2_complex(s.to_complex())
    if s.hermitian:
        resid = float(np.max(np.abs(z.imag))) if z.size else 0.0
        if resid >= IMAG_TOL:
            raise NumericError(f"imaginary residue {resid:.3g} exceeds {IMAG_TOL}")
    return np.ascontiguousarray(z.real)


@dataclass(frozen=True)
class MaskParams:
    alpha: float
    height: int
    width: int

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.height < 1 or self.width < 1:
            raise ParameterError(f"mask dimensions must be positive, got {self.height}x{self.width}")


@dataclass(frozen=True)
class MixParams:
    lam: float
    alpha: float

    def __post_init__(self):
        for name in ("lam", "alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")


def _block(alpha, n):
    c = n // 2
    lo = c - int(np.floor(alpha * n))
    hi = c + int(np.ceil(alpha * n))
    return max(lo, 0), min(hi, n)


@lru_cache(maxsize=4096)
def _cached_mask(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), dtype=DTYPE)
    m[r0:r1, c0:c1] = 1.0
    m.setflags(write=False)
    # the uncentred copy lets batch mixing skip the fftshift round trip
    mu = uncenter(m)
    mu.setflags(write=False)
    return m, is_point_symmetric(m), mu


def _mask_and_symmetry(alpha, h, w):
    if alpha == 0:
        return _cached_mask(h, w, 0, 0, 0, 0)
    return _cached_mask(h, w, *_block(alpha, h), *_block(alpha, w))[:2]


def _uncentered_mask(alpha, h, w):
    if alpha == 0:
        return _cached_mask(h, w, 0, 0, 0, 0)[1:]
    return _cached_mask(h, w, *_block(alpha, h), *_block(alpha, w))[1:]


def make_mask(p):
    """Centred binary block mask in spectrum layout (H, W)."""
    return _mask_and_symmetry(p.alpha, p.height, p.width)[0].copy()


def is_point_symmetric(m):
    """True when a centred plane satisfies m(u, v) == m(-u, -v)."""
    flipped = uncenter(m)
    flipped = np.roll(flipped[..., ::-1, ::-1], (1, 1), axis=(-2, -1))
    return bool(np.array_equal(center(flipped), m))


def mix_amplitude(a_c, a_s, m, lam):
    a_c = np.asarray(a_c, dtype=DTYPE)
    a_s = np.asarray(a_s, dtype=DTYPE)
    m = np.asarray(m, dtype=DTYPE)
    if a_c.shape != a_s.shape:
        raise ShapeError(f"content amplitude {a_c.shape} vs style amplitude {a_s.shape}")
    if m.shape[-2:] != a_c.shape[-2:]:
        raise ShapeError(f"mask {m.shape} does not match spatial shape {a_c.shape[-2:]}")
    lam = np.asarray(lam, dtype=DTYPE)
    return ((1 - lam) * a_c + lam * a_s) * m + a_c * (1 - m)


def generate_contrastive(x_c, x_s, params):
    """Replace the centred low-frequency amplitude of ``x_c`` by an
    interpolation with that of ``x_s``, keeping the phase of ``x_c``."""
    x_c = np.asarray(x_c, dtype=DTYPE)
    x_s = np.asarray(x_s, dtype=DTYPE)
    if x_c.shape != x_s.shape:
        raise ShapeError(f"content {x_c.shape} and style {x_s.shape} samples differ in shape")
    s_c = fft2(x_c)
    s_s = fft2(x_s)
    h, w = x_c.shape[-2:]
    mask = make_mask(MaskParams(params.alpha, h, w))
    amp = mix_amplitude(s_c.amplitude, s_s.amplitude, mask, params.lam)
    mixed = Spectrum(amp, s_c.phase, hermitian=is_point_symmetric(mask))
    return ifft2(mixed)


def contrastive_batch(X, donors, alphas, lambdas):
    """Vectorised :func:`generate_contrastive` over a batch ``(B, C, H, W)``.

    ``donors[i]`` indexes the style source for row ``i``; ``alphas`` and
    ``lambdas`` are per-sample.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 4:
        raise ShapeError(f"expected a (B, C, H, W) batch, got shape {X.shape}")
    b, _, h, w = X.shape
    donors = np.asarray(donors, dtype=np.intp)
    alphas = np.asarray(alphas, dtype=DTYPE).reshape(b)
    lambdas = np.asarray(lambdas, dtype=DTYPE).reshape(b)
    for a in alphas:
        MaskParams(float(a), h, w)
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    out = X.copy()
    # lambda == 0 leaves the amplitude untouched, so the row is its own output
    rows = np.flatnonzero(lambdas > 0)
    if rows.size == 0:
        return out
    # only the rows being mixed and their donors need a transform
    need = np.union1d(rows, donors[rows])
    f = np.zeros(X.shape, dtype=np.complex128)
    f[need] = fft2_complex(X[need])
    amp = np.abs(f)
    # unit phasor exp(i*phase) without the angle/exp round trip; zero bins get phase 0
    unit = np.divide(f[rows], amp[rows], out=np.ones_like(f[rows]), where=amp[rows] > 0)
    symmetric, masks = zip(*(_uncentered_mask(float(a), h, w) for a in alphas[rows]))
    masks = np.stack(masks)[:, None]
    mixed = mix_amplitude(amp[rows], amp[donors[rows]], masks, lambdas[rows, None, None, None])
    z = ifft2_complex(mixed * unit)
    for k, i in enumerate(rows):
        if symmetric[k]:
            resid = float(np.max(np.abs(z[k].imag)))
            if resid >= IMAG_TOL:
                raise NumericError(f"imaginary residue {resid:.3g} exceeds {IMAG_TOL} (row {i})")
    out[rows] = z.real
    return out


@dataclass(frozen=True)
class AugmentConfig:
    """Beta shapes for the mask controller and the mixing weight.

    A zero shape is read as the limiting point mass: ``(0, b)`` always gives 0
    and ``(a, 0)`` always gives 1.
    """

    alpha_beta: tuple = (1.0, 1.0)
    lambda_beta: tuple = (0.1, 0.1)

    def __post_init__(self):
        for name in ("alpha_beta", "lambda_beta"):
            shapes = getattr(self, name)
            if len(shapes) != 2:
                raise ParameterError(f"{name} needs two shapes, got {shapes}")
            a, b = shapes
            if not (a >= 0 and b >= 0) or (a == 0 and b == 0):
                raise ParameterError(f"{name} shapes must be positive, got {(a, b)}")


def _draw(rng, shapes):
    a, b = shapes
    if a == 0:
        return 0.0
    if b == 0:
        return 1.0
    return sample_beta(rng, a, b)


def sample_mix_params(rng, cfg=AugmentConfig()):
    alpha = _draw(rng, cfg.alpha_beta)
    lam = _draw(rng, cfg.lambda_beta)
    return MixParams(lam=lam, alpha=alpha)


def choose_donors(domains, rng):
    """For each row pick another row, preferring one from a different domain.

    Falls back to any other row, then to the row itself.
    """
    domains = np.asarray(domains)
    n = len(domains)
    out = np.empty(n, dtype=np.intp)
    idx = np.arange(n)
    for i in range(n):
        cand = idx[(domains != domains[i])]
        if cand.size == 0:
            cand = idx[idx != i]
        if cand.size == 0:
            out[i] = i
            continue
        out[i] = cand[rng.integers(0, cand.size)]
    return out


def augment_batch(X, domains, rng, cfg=AugmentConfig(), self_donor=False):
    """Generate one contrastive sample per row with per-sample (alpha, lambda).

    Returns ``(X_aug, donors, alphas, lambdas)``.
    """
    X = np.asarray(X, dtype=DTYPE)
    if self_donor:
        donors = np.arange(len(X))
    else:
        donors = choose_donors(domains, rng)
    params = [sample_mix_params(rng, cfg) for _ in range(len(X))]
    alphas = np.array([p.alpha for p in params])
    lambdas = np.array([p.lam for p in params])
    return contrastive_batch(X, donors, alphas, lambdas), donors, alphas, lambdas


class AmplitudeMixer(TransformerMixin, BaseEstimator):
    """Transformer producing amplitude-mixed, phase-preserving counterparts.

    ``fit`` memorises a donor pool; ``transform`` draws, for every input row,
    a donor from that pool (from a different domain when ``domains`` are
    given) and returns the contrastive sample.  ``fit_transform`` draws donors
    from the same batch, never pairing a row with itself when avoidable.

    Parameters
    ----------
    alpha_beta, lambda_beta : tuple of float
        Beta shapes for the mask size and the mixing weight.
    random_state : int or None
    """

    def __init__(self, alpha_beta=(1.0, 1.0), lambda_beta=(0.1, 0.1), random_state=None):
        self.alpha_beta = alpha_beta
        self.lambda_beta = lambda_beta
        self.random_state = random_state

    def _cfg(self):
        return AugmentConfig(tuple(self.alpha_beta), tuple(self.lambda_beta))

    def fit(self, X, y=None, domains=None):
        X = _check_images(X)
        self._cfg()
        self.donor_pool_ = X
        self.donor_domains_ = np.zeros(len(X), int) if domains is None else np.asarray(domains)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X, domains=None):
        check_is_fitted(self, "donor_pool_")
        X = _check_images(X)
        if X.shape[1:] != self.donor_pool_.shape[1:]:
            raise ShapeError(f"sample shape {X.shape[1:]} differs from fitted {self.donor_pool_.shape[1:]}")
        rng = as_rng(self.random_state)
        cfg = self._cfg()
        pool_idx = np.arange(len(self.donor_pool_))
        out = np.empty_like(X)
        for i, x in enumerate(X):
            cand = pool_idx
            if domains is not None:
                other = pool_idx[self.donor_domains_ != domains[i]]
                if other.size:
                    cand = other
            j = cand[rng.integers(0, cand.size)]
            out[i] = generate_contrastive(x, self.donor_pool_[j], sample_mix_params(rng, cfg))
        return out

    def fit_transform(self, X, y=None, domains=None):
        self.fit(X, y, domains)
        doms = self.donor_domains_ if domains is not None else np.arange(len(self.donor_pool_))
        rng = as_rng(self.random_state)
        out, *_ = augment_batch(self.donor_pool_, doms, rng, self._cfg())
        return out


def _check_images(X):
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected images shaped (N, C, H, W), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ParameterError("input contains non-finite values")
    return X
