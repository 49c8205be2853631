"""Synthetic multi-domain image data and the on-disk tensor container.

Container layout (little-endian)::

    b"DGT1" | u32 version=1 | u32 ndim | ndim x u32 dims | float32 payload

Classes are drawn as binary glyphs (an oriented pattern at a class-specific
position); domains restyle the glyph with a radial spectral tilt, per-channel
gain and offset, and additive noise.  Filtering by a real, symmetric envelope
leaves the Fourier phase untouched, so class evidence lives mostly in phase
and domain evidence mostly in amplitude.
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import DTYPE, Rng, as_rng
from .exceptions import FormatError, ParameterError

MAGIC = b"DGT1"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_MAX_NDIM = 16


def encode_tensor(x):
    x = np.asarray(x)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(buf, path=None):
    """Parse container bytes into a float64 array (payload widened from float32)."""
    n = len(buf)
    if n < 12:
        raise FormatError(f"truncated header: expected at least 12 bytes, got {n}", path, n)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", path, 0)
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    if ndim > _MAX_NDIM:
        raise FormatError(f"implausible ndim {ndim}", path, 8)
    head = 12 + 4 * ndim
    if n < head:
        raise FormatError(f"truncated dims: expected {head} header bytes, got {n}", path, n)
    dims = struct.unpack_from(f"<{ndim}I", buf, 12)
    expected = head + 4 * int(np.prod(dims, dtype=np.int64))
    if n != expected:
        kind = "truncated" if n < expected else "oversized"
        raise FormatError(f"{kind} payload: expected {expected} bytes, got {n}", path, min(n, expected))
    data = np.frombuffer(buf, dtype="<f4", offset=head)
    return data.reshape(dims).astype(DTYPE)


def save_tensor(path, x):
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read tensor file: {e.strerror}", path) from e
    return decode_tensor(buf, path)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# manifest

@dataclass
class DatasetManifest:
    n_domains: int
    n_classes: int
    shape: tuple
    seed: int
    counts: dict
    files: list
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def validate(self, path=None):
        if self.version != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {self.version}", path)
        if sum(self.counts.values()) != len(self.files):
            raise FormatError(
                f"manifest counts sum to {sum(self.counts.values())} but list {len(self.files)} files", path)
        seen = {d: 0 for d in self.counts}
        for rec in self.files:
            d, y = rec["domain"], rec["y"]
            if d not in seen:
                raise FormatError(f"file {rec['path']} has undeclared domain {d}", path)
            if not 1 <= y <= self.n_classes:
                raise FormatError(f"file {rec['path']} has label {y} outside [1, {self.n_classes}]", path)
            seen[d] += 1
        for d, c in self.counts.items():
            if seen[d] != c:
                raise FormatError(f"domain {d}: manifest count {c}, listed {seen[d]}", path)
        return self

    def to_json(self):
        return {
            "version": self.version,
            "K": self.n_domains,
            "C_cls": self.n_classes,
            "shape": list(self.shape),
            "seed": self.seed,
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "files": self.files,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_json(cls, obj, path=None):
        try:
            return cls(
                n_domains=int(obj["K"]),
                n_classes=int(obj["C_cls"]),
                shape=tuple(obj["shape"]),
                seed=obj["seed"],
                counts={int(k): int(v) for k, v in obj["counts"].items()},
                files=list(obj["files"]),
                version=int(obj["version"]),
                extra=obj.get("extra", {}),
            ).validate(path)
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"malformed manifest: {e!r}", path) from e


def read_manifest(root):
    path = Path(root) / "manifest.json"
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot read manifest: {e.strerror}", path) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e.msg}", path, e.pos) from e
    return DatasetManifest.from_json(obj, path)


@dataclass
class Dataset:
    """In-memory view of a dataset directory.  ``y`` and ``domains`` are 1-based."""

    X: np.ndarray
    y: np.ndarray
    domains: np.ndarray
    manifest: DatasetManifest = None
    root: Path = None

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.domains[idx], self.manifest, self.root)

    def __len__(self):
        return len(self.y)


def load_dataset(root):
    root = Path(root)
    manifest = read_manifest(root)
    X = np.empty((len(manifest.files),) + tuple(manifest.shape), dtype=DTYPE)
    for i, rec in enumerate(manifest.files):
        x = load_tensor(root / rec["path"])
        if x.shape != tuple(manifest.shape):
            raise FormatError(f"tensor shape {x.shape} differs from manifest shape {manifest.shape}",
                              root / rec["path"])
        X[i] = x
    y = np.array([r["y"] for r in manifest.files], dtype=np.intp)
    d = np.array([r["domain"] for r in manifest.files], dtype=np.intp)
    return Dataset(X, y, d, manifest, root)


def leave_one_out_split(manifest, target_domain):
    """Split manifest file records into (source records, target records)."""
    if target_domain not in manifest.counts:
        raise ParameterError(f"unknown domain {target_domain}; have {sorted(manifest.counts)}")
    src = [r for r in manifest.files if r["domain"] != target_domain]
    tgt = [r for r in manifest.files if r["domain"] == target_domain]
    return src, tgt


def split_indices(domains, target_domain):
    domains = np.asarray(domains)
    if target_domain not in set(domains.tolist()):
        raise ParameterError(f"unknown domain {target_domain}")
    return np.flatnonzero(domains != target_domain), np.flatnonzero(domains == target_domain)


# --------------------------------------------------------------------------
# generator

_PATTERNS = ("hbar", "vbar", "diag", "antidiag", "cross", "ring", "blob")

DEFAULT_TILTS = (0.5, 1.0, 1.5, 2.0)
DEFAULT_GAINS = ((0.9, 0.6, 0.3), (0.4, 0.8, 0.5), (0.3, 0.5, 0.9), (0.7, 0.7, 0.7))
DEFAULT_OFFSETS = ((0.05, 0.15, 0.25), (0.2, 0.05, 0.1), (0.1, 0.2, 0.05), (0.15, 0.15, 0.15))


@dataclass
class GeneratorConfig:
    n_domains: int = 4
    n_classes: int = 7
    n_per_domain: int = 200
    shape: tuple = (3, 32, 32)
    tilts: tuple = DEFAULT_TILTS
    gains: tuple = DEFAULT_GAINS
    offsets: tuple = DEFAULT_OFFSETS
    noise: float = 0.04
    jitter: int = 2
    glyph_size: float = 0.22

    def validate(self):
        c, h, w = self.shape
        if self.n_domains < 2 or self.n_classes < 2:
            raise ParameterError("need at least 2 domains and 2 classes")
        if h != w or h < 8 or h & (h - 1):
            raise ParameterError(f"image side must be a power of two >= 8, got {h}x{w}")
        if self.n_per_domain < self.n_classes:
            raise ParameterError("each domain needs at least one sample per class")
        for name in ("tilts", "gains", "offsets"):
            if len(getattr(self, name)) < self.n_domains:
                raise ParameterError(f"{name} lists {len(getattr(self, name))} domains, need {self.n_domains}")
        for g in list(self.gains) + list(self.offsets):
            if len(g) < c:
                raise ParameterError(f"channel triples must cover {c} channels")
        if self.noise < 0 or self.jitter < 0:
            raise ParameterError("noise and jitter must be nonnegative")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("shape", "tilts"):
            if k in known:
                known[k] = tuple(known[k])
        for k in ("gains", "offsets"):
            if k in known:
                known[k] = tuple(tuple(t) for t in known[k])
        return cls(**known).validate()

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))


def class_centers(n_classes, size):
    """Class-specific glyph centres on a ring around the image centre."""
    ang = 2 * np.pi * np.arange(n_classes) / n_classes
    r = size * 0.22
    return np.stack([size / 2 + r * np.sin(ang), size / 2 + r * np.cos(ang)], axis=1)


def render_glyph(cls_id, size, center, half, pattern=None):
    """Binary glyph (0-based class) centred at ``center`` with half-extent ``half``."""
    pattern = pattern or _PATTERNS[cls_id % len(_PATTERNS)]
    rr, cc = np.mgrid[0:size, 0:size].astype(DTYPE)
    dy, dx = rr - center[0], cc - center[1]
    inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    t = 1.0
    if pattern == "hbar":
        g = inside & (np.abs(dy) <= t)
    elif pattern == "vbar":
        g = inside & (np.abs(dx) <= t)
    elif pattern == "diag":
        g = inside & (np.abs(dy - dx) <= 1.5 * t)
    elif pattern == "antidiag":
        g = inside & (np.abs(dy + dx) <= 1.5 * t)
    elif pattern == "cross":
        g = inside & ((np.abs(dy) <= t) | (np.abs(dx) <= t))
    elif pattern == "ring":
        r = np.hypot(dy, dx)
        g = (r <= half) & (r >= half - 1.5)
    elif pattern == "blob":
        g = np.hypot(dy, dx) <= half * 0.6
    else:
        raise ParameterError(f"unknown glyph pattern {pattern!r}")
    return g.astype(DTYPE)


def _radial_envelope(size, tilt):
    f = np.fft.fftfreq(size) * size
    rad = np.hypot(f[:, None], f[None, :])
    return np.maximum(rad, 1.0) ** (-tilt)


def style_glyph(glyph, tilt, gains, offsets, noise, rng):
    """Apply a domain style; the envelope is real and symmetric, so the glyph's
    phase is untouched before noise and clipping."""
    size = glyph.shape[-1]
    base = np.real(np.fft.ifft2(np.fft.fft2(glyph) * _radial_envelope(size, tilt)))
    peak = np.max(np.abs(base))
    if peak > 0:
        base = base / peak
    c = len(gains)
    x = np.asarray(offsets, DTYPE)[:, None, None] + np.asarray(gains, DTYPE)[:, None, None] * base
    if noise > 0:
        x = x + noise * rng.normal((c, size, size))
    return np.clip(x, 0.0, 1.0)


def _sample(cfg, domain, cls_id, rng):
    c, size, _ = cfg.shape
    center = class_centers(cfg.n_classes, size)[cls_id]
    center = center + rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
    glyph = render_glyph(cls_id, size, center, cfg.glyph_size * size)
    return style_glyph(glyph, cfg.tilts[domain], cfg.gains[domain][:c], cfg.offsets[domain][:c],
                       cfg.noise, rng)


def _plan(cfg):
    plan = []
    for d in range(cfg.n_domains):
        for i in range(cfg.n_per_domain):
            plan.append((d, i % cfg.n_classes, i // cfg.n_classes))
    return plan


def generate_arrays(cfg, rng):
    """Generate in memory.  Returns a :class:`Dataset` with 1-based labels/domains."""
    cfg.validate()
    rng = as_rng(rng)
    plan = _plan(cfg)
    children = rng.spawn(len(plan))
    X = np.empty((len(plan),) + tuple(cfg.shape), dtype=DTYPE)
    for k, ((d, c, _), r) in enumerate(zip(plan, children)):
        X[k] = _sample(cfg, d, c, r)
    y = np.array([c + 1 for _, c, _ in plan], dtype=np.intp)
    dom = np.array([d + 1 for d, _, _ in plan], dtype=np.intp)
    return Dataset(X, y, dom)


def generate_dataset(cfg, out_dir, rng, seed=None):
    """Write one container file per sample plus ``manifest.json`` (last)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = as_rng(rng)
    ds = generate_arrays(cfg, rng)
    files = []
    for k, (d, c, j) in enumerate(_plan(cfg)):
        name = f"d{d + 1}_c{c + 1}_{j:04d}.dgt"
        save_tensor(out / name, ds.X[k].astype(np.float32))
        files.append({"path": name, "y": c + 1, "domain": d + 1})
    manifest = DatasetManifest(
        n_domains=cfg.n_domains,
        n_classes=cfg.n_classes,
        shape=tuple(cfg.shape),
        seed=int(rng.seed if seed is None else seed),
        counts={d + 1: cfg.n_per_domain for d in range(cfg.n_domains)},
        files=files,
        extra={"generator": cfg.to_dict()},
    ).validate()
    write_json(out / "manifest.json", manifest.to_json())
    ds.X = ds.X.astype(np.float32).astype(DTYPE)
    ds.manifest, ds.root = manifest, out
    return manifest, ds
