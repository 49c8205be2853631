"""Experiment orchestration: training runs with metrics and checkpoints,
offline augmentation, flatness probing and the ablation runner."""
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import DTYPE, Rng, as_rng
from .data import (DatasetManifest, FormatError, encode_tensor, load_dataset, load_tensor,
                   save_tensor, split_indices, write_json)
from .estimator import MODES, DomainInvariantClassifier, accuracy_from_logits, evaluate
from .exceptions import ParameterError
from .network import Network, cross_entropy, perturb_parameters
from .spectral import AugmentConfig, choose_donors, contrastive_batch, sample_mix_params

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
CHECKPOINT_VERSION = 1


@dataclass
class ExperimentConfig:
    """Everything a training run needs besides the data itself."""

    dataset: str = None
    target_domain: int = 1
    seeds: tuple = (0,)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.2
    beta: float = 0.9
    alpha_beta: tuple = (1.0, 1.0)
    lambda_beta: tuple = (0.1, 0.1)
    mode: str = "ddc+digb"
    out_dir: str = None
    architecture: str = None
    input_offset: float = 0.5

    def validate(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ParameterError("batch size must be at least 2 (donor sampling needs a second sample)")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ParameterError("epochs and learning rate must be positive")
        AugmentConfig(tuple(self.alpha_beta), tuple(self.lambda_beta))
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("seeds", "alpha_beta", "lambda_beta"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def paper_scale(cls, **overrides):
        """Batch 64, initial rate 0.002, 50 epochs, EMA momentum 0.999."""
        return replace(cls(batch_size=64, learning_rate=0.002, epochs=50, beta=0.999), **overrides)

    def estimator(self, seed):
        return DomainInvariantClassifier(
            mode=self.mode, architecture=self.architecture, epochs=self.epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate, beta=self.beta,
            alpha_beta=tuple(self.alpha_beta), lambda_beta=tuple(self.lambda_beta),
            input_offset=self.input_offset, random_state=seed)


# --------------------------------------------------------------------------
# checkpoints

def quantize(net):
    """Round parameters to float32 and back, matching what a checkpoint stores."""
    net.set_flat(net.get_flat().astype(np.float32).astype(DTYPE))
    return net


def save_checkpoint(path, net, meta=None, enhancement=None):
    """Write ``path`` (JSON) plus one container file per parameter tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    layers = []
    for l, layer in enumerate(net.param_layers, start=1):
        entry = {"index": l, "kind": layer.kind}
        for name, p in zip(("weight", "bias"), layer.params()):
            fname = f"{stem}_l{l}_{name}.dgt"
            save_tensor(path.parent / fname, p.astype(np.float32))
            entry[name] = fname
        layers.append(entry)
    doc = {
        "version": CHECKPOINT_VERSION,
        "architecture": net.architecture,
        "seed": net.seed,
        "layers": layers,
        "enhancement": None if enhancement is None else [float(v) for v in enhancement],
        **(meta or {}),
    }
    write_json(path, doc)
    return path


def load_checkpoint(path):
    """Returns ``(network, metadata dict)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot read checkpoint: {e.strerror}", path) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint is not valid JSON: {e.msg}", path, e.pos) from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')}", path)
    try:
        net = Network.from_architecture(doc["architecture"], seed=doc.get("seed"), init=False)
        entries = doc["layers"]
    except (KeyError, ValueError) as e:
        raise FormatError(f"malformed checkpoint: {e}", path) from e
    if len(entries) != net.n_param_layers:
        raise FormatError(f"checkpoint lists {len(entries)} layers, architecture has {net.n_param_layers}", path)
    for layer, entry in zip(net.param_layers, entries):
        for name, p in zip(("weight", "bias"), layer.params()):
            t = load_tensor(path.parent / entry[name])
            if t.shape != p.shape:
                raise FormatError(f"layer {entry['index']} {name}: shape {t.shape}, expected {p.shape}",
                                  path.parent / entry[name])
            p[...] = t
    net.mark_updated()
    return net, doc


# --------------------------------------------------------------------------
# evaluation helpers

def flatness_probe(net, X, labels, sigma, n_draws, rng):
    """Mean and standard error of ``loss(theta) - loss(theta + eps)`` over
    ``n_draws`` Gaussian perturbations.  Near a minimum the gap is usually
    negative; its magnitude measures sharpness."""
    if sigma < 0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma}")
    if n_draws < 1:
        raise ParameterError(f"need at least one draw, got {n_draws}")
    if len(X) == 0:
        raise ParameterError("cannot probe an empty split")
    rng = as_rng(rng)
    base = cross_entropy(net.predict_logits(X), labels)
    gaps = np.empty(n_draws)
    for i in range(n_draws):
        moved = perturb_parameters(net, sigma, rng)
        gaps[i] = base - cross_entropy(moved.predict_logits(X), labels)
    stderr = float(gaps.std(ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else 0.0
    return float(gaps.mean()), stderr


def _labels_for(classes, y):
    idx = np.searchsorted(classes, y)
    if np.any(idx >= len(classes)) or np.any(classes[np.minimum(idx, len(classes) - 1)] != y):
        raise ParameterError("split contains labels unseen in training")
    return idx


def _split(ds, target_domain, split):
    src, tgt = split_indices(ds.domains, target_domain)
    if split == "source":
        return src
    if split == "target":
        return tgt
    raise ParameterError(f"split must be 'source' or 'target', got {split!r}")


# --------------------------------------------------------------------------
# training run

def run_experiment(cfg, seed=None):
    """Train one model and write ``metrics.jsonl``, ``checkpoint.json`` (plus
    parameter files) and ``enhancement.csv`` into ``cfg.out_dir``."""
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    if cfg.out_dir is None or cfg.dataset is None:
        raise ParameterError("config needs both 'dataset' and 'out_dir'")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset)
    src, tgt = split_indices(ds.domains, cfg.target_domain)
    est = cfg.estimator(seed)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    base = {"schema": METRICS_SCHEMA, "mode": cfg.mode, "seed": seed, "target_domain": cfg.target_domain}

    def emit(rec):
        with metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({**base, **rec}, sort_keys=True) + "\n")

    def monitor(epoch, model, record):
        rec = dict(record)
        rec["source_acc"] = model.score(ds.X[src], ds.y[src])
        rec["target_acc"] = model.score(ds.X[tgt], ds.y[tgt])
        emit(rec)
        log.info("epoch %d loss %.4f target acc %.3f", epoch, rec["loss"], rec["target_acc"])

    est.fit(ds.X[src], ds.y[src], ds.domains[src], monitor=monitor)
    quantize(est.net_)
    final = {
        "event": "final",
        "epoch": cfg.epochs,
        "step": est.optimizer_.step,
        "source_acc": est.score(ds.X[src], ds.y[src]),
        "target_acc": est.score(ds.X[tgt], ds.y[tgt]),
        "w": est.enhancement_.w.tolist() if cfg.mode == "ddc+digb" else [1.0] * est.net_.n_param_layers,
    }
    emit(final)
    meta = {
        "mode": cfg.mode,
        "target_domain": cfg.target_domain,
        "classes": est.classes_.tolist(),
        "input_offset": cfg.input_offset,
        # out_dir is left out so identical runs in different places match byte for byte
        "config": _jsonable({k: v for k, v in asdict(cfg).items() if k != "out_dir"}),
        "enhancement_initialized": bool(est.enhancement_.initialized),
    }
    w = est.enhancement_.w if cfg.mode == "ddc+digb" else np.ones(est.net_.n_param_layers)
    save_checkpoint(out / "checkpoint.json", est.net_, meta, w)
    write_enhancement_csv(out / "enhancement.csv", w)
    return {"source_acc": final["source_acc"], "target_acc": final["target_acc"], "w": final["w"]}


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def checkpoint_inputs(meta, X):
    return np.asarray(X, dtype=DTYPE) - meta.get("input_offset", 0.0)


def evaluate_checkpoint(checkpoint, dataset, split="target"):
    net, meta = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    idx = _split(ds, meta["target_domain"], split)
    classes = np.asarray(meta["classes"])
    return evaluate(net, checkpoint_inputs(meta, ds.X[idx]), _labels_for(classes, ds.y[idx])), len(idx)


def probe_checkpoint(checkpoint, dataset, sigma, draws, seed, split="target"):
    net, meta = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    idx = _split(ds, meta["target_domain"], split)
    classes = np.asarray(meta["classes"])
    return flatness_probe(net, checkpoint_inputs(meta, ds.X[idx]), _labels_for(classes, ds.y[idx]),
                          sigma, draws, Rng(seed))


def write_enhancement_csv(path, w):
    lines = ["layer_index,weight"] + [f"{l},{float(v)!r}" for l, v in enumerate(w, start=1)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def enhancement_report(w):
    """Compare the mean weight of the deeper half of the layers with the shallower half."""
    w = np.asarray(w, dtype=DTYPE)
    half = len(w) // 2
    shallow = float(w[:half].mean()) if half else float("nan")
    deep = float(w[len(w) - half:].mean()) if half else float("nan")
    return {"n_layers": len(w), "shallow_mean": shallow, "deep_mean": deep,
            "deep_exceeds_shallow": bool(deep > shallow)}


# --------------------------------------------------------------------------
# offline augmentation

def augment_corpus(dataset, out_dir, cfg, rng, chunk=64):
    """Write one contrastive sample per input sample, donors from other domains."""
    ds = load_dataset(dataset) if not hasattr(dataset, "X") else dataset
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = as_rng(rng)
    donors = choose_donors(ds.domains, rng)
    params = [sample_mix_params(rng, cfg) for _ in range(len(ds))]
    alphas = np.array([p.alpha for p in params])
    lambdas = np.array([p.lam for p in params])
    files = []
    for start in range(0, len(ds), chunk):
        rows = np.arange(start, min(start + chunk, len(ds)))
        # contrastive_batch indexes donors within the batch it is given
        batch = np.concatenate([ds.X[rows], ds.X[donors[rows]]])
        local = np.arange(len(rows)) + len(rows)
        aug = contrastive_batch(batch, np.concatenate([local, np.arange(len(rows))]),
                                np.concatenate([alphas[rows], np.zeros(len(rows))]),
                                np.concatenate([lambdas[rows], np.zeros(len(rows))]))[:len(rows)]
        for k, i in enumerate(rows):
            rec = ds.manifest.files[i]
            path = out / rec["path"]
            try:
                save_tensor(path, aug[k].astype(np.float32))
            except OSError as e:
                raise OSError(f"cannot write {path}: {e.strerror}") from e
            files.append({**rec, "source_index": int(i), "donor_index": int(donors[i]),
                          "donor_domain": int(ds.domains[donors[i]]),
                          "alpha": float(alphas[i]), "lambda": float(lambdas[i])})
    m = ds.manifest
    manifest = DatasetManifest(m.n_domains, m.n_classes, m.shape, m.seed, dict(m.counts), files,
                               extra={**m.extra, "augmented_from": str(ds.root),
                                      "alpha_beta": list(cfg.alpha_beta),
                                      "lambda_beta": list(cfg.lambda_beta),
                                      "augment_seed": int(rng.seed)}).validate()
    write_json(out / "manifest.json", manifest.to_json())
    return manifest


# --------------------------------------------------------------------------
# ablation

def run_ablation(X, y, domains, cfg, seeds=(0, 1, 2, 3, 4), targets=None, modes=MODES,
                 flatness_sigma=None, flatness_draws=50, progress=None):
    """Leave-one-domain-out accuracy for each (mode, seed, target).

    All modes share data, seeds and therefore initial parameters.  Returns a
    dict ``{"accuracy": {mode: array[seed, target]}, "flatness": {...}}``
    with flatness gaps only when ``flatness_sigma`` is given.
    """
    targets = sorted(set(np.asarray(domains).tolist())) if targets is None else list(targets)
    acc = {m: np.zeros((len(seeds), len(targets))) for m in modes}
    flat = {m: np.zeros((len(seeds), len(targets))) for m in modes} if flatness_sigma is not None else None
    w = {m: [] for m in modes}
    for m in modes:
        for i, seed in enumerate(seeds):
            for j, t in enumerate(targets):
                src, tgt = split_indices(domains, t)
                est = replace(cfg, mode=m).estimator(seed).fit(X[src], y[src], domains[src])
                acc[m][i, j] = est.score(X[tgt], y[tgt])
                w[m].append(est.enhancement_.w.copy())
                if flat is not None:
                    yt = _labels_for(est.classes_, y[tgt])
                    flat[m][i, j] = flatness_probe(est.net_, est.prepare(X[tgt]), yt, flatness_sigma,
                                                   flatness_draws, Rng(seed))[0]
                if progress is not None:
                    progress(m, seed, t, acc[m][i, j])
    return {"accuracy": acc, "flatness": flat, "enhancement": {m: np.array(v) for m, v in w.items()},
            "seeds": list(seeds), "targets": targets}
