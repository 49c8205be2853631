"""Command line entry point: ``dgkit <command> ...``."""
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import harness
from .core import Rng
from .data import GeneratorConfig, generate_dataset, load_dataset
from .estimator import MODES
from .exceptions import FormatError, NumericError, ParameterError, ShapeError, StateError
from .spectral import AugmentConfig

_EXPECTED = (FormatError, ParameterError, ShapeError, StateError, NumericError, OSError,
             json.JSONDecodeError)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except _EXPECTED as e:
            raise click.ClickException(f"{type(e).__name__}: {e}") from e


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", path, e.pos) from e


def _pair(value):
    try:
        a, b = (float(v) for v in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected two comma-separated numbers, got {value!r}")
    return a, b


def _emit(obj):
    click.echo(json.dumps(obj, sort_keys=True))


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Amplitude-mixing augmentation and gradient-agreement training on
    synthetic multi-domain data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON generator config; defaults are used for missing keys.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
def generate(spec_path, out, seed):
    """Write a synthetic dataset (one .dgt file per sample plus manifest.json)."""
    cfg = GeneratorConfig.from_dict(_read_json(spec_path) if spec_path else {})
    manifest, _ = generate_dataset(cfg, out, Rng(seed), seed=seed)
    _emit({"out": str(out), "files": len(manifest.files), "counts": manifest.to_json()["counts"]})


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(MODES), help="Overrides the config.")
@click.option("--target-domain", type=int)
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--paper-scale", is_flag=True, help="Batch 64, rate 0.002, 50 epochs, beta 0.999.")
def train(config_path, mode, target_domain, seed, out, dataset, paper_scale):
    """Train one model with leave-one-domain-out splitting."""
    raw = _read_json(config_path) if config_path else {}
    cfg = harness.ExperimentConfig.paper_scale() if paper_scale else harness.ExperimentConfig()
    if raw:
        parsed = harness.ExperimentConfig.from_dict(raw)
        cfg = replace(cfg, **{k: getattr(parsed, k) for k in raw})
    overrides = {"mode": mode, "target_domain": target_domain, "out_dir": out, "dataset": dataset}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if seed is not None:
        cfg = replace(cfg, seeds=(seed,))
    summary = harness.run_experiment(cfg)
    _emit({"mode": cfg.mode, "target_domain": cfg.target_domain, "seed": cfg.seeds[0], **summary})


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", type=click.Choice(["source", "target"]), default="target", show_default=True)
def eval_cmd(checkpoint, dataset, split):
    """Accuracy of a checkpoint on the source or held-out target split."""
    acc, n = harness.evaluate_checkpoint(checkpoint, dataset, split)
    _emit({"split": split, "accuracy": acc, "n": n})


@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--alpha-beta", default="1,1", show_default=True, callback=lambda c, p, v: _pair(v))
@click.option("--lambda-beta", default="0.1,0.1", show_default=True, callback=lambda c, p, v: _pair(v))
@click.option("--seed", default=0, show_default=True, type=int)
def augment(dataset, out, alpha_beta, lambda_beta, seed):
    """Write one amplitude-mixed counterpart per sample, donors from other domains."""
    manifest = harness.augment_corpus(dataset, out, AugmentConfig(alpha_beta, lambda_beta), Rng(seed))
    _emit({"out": str(out), "files": len(manifest.files)})


@cli.command("probe-flatness")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--sigma", default=0.05, show_default=True, type=float)
@click.option("--draws", default=50, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--split", type=click.Choice(["source", "target"]), default="target", show_default=True)
def probe_flatness(checkpoint, dataset, sigma, draws, seed, split):
    """Mean loss gap between trained and Gaussian-perturbed parameters.

    The gap is loss(theta) - loss(theta + eps) and is usually negative near a
    minimum; a smaller magnitude means a flatter minimum.
    """
    mean, stderr = harness.probe_checkpoint(checkpoint, dataset, sigma, draws, seed, split)
    _emit({"split": split, "sigma": sigma, "draws": draws, "mean_gap": mean, "stderr": stderr})


@cli.command("dump-enhancement")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def dump_enhancement(checkpoint, out):
    """Write the enhancement vector as CSV and report deep vs shallow means."""
    _, meta = harness.load_checkpoint(checkpoint)
    w = meta.get("enhancement")
    if w is None:
        raise FormatError("checkpoint carries no enhancement vector", checkpoint)
    harness.write_enhancement_csv(out, w)
    report = harness.enhancement_report(w)
    _emit({"out": str(out), **report})


@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write the full result table as JSON.")
@click.option("--flatness-sigma", type=float, default=None)
def ablate(dataset, config_path, seeds, out, flatness_sigma):
    """Leave-one-domain-out accuracy of every mode over several seeds."""
    cfg = harness.ExperimentConfig.from_dict(_read_json(config_path)) if config_path \
        else harness.ExperimentConfig()
    ds = load_dataset(dataset)
    seeds = [int(s) for s in seeds.split(",")]
    res = harness.run_ablation(ds.X, ds.y, ds.domains, cfg, seeds=seeds, flatness_sigma=flatness_sigma)
    summary = {m: float(a.mean()) for m, a in res["accuracy"].items()}
    if out:
        doc = {"seeds": seeds, "targets": res["targets"], "mean_target_accuracy": summary,
               "accuracy": {m: a.tolist() for m, a in res["accuracy"].items()}}
        if res["flatness"] is not None:
            doc["flatness"] = {m: a.tolist() for m, a in res["flatness"].items()}
        Path(out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit({"mean_target_accuracy": summary})


def main(argv=None):
    return cli.main(args=argv, prog_name="dgkit")


if __name__ == "__main__":
    sys.exit(main())
