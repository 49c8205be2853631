"""Acceptance criteria.  Each test records a one-line verdict that is printed
in the pytest terminal summary (see conftest.py)."""
import json
import shutil
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import dft2_bruteforce
from dgkit.cli import cli
from dgkit.core import Rng
from dgkit.data import GeneratorConfig, decode_tensor, encode_tensor, generate_arrays
from dgkit.digb import EnhancementState, OptimizerConfig, ema_update, layer_similarity, normalize, reweight, sgd_step
from dgkit.exceptions import FormatError
from dgkit.harness import ExperimentConfig, enhancement_report, run_ablation
from dgkit.network import LayerGradients, Network, cross_entropy, default_architecture
from dgkit.spectral import MixParams, fft2_complex, generate_contrastive, ifft2, fft2
from test_network import fd_check

ARTIFACTS = Path("acceptance-artifacts")


def record(criteria, k, ok, detail):
    criteria[k] = f"{'PASS' if ok else 'FAIL'}  {detail}"


def lg(*vecs):
    vecs = [np.asarray(v, float) for v in vecs]
    return LayerGradients(vecs, [len(v) for v in vecs])


def test_c01_scope_statement(criteria):
    # nothing to compute: the remaining criteria are the desk-scale substitute
    record(criteria, 1, True, "desk-scale acceptance only; no paper-scale numbers are claimed")


def test_c02_spectral_oracle(criteria):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(3):
        x = rng.random((3, 8, 8))
        errs.append(np.max(np.abs(fft2_complex(x) - dft2_bruteforce(x))))
    rt = []
    for n in (8, 16, 32, 64):
        x = rng.random((3, n, n))
        rt.append(np.max(np.abs(ifft2(fft2(x)) - x)))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-9 and max(rt) < 1e-8 and elapsed < 5
    record(criteria, 2, ok, f"dft err {max(errs):.2e}, round trip {max(rt):.2e}, {elapsed:.2f}s")
    assert ok


def test_c03_ddc_identities(criteria):
    rng = np.random.default_rng(1)
    x_c, x_s = rng.random((3, 32, 32)), rng.random((3, 32, 32))
    e_id = max(np.max(np.abs(generate_contrastive(x_c, x_s, MixParams(0.0, a)) - x_c)) for a in (0.1, 0.5))
    full = MixParams(lam=1.0, alpha=0.5)
    y_c, y_s = generate_contrastive(x_c, x_s, full), generate_contrastive(x_s, x_c, full)
    e_swap = np.max(np.abs(generate_contrastive(y_c, y_s, full) - x_c))
    e_phase = 0.0
    for alpha, lam in [(0.25, 0.7), (0.5, 1.0), (0.1, 0.3)]:
        out, ref = fft2(generate_contrastive(x_c, x_s, MixParams(lam, alpha))), fft2(x_c)
        keep = out.amplitude > 1e-8
        d = np.angle(np.exp(1j * (out.phase - ref.phase)))
        e_phase = max(e_phase, np.max(np.abs(d[keep])))
    ok = e_id <= 1e-8 and e_swap <= 1e-6 and e_phase < 1e-6
    record(criteria, 3, ok, f"identity {e_id:.1e}, double swap {e_swap:.1e}, phase {e_phase:.1e}")
    assert ok


def _relu_masks(net, x):
    masks, h = [], x
    for layer in net.layers:
        h, cache = layer.forward(h)
        if layer.kind == "relu":
            masks.append(cache)
    return masks


def _loss_fixed_pattern(net, x, labels, masks):
    # same network with every ReLU gate frozen to a given on/off pattern
    it, h = iter(masks), x
    for layer in net.layers:
        h = h * next(it) if layer.kind == "relu" else layer.forward(h)[0]
    return cross_entropy(h, labels)


def test_c04_gradients(criteria):
    t0 = time.perf_counter()
    net = Network.from_architecture(default_architecture(3, 7), seed=0)
    rng = np.random.default_rng(2)
    x, y = rng.random((8, 3, 32, 32)) - 0.5, rng.integers(0, 7, 8)
    a, n = fd_check(net, x, y, eps=1e-5)
    scale, err = np.maximum(np.abs(a), np.abs(n)), np.abs(a - n)
    bad = np.flatnonzero((err > 1e-6 * scale) & (err > 1e-10))

    # A central difference is only a derivative estimate when theta +- eps stays
    # inside one ReLU activation region.  Parameters whose perturbation flips a
    # gate are re-checked with the gates held at their pattern at theta.
    theta, base = net.get_flat(), _relu_masks(net, x)
    kink, unexplained, worst_fixed = 0, 0, 0.0
    for i in bad:
        crosses = False
        fixed = []
        for d in (1e-5, -1e-5):
            t = theta.copy()
            t[i] += d
            net.set_flat(t)
            crosses |= any((m != b).any() for m, b in zip(_relu_masks(net, x), base))
            fixed.append(_loss_fixed_pattern(net, x, y, base))
        net.set_flat(theta)
        num = (fixed[0] - fixed[1]) / 2e-5
        rel = abs(num - a[i]) / max(abs(num), abs(a[i]))
        kink += crosses
        if not crosses or (rel > 1e-6 and abs(num - a[i]) > 1e-10):
            unexplained += 1
        worst_fixed = max(worst_fixed, rel)
    ok_params = np.setdiff1d(np.arange(a.size), bad)
    sizable = ok_params[scale[ok_params] > 1e-4]
    worst = np.max(err[sizable] / scale[sizable])
    elapsed = time.perf_counter() - t0
    ok = unexplained == 0 and elapsed < 60
    record(criteria, 4, ok, f"{a.size} params: {a.size - len(bad)} match plain FD (max abs err "
                            f"{err[ok_params].max():.1e}, worst rel {worst:.1e} where |g| > 1e-4); "
                            f"{kink} straddle a ReLU kink and match with gates fixed (worst rel "
                            f"{worst_fixed:.1e}); {elapsed:.1f}s")
    assert unexplained == 0
    assert elapsed < 60


def test_c05_digb_arithmetic(criteria):
    s = layer_similarity(lg([1, 2], [1, 2], [1, 0], [1, 2, 3]), lg([2, 4], [-1, -2], [0, 3], [4, 5, 6]))
    sim_ok = s[0] == pytest.approx(1, abs=1e-15) and s[1] == pytest.approx(-1, abs=1e-15) \
        and s[2] == 0.0 and abs(s[3] - 0.974632) <= 1e-6
    # 0.2, 0.5, 0.8 are not exact in binary; the exact quotient of the stored
    # doubles is 0.49999999999999994, so the midpoint is held to a few ulps
    w_hat = normalize([0.2, 0.8, 0.5])
    norm_ok = w_hat[0] == 0.0 and w_hat[1] == 1.0 and abs(w_hat[2] - 0.5) <= 4 * np.finfo(float).eps
    ema_ok = ema_update(EnhancementState(np.ones(2), 0.999, True), [0, 0]).w.tolist() == [0.999, 0.999]
    net = Network.from_architecture(default_architecture(3, 4), seed=0)
    x = np.random.default_rng(0).random((4, 3, 8, 8))
    _, g = net.loss_and_grads(x, [0, 1, 2, 3])
    before = [p.copy() for p in net.param_layers[1].params()]
    sgd_step(net, reweight(g, g, [1, 0, 1, 1]), OptimizerConfig(lr=1.0, total_steps=2))
    freeze_ok = all(np.array_equal(b, p) for b, p in zip(before, net.param_layers[1].params()))
    ok = sim_ok and norm_ok and ema_ok and freeze_ok
    record(criteria, 5, ok, f"similarity {sim_ok}, min-max {norm_ok}, ema {ema_ok}, freeze {freeze_ok}")
    assert ok


def test_c06_degeneracy_trajectory(criteria, small_dataset):
    # lambda pinned at 0 gives x' == x for every sample
    ds = small_dataset
    base = ExperimentConfig(epochs=8, batch_size=8, lambda_beta=(0.0, 1.0))
    traj = {}
    for mode in ("ddc", "ddc+digb"):
        steps = []
        from dataclasses import replace
        est = replace(base, mode=mode).estimator(0)
        est.fit(ds.X, ds.y, ds.domains, step_monitor=lambda t, net: steps.append(net.get_flat()) if t <= 100 else None)
        traj[mode] = steps
    n = min(len(traj["ddc"]), len(traj["ddc+digb"]))
    same = n >= 100 and all(np.array_equal(a, b) for a, b in zip(traj["ddc"][:100], traj["ddc+digb"][:100]))
    record(criteria, 6, same, f"{min(n, 100)} steps compared, bit-identical: {same}")
    assert same


@pytest.fixture(scope="module")
def ablation():
    cfg = ExperimentConfig()
    ds = generate_arrays(GeneratorConfig(), Rng(0))
    t0 = time.perf_counter()
    res = run_ablation(ds.X, ds.y, ds.domains, cfg, seeds=(0, 1, 2, 3, 4), flatness_sigma=0.05,
                       flatness_draws=50)
    res["elapsed"] = time.perf_counter() - t0
    ARTIFACTS.mkdir(exist_ok=True)
    doc = {"config": {k: v for k, v in vars(cfg).items()}, "elapsed_s": res["elapsed"],
           "accuracy": {m: a.tolist() for m, a in res["accuracy"].items()},
           "flatness": {m: a.tolist() for m, a in res["flatness"].items()},
           "enhancement_mean": res["enhancement"]["ddc+digb"].mean(0).tolist()}
    (ARTIFACTS / "ablation.json").write_text(json.dumps(doc, indent=2, default=list) + "\n")
    return res


@pytest.mark.slow
def test_c07_ablation_ordering(criteria, ablation):
    m = {k: float(v.mean()) for k, v in ablation["accuracy"].items()}
    g1, g2 = m["ddc"] - m["baseline"], m["ddc+digb"] - m["ddc"]
    ok = g1 > 0.01 and g2 > 0.01 and ablation["elapsed"] < 15 * 60
    record(criteria, 7, ok, f"baseline {m['baseline']:.4f}, ddc {m['ddc']:.4f}, ddc+digb {m['ddc+digb']:.4f} "
                            f"(gaps {100 * g1:+.2f}pp, {100 * g2:+.2f}pp), {ablation['elapsed'] / 60:.1f} min")
    assert g1 > 0.01, "ddc does not beat baseline by 1pp"
    assert g2 > 0.01, "ddc+digb does not beat ddc by 1pp"


@pytest.mark.slow
def test_c08_flatness_direction(criteria, ablation):
    # soft: a miss writes a warning artifact instead of failing
    per_seed = {m: np.abs(a).mean(1) for m, a in ablation["flatness"].items()}
    wins = int(np.sum(per_seed["ddc+digb"] <= per_seed["baseline"]))
    ok = wins >= 4
    record(criteria, 8, ok, f"ddc+digb flatter than baseline in {wins}/5 seeds (soft)")
    if not ok:
        ARTIFACTS.mkdir(exist_ok=True)
        (ARTIFACTS / "flatness_warning.json").write_text(json.dumps(
            {"wins": wins, "baseline": per_seed["baseline"].tolist(),
             "ddc+digb": per_seed["ddc+digb"].tolist(), "sigma": 0.05, "draws": 50}, indent=2) + "\n")
        warnings.warn(f"flatness direction held in only {wins}/5 seeds")


@pytest.mark.slow
def test_c09_enhancement_report(criteria, ablation):
    w = ablation["enhancement"]["ddc+digb"].mean(0)
    rep = enhancement_report(w)
    assert rep["n_layers"] == 4 and np.all((w >= 0) & (w <= 1))
    record(criteria, 9, True, f"mean w {np.round(w, 3).tolist()}, deep half exceeds shallow half: "
                              f"{rep['deep_exceeds_shallow']} (informational)")


def test_c10_determinism_and_formats(criteria, tmp_path):
    run = CliRunner().invoke
    (tmp_path / "spec.json").write_text('{"n_per_domain": 7, "shape": [3, 16, 16]}')
    (tmp_path / "cfg.json").write_text('{"epochs": 1, "batch_size": 4}')

    def tree(root):
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    work = tmp_path / "work"

    def pipeline():
        assert run(cli, ["generate", "--spec", str(tmp_path / "spec.json"), "--out", str(work / "ds"),
                         "--seed", "1"]).exit_code == 0
        assert run(cli, ["train", "--config", str(tmp_path / "cfg.json"), "--dataset", str(work / "ds"),
                         "--out", str(work / "run"), "--seed", "1"]).exit_code == 0
        assert run(cli, ["augment", "--dataset", str(work / "ds"), "--out", str(work / "aug"),
                         "--seed", "1"]).exit_code == 0
        return tree(work)

    first = pipeline()
    shutil.rmtree(work)
    second = pipeline()
    same = first == second and len(first) > 60

    x = np.random.default_rng(0).random((3, 5, 7)).astype(np.float32)
    round_trip = decode_tensor(encode_tensor(x)).astype(np.float32).tobytes() == x.tobytes()
    diagnosed = 0
    good = encode_tensor(x)
    for bad in (good[:-3], b"NOPE" + good[4:], good[:6], good + b"\0"):
        try:
            decode_tensor(bad)
        except FormatError as e:
            diagnosed += e.offset is not None
    victim = work / "ds" / "d1_c1_0000.dgt"
    victim.write_bytes(b"DGT1")
    res = run(cli, ["eval", "--checkpoint", str(work / "run" / "checkpoint.json"),
                    "--dataset", str(work / "ds")])
    cli_ok = res.exit_code != 0 and "d1_c1_0000.dgt" in res.output and res.exception is not None \
        and isinstance(res.exception, SystemExit)
    ok = same and round_trip and diagnosed == 4 and cli_ok
    record(criteria, 10, ok, f"byte-identical reruns {same}, container round trip {round_trip}, "
                             f"diagnosed {diagnosed}/4 malformed buffers, cli error exit {cli_ok}")
    assert ok
