import json
import struct

import numpy as np
import pytest

from dgkit.core import Rng
from dgkit.data import (Dataset, DatasetManifest, GeneratorConfig, decode_tensor, encode_tensor,
                        generate_arrays, generate_dataset, leave_one_out_split, load_dataset,
                        load_tensor, read_manifest, save_tensor, split_indices)
from dgkit.exceptions import FormatError, ParameterError


# ---- container ----------------------------------------------------------------

def test_container_layout_by_hand():
    x = np.array([[1.0, -2.5, 3.25]], dtype=np.float32)
    buf = encode_tensor(x)
    assert buf[:4] == b"DGT1"
    assert struct.unpack("<III", buf[4:16]) == (1, 2, 1)
    assert struct.unpack("<I", buf[16:20]) == (3,)
    assert struct.unpack("<3f", buf[20:]) == (1.0, -2.5, 3.25)
    assert len(buf) == 12 + 4 * 2 + 4 * 3


def test_round_trip_bit_exact(tmp_path):
    x = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    save_tensor(tmp_path / "a.dgt", x)
    y = load_tensor(tmp_path / "a.dgt")
    assert y.shape == x.shape
    assert y.astype(np.float32).tobytes() == x.tobytes()
    assert (tmp_path / "a.dgt").read_bytes() == encode_tensor(y.astype(np.float32))


def test_truncated_payload_names_lengths(tmp_path):
    buf = encode_tensor(np.zeros((2, 3), np.float32))[:-5]
    (tmp_path / "t.dgt").write_bytes(buf)
    with pytest.raises(FormatError) as e:
        load_tensor(tmp_path / "t.dgt")
    msg = str(e.value)
    assert "expected 44" in msg and "got 39" in msg and "t.dgt" in msg
    assert e.value.offset == 39


@pytest.mark.parametrize("mutate, needle", [
    (lambda b: b"XGT1" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:10], "header"),
    (lambda b: b + b"\0\0\0\0", "oversized"),
])
def test_header_errors(mutate, needle):
    with pytest.raises(FormatError, match=needle):
        decode_tensor(mutate(encode_tensor(np.ones((2, 2), np.float32))))


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "nope.dgt")


# ---- manifest -----------------------------------------------------------------

def _manifest(**kw):
    files = [{"path": "a", "y": 1, "domain": 1}, {"path": "b", "y": 2, "domain": 2}]
    base = dict(n_domains=2, n_classes=2, shape=(1, 2, 2), seed=0, counts={1: 1, 2: 1}, files=files)
    base.update(kw)
    return DatasetManifest(**base)


def test_manifest_json_round_trip():
    m = _manifest()
    obj = json.loads(json.dumps(m.to_json()))
    assert set(obj) == {"version", "K", "C_cls", "shape", "seed", "counts", "files"}
    assert DatasetManifest.from_json(obj) == m


def test_manifest_wrong_count_rejected_on_open(tmp_path):
    obj = _manifest().to_json()
    obj["counts"]["1"] = 3
    (tmp_path / "manifest.json").write_text(json.dumps(obj))
    with pytest.raises(FormatError, match="counts"):
        read_manifest(tmp_path)


def test_manifest_bad_label_and_garbage(tmp_path):
    with pytest.raises(FormatError):
        _manifest(files=[{"path": "a", "y": 5, "domain": 1}, {"path": "b", "y": 1, "domain": 2}]).validate()
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


# ---- generator -----------------------------------------------------------------

def test_generator_config_validation():
    for bad in (dict(n_domains=1), dict(n_classes=1), dict(shape=(3, 24, 24)), dict(n_per_domain=0)):
        with pytest.raises(ParameterError):
            GeneratorConfig(**bad).validate()


@pytest.mark.slow
def test_full_size_dataset_on_disk(tmp_path):
    cfg = GeneratorConfig(n_domains=4, n_classes=7, n_per_domain=200, shape=(3, 32, 32))
    manifest, ds = generate_dataset(cfg, tmp_path, Rng(11))
    assert len(list(tmp_path.glob("*.dgt"))) == 800
    assert manifest.counts == {1: 200, 2: 200, 3: 200, 4: 200}
    assert len(manifest.files) == 800
    assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0
    back = load_dataset(tmp_path)
    assert np.array_equal(back.X, ds.X)
    assert np.array_equal(back.y, ds.y) and np.array_equal(back.domains, ds.domains)
    for d in range(1, 5):
        counts = np.bincount(ds.y[ds.domains == d], minlength=8)[1:]
        assert counts.max() - counts.min() <= 1


def test_file_naming_and_labels(tmp_path):
    cfg = GeneratorConfig(n_domains=2, n_classes=3, n_per_domain=6, shape=(3, 8, 8))
    manifest, _ = generate_dataset(cfg, tmp_path, Rng(0))
    names = {r["path"] for r in manifest.files}
    assert "d1_c1_0000.dgt" in names and "d2_c3_0001.dgt" in names
    for r in manifest.files:
        d, c = r["path"][1], r["path"][4]
        assert (int(d), int(c)) == (r["domain"], r["y"])


def test_dataset_is_byte_identical_for_same_seed(tmp_path):
    cfg = GeneratorConfig(n_domains=2, n_classes=3, n_per_domain=9, shape=(3, 16, 16))
    generate_dataset(cfg, tmp_path / "a", Rng(3))
    generate_dataset(cfg, tmp_path / "b", Rng(3))
    generate_dataset(cfg, tmp_path / "c", Rng(4))
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "d1_c1_0000.dgt").read_bytes() != (tmp_path / "c" / "d1_c1_0000.dgt").read_bytes()


def _nearest_centroid_accuracy(feats, labels, rng):
    # half of each label for centroids, the other half scored
    train = np.zeros(len(labels), bool)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train[idx[: len(idx) // 2]] = True
    classes = np.unique(labels)
    cents = np.stack([feats[train & (labels == c)].mean(0) for c in classes])
    d = ((feats[~train, None, :] - cents[None]) ** 2).sum(-1)
    return np.mean(classes[np.argmin(d, 1)] == labels[~train])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_domains_amplitude_separable_and_classes_phase_coded(seed):
    ds = generate_arrays(GeneratorConfig(), Rng(seed))
    spec = np.fft.fft2(ds.X)
    amp = np.abs(spec).reshape(len(ds.X), -1)
    phase_only = np.real(np.fft.ifft2(np.exp(1j * np.angle(spec)))).reshape(len(ds.X), -1)
    rng = np.random.default_rng(seed)
    acc_dom = _nearest_centroid_accuracy(amp, ds.domains, rng)
    acc_cls = _nearest_centroid_accuracy(phase_only, ds.y, rng)
    assert acc_dom > 0.8, acc_dom
    assert acc_cls > 0.6, acc_cls


# ---- splits --------------------------------------------------------------------

def test_leave_one_out_split(small_dataset, tmp_path):
    manifest, _ = generate_dataset(GeneratorConfig(n_per_domain=14, shape=(3, 8, 8)), tmp_path, Rng(0))
    src, tgt = leave_one_out_split(manifest, 2)
    assert {r["domain"] for r in src} == {1, 3, 4}
    assert {r["domain"] for r in tgt} == {2}
    assert sorted(r["path"] for r in src + tgt) == sorted(r["path"] for r in manifest.files)
    assert not {r["path"] for r in src} & {r["path"] for r in tgt}
    assert {r["y"] for r in tgt} <= {r["y"] for r in src}
    with pytest.raises(ParameterError):
        leave_one_out_split(manifest, 5)


def test_split_indices_partition(small_dataset):
    tr, te = split_indices(small_dataset.domains, 3)
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(len(small_dataset)))
    assert set(small_dataset.domains[te]) == {3}
    with pytest.raises(ParameterError):
        split_indices(small_dataset.domains, 0)


def test_subset_keeps_alignment(small_dataset):
    sub = small_dataset.subset(np.array([3, 0]))
    assert isinstance(sub, Dataset)
    assert np.array_equal(sub.X[1], small_dataset.X[0]) and sub.y[0] == small_dataset.y[3]
