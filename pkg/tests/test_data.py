import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_array_equal

from ticketlab.data import (AugPolicy, Dataset, ParseError, augment, load_csv, load_idx,
                            load_manifest, random_split, read_idx, save_csv, save_idx,
                            spectral_features, synth_dataset, write_idx)
from ticketlab.tensor import make_rng


def _centroid_acc(feats, d):
    f = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    tr, te = d.train_idx, d.test_idx
    c = np.stack([f[tr][d.labels[tr] == k].mean(0) for k in range(d.n_classes)])
    return float(np.mean(np.argmax(f[te] @ c.T, 1) == d.labels[te]))


def test_synth_deterministic():
    a = synth_dataset(50, 4, 8, seed=2)
    b = synth_dataset(50, 4, 8, seed=2)
    assert a.images.tobytes() == b.images.tobytes()
    assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_dataset(50, 4, 8, seed=3).images)


def test_synth_shapes_and_range():
    d = synth_dataset(100, 10, 8, seed=0)
    assert d.images.shape == (100, 3, 8, 8)
    assert d.images.min() >= 0 and d.images.max() <= 1
    assert len(d.train_idx) == 80 and len(d.test_idx) == 20


def test_synth_balanced_labels():
    d = synth_dataset(1000, 10, 8, seed=0)
    assert_array_equal(np.bincount(d.labels, minlength=10), np.full(10, 100))


def test_synth_labels_recoverable_from_spectrum():
    d = synth_dataset(2000, 10, 8, seed=1)
    assert _centroid_acc(spectral_features(d.images), d) > 0.7


def test_synth_color_is_uninformative():
    d = synth_dataset(2000, 10, 8, seed=1)
    # mean color per channel is at chance for a centroid classifier
    assert _centroid_acc(d.images.mean(axis=(2, 3)) + 1e-9, d) < 0.2


def test_label_seed_permutes_classes():
    base = synth_dataset(200, 4, 8, seed=1, variant="shifted")
    perm = synth_dataset(200, 4, 8, seed=1, variant="shifted", label_seed=7)
    assert_array_equal(base.labels, perm.labels)
    assert not np.array_equal(base.images, perm.images)


def test_random_split_disjoint():
    tr, te = random_split(101, 0.2, 0)
    assert len(np.intersect1d(tr, te)) == 0
    assert_array_equal(np.sort(np.concatenate([tr, te])), np.arange(101))


def test_dataset_rejects_overlap():
    with pytest.raises(ValueError):
        Dataset(np.zeros((4, 1, 2, 2)), np.zeros(4, int), np.arange(3), np.arange(2, 4), "x", 2)


def test_augment_range_and_determinism():
    d = synth_dataset(16, 4, 8, seed=0)
    a = augment(d.images, AugPolicy(), make_rng(1))
    b = augment(d.images, AugPolicy(), make_rng(1))
    assert a.tobytes() == b.tobytes()
    assert a.shape == d.images.shape and a.min() >= 0 and a.max() <= 1


def test_augment_identity_policy():
    d = synth_dataset(8, 4, 8, seed=0)
    out = augment(d.images, AugPolicy((1.0, 1.0), 0.0, 0.0, 0.0), make_rng(0))
    assert_array_equal(out, d.images)


def test_aug_policy_bounds():
    with pytest.raises(ValueError):
        AugPolicy(crop_scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugPolicy(noise_sigma=0.2)


def test_idx_fixture(tmp_path):
    p = tmp_path / "img.idx"
    # hand-written: ubyte, 3-D, 2x2x2
    p.write_bytes(bytes([0, 0, 0x08, 3]) + struct.pack(">3I", 2, 2, 2) + bytes(range(8)))
    arr = read_idx(p)
    assert arr.shape == (2, 2, 2)
    assert_array_equal(arr.ravel(), np.arange(8))


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
def test_idx_roundtrip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) % 7).astype(dtype)
    write_idx(tmp_path / "a.idx", arr)
    out = read_idx(tmp_path / "a.idx")
    assert_array_equal(out, arr)


def test_idx_truncated(tmp_path):
    p = tmp_path / "t.idx"
    write_idx(p, np.arange(10, dtype=np.uint8))
    raw = p.read_bytes()
    for cut in (2, 6, len(raw) - 1):
        p.write_bytes(raw[:cut])
        with pytest.raises(ParseError) as e:
            read_idx(p)
        assert e.value.offset <= len(raw)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "b.idx"
    p.write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 0]))
    with pytest.raises(ParseError) as e:
        read_idx(p)
    assert e.value.offset == 0


def test_dataset_idx_roundtrip(tmp_path):
    d = synth_dataset(30, 3, 6, seed=0)
    save_idx(d, tmp_path / "i.idx", tmp_path / "l.idx")
    e = load_idx(tmp_path / "i.idx", tmp_path / "l.idx", n_classes=3)
    assert e.images.tobytes() == d.images.tobytes()
    assert_array_equal(e.labels, d.labels)


def test_dataset_csv_roundtrip(tmp_path):
    d = synth_dataset(20, 3, 6, seed=0)
    save_csv(d, tmp_path / "d.csv")
    e = load_csv(tmp_path / "d.csv", n_classes=3)
    assert e.images.tobytes() == d.images.tobytes()
    assert_array_equal(e.labels, d.labels)


def test_csv_integer_pixels(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("label,p0,p1,p2,p3\n1,0,255,0,255\n0,255,0,255,0\n")
    d = load_csv(p)
    assert d.images.shape == (2, 1, 2, 2)
    assert d.images[0, 0, 0, 1] == 1.0


def test_csv_ragged_row_offset(tmp_path):
    p = tmp_path / "x.csv"
    text = "0,1,2,3,4\n1,1,2\n"
    p.write_text(text)
    with pytest.raises(ParseError) as e:
        load_csv(p)
    assert e.value.offset == text.index("1,1,2")


def test_csv_non_numeric(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("0,1,2,3,x\n")
    with pytest.raises(ParseError):
        load_csv(p)


def test_manifest(tmp_path):
    d = synth_dataset(20, 3, 6, seed=0)
    save_idx(d, tmp_path / "i.idx", tmp_path / "l.idx")
    (tmp_path / "m.json").write_text(json.dumps(
        {"format": "idx", "images": "i.idx", "labels": "l.idx", "n_classes": 3}))
    e = load_manifest(tmp_path / "m.json")
    assert_array_equal(e.labels, d.labels)


@given(st.integers(4, 40), st.floats(0.05, 0.5), st.integers(0, 1000))
def test_split_partitions(n, frac, seed):
    tr, te = random_split(n, frac, seed)
    assert len(tr) + len(te) == n
    assert not set(tr) & set(te)
