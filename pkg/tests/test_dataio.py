import struct

import numpy as np
import pytest

from gradlab.dataio import (CountMismatchError, Dataset, IdxMagicError, IdxTruncatedError,
                            load_idx, read_idx, save_idx, synth_blobs, write_idx)
from gradlab.nn import accuracy
from gradlab.tensor import make_rng
from gradlab.train import TrainConfig, train


def _write_raw(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(bytes(magic))
        fh.write(struct.pack(">" + "I" * len(dims), *dims))
        fh.write(payload)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    labels = np.array([0, 2, 1, 2, 0], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    _write_raw(ip, [0, 0, 8, 3], [5, 3, 4], imgs.tobytes())
    _write_raw(lp, [0, 0, 8, 1], [5], labels.tobytes())
    return ip, lp, imgs, labels


def test_load_idx_scales_and_shapes(idx_pair):
    ip, lp, imgs, labels = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (5, 3, 4)
    np.testing.assert_array_equal(ds.images, imgs / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.class_count == 3


def test_idx_header_constants(idx_pair):
    ip, lp, *_ = idx_pair
    assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert read_idx(ip).dtype == np.uint8 and read_idx(ip).ndim == 3
    assert read_idx(lp).ndim == 1


def test_idx_roundtrip_bytes(idx_pair, tmp_path):
    ip, lp, *_ = idx_pair
    ds = load_idx(ip, lp)
    ip2, lp2 = tmp_path / "a.idx", tmp_path / "b.idx"
    save_idx(ds, ip2, lp2)
    assert ip2.read_bytes() == ip.read_bytes()
    assert lp2.read_bytes() == lp.read_bytes()


def test_write_idx_other_dtypes(tmp_path):
    for arr in (np.arange(6, dtype=">i4").reshape(2, 3), np.linspace(0, 1, 4).astype(">f8")):
        write_idx(tmp_path / "x.idx", arr)
        np.testing.assert_array_equal(read_idx(tmp_path / "x.idx"), arr)


def test_idx_errors(idx_pair, tmp_path):
    ip, lp, imgs, _ = idx_pair
    bad = tmp_path / "bad.idx"
    _write_raw(bad, [1, 0, 8, 3], [5, 3, 4], imgs.tobytes())
    with pytest.raises(IdxMagicError):
        load_idx(bad, lp)
    short = tmp_path / "short.idx"
    _write_raw(short, [0, 0, 8, 3], [5, 3, 4], imgs.tobytes()[:-7])
    with pytest.raises(IdxTruncatedError):
        load_idx(short, lp)
    four = tmp_path / "four.idx"
    _write_raw(four, [0, 0, 8, 1], [4], bytes([0, 1, 2, 0]))
    with pytest.raises(CountMismatchError):
        load_idx(ip, four)
    # the three failure kinds are distinguishable
    assert len({IdxMagicError, IdxTruncatedError, CountMismatchError}) == 3


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 2, 2), 1.5), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2, 2)), np.array([0, 3]), 2)


def test_synth_blobs_deterministic():
    a = synth_blobs(make_rng(4, "data"), 50, 3)
    b = synth_blobs(make_rng(4, "data"), 50, 3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


def test_synth_blobs_empty():
    ds = synth_blobs(make_rng(0), 0, 4)
    assert len(ds) == 0 and ds.images.shape == (0, 28, 28)


def test_synth_blobs_learnable():
    data = synth_blobs(make_rng(7), 1200, 4)
    net = train(TrainConfig(hidden=(32,), epochs=5, seed=7), data.subset(0, 1000))
    held = data.subset(1000, 1200)
    assert accuracy(net, held.images, held.labels) >= 0.95
