import struct

import numpy as np
import pytest

from advgame.data import (
    Dataset,
    IdxMagicError,
    IdxTrailingDataError,
    IdxTruncatedError,
    IdxTypeError,
    SyntheticSpec,
    batches,
    gen_synthetic,
    load_idx_dataset,
    parse_idx,
    parse_idx_raw,
    write_idx,
)
from advgame.numerics import Rng


def idx_file(dims, payload, code=0x08):
    return bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_parse_rank1_scales():
    out = parse_idx(idx_file([3], [0, 128, 255]))
    assert np.array_equal(out, [0.0, 128 / 255, 1.0])


def test_parse_rank3_shape():
    assert parse_idx(idx_file([2, 2, 2], range(8))).shape == (2, 2, 2)


def test_round_trip_seed43():
    arr = Rng(43).generator.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    buf = write_idx(arr)
    assert write_idx(parse_idx_raw(buf)) == buf
    assert write_idx(parse_idx(buf)) == buf


def test_every_truncation_rejected():
    buf = idx_file([3, 4], range(12))
    for k in range(len(buf)):
        with pytest.raises(IdxTruncatedError):
            parse_idx(buf[:k])


def test_bad_magic():
    buf = bytearray(idx_file([2], [1, 2]))
    buf[1] = 7
    with pytest.raises(IdxMagicError) as ei:
        parse_idx(bytes(buf))
    assert ei.value.offset == 0


@pytest.mark.parametrize("code", [0x09, 0x0B, 0x0C, 0x0D, 0x0E])
def test_unsupported_type_code(code):
    with pytest.raises(IdxTypeError) as ei:
        parse_idx(idx_file([2], [1, 2], code))
    assert ei.value.offset == 2


def test_trailing_bytes():
    with pytest.raises(IdxTrailingDataError):
        parse_idx(idx_file([2], [1, 2, 3]))


def test_write_rejects_out_of_range_floats():
    with pytest.raises(ValueError):
        write_idx(np.array([1.5]))


def test_load_idx_dataset(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(idx_file([3, 2, 2], range(0, 240, 20)))
    lab.write_bytes(idx_file([3], [0, 9, 4]))
    ds = load_idx_dataset(img, lab)
    assert ds.inputs.shape == (3, 4) and ds.inputs.max() <= 1.0
    assert list(ds.labels) == [0, 9, 4] and ds.classes == 10


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([0]), 2)


def test_npz_round_trip(tmp_path):
    ds = gen_synthetic(SyntheticSpec(dim=3, examples=10, seed=2))
    ds.save_npz(tmp_path / "d.npz")
    back = Dataset.load_npz(tmp_path / "d.npz")
    assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.labels, ds.labels)


def test_synthetic_noiseless():
    ds = gen_synthetic(SyntheticSpec(dim=1, examples=6, margin=2.0, noise=0.0))
    assert np.array_equal(ds.inputs[ds.labels == 0, 0], [-1.0] * 3)
    assert np.array_equal(ds.inputs[ds.labels == 1, 0], [1.0] * 3)


@pytest.mark.parametrize("kind", ["two_gaussians", "two_moons"])
def test_synthetic_deterministic(kind):
    spec = SyntheticSpec(kind=kind, dim=3, examples=50, seed=8)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


def test_synthetic_separable_at_wide_margin():
    ds = gen_synthetic(SyntheticSpec(dim=5, examples=1000, margin=4.0, noise=0.5, seed=0))
    acc = np.mean((ds.inputs[:, 0] > 0).astype(int) == ds.labels)
    assert acc >= 0.99


@pytest.mark.parametrize("kw", [dict(examples=1), dict(dim=0), dict(kind="spiral"), dict(noise=-1.0)])
def test_synthetic_rejects_bad_spec(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_batches_partition():
    bs = batches(10, 3, seed=0, epoch=0)
    assert [len(b) for b in bs] == [3, 3, 3, 1]
    assert sorted(np.concatenate(bs)) == list(range(10))


def test_batches_single_when_large():
    bs = batches(5, 8, seed=1, epoch=0)
    assert len(bs) == 1 and sorted(bs[0]) == list(range(5))


def test_batches_seeded_per_epoch():
    a = batches(20, 4, seed=3, epoch=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, batches(20, 4, seed=3, epoch=1)))
    b = np.concatenate(batches(20, 4, seed=3, epoch=2))
    assert not np.array_equal(np.concatenate(a), b)


def test_batches_reject_zero():
    with pytest.raises(ValueError):
        batches(5, 0, 0, 0)
