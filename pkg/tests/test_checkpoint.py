"""Tensor file round-trips and corruption handling."""

from __future__ import annotations

import numpy as np
import pytest

from arcdet.checkpoint import CheckpointError, load_tensors, save_tensors


def test_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {
        "b.mat": rng.normal(size=(4, 5)).astype(np.float32),
        "a.vec": rng.normal(size=(7,)).astype(np.float32),
        "c.cube": rng.normal(size=(2, 3, 4)).astype(np.float32),
    }
    path = tmp_path / "t.ckpt"
    save_tensors(str(path), tensors)
    loaded = load_tensors(str(path))
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_reserialization_is_byte_identical(tmp_path):
    rng = np.random.default_rng(4)
    tensors = {"z": rng.normal(size=(3,)).astype(np.float32),
               "a": rng.normal(size=(2, 2)).astype(np.float32)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_tensors(str(p1), tensors)
    save_tensors(str(p2), load_tensors(str(p1)))
    assert p1.read_bytes() == p2.read_bytes()


def test_header_is_readable_text(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(str(path), {"w": np.zeros((2, 3), dtype=np.float32)})
    header = path.read_bytes().split(b"\n\n")[0].decode("ascii")
    assert header == "w 2,3 float32 0"


def test_truncated_blob_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(str(path), {"w": np.zeros((4,), dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated|accounts"):
        load_tensors(str(path))


def test_bad_dtype_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    path.write_bytes(b"w 1 float64 0\n\n" + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="dtype"):
        load_tensors(str(path))


def test_missing_separator_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    path.write_bytes(b"w 1 float32 0\n")
    with pytest.raises(CheckpointError, match="blank line"):
        load_tensors(str(path))


def test_wrong_offset_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    path.write_bytes(b"w 1 float32 4\n\n" + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="offset"):
        load_tensors(str(path))
