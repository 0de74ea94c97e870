import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajvid.tensorio import digest_tensors, load_checkpoint, read_tensor, save_checkpoint, write_tensor


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=0, max_size=4), st.integers(0, 2**32 - 1))
def test_tensor_roundtrip(tmp_path_factory, shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    path = tmp_path_factory.mktemp("t") / "x.mmt"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == arr.shape and np.array_equal(back, arr)


def test_header_layout(tmp_path):
    path = tmp_path / "x.mmt"
    write_tensor(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:8] == b"MMTNTNSR"
    assert struct.unpack("<III", raw[8:20]) == (2, 2, 3)
    assert np.array_equal(np.frombuffer(raw[20:], "<f4"), np.arange(6))


def test_bad_magic(tmp_path):
    path = tmp_path / "x.mmt"
    path.write_bytes(b"NOTMAGIC" + bytes(8))
    with pytest.raises(ValueError):
        read_tensor(path)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a.weight": np.ones((2, 3), np.float32), "b.bias": np.zeros(4, np.float32)}
    save_checkpoint(tmp_path / "ck", tensors)
    back = load_checkpoint(tmp_path / "ck")
    assert set(back) == set(tensors)
    assert digest_tensors(back) == digest_tensors(tensors)
    assert digest_tensors(tensors, ("b.",)) == digest_tensors({"a.weight": tensors["a.weight"]})
