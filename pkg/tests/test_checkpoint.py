import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from superpose.checkpoint import (MAGIC, _encode, decode_checkpoint, load_checkpoint, load_model,
                                  save_checkpoint, save_model)
from superpose.errors import CorruptionError, FormatError
from superpose.model import ModelConfig, init_params


def test_empty_table(tmp_path):
    p = save_checkpoint({}, tmp_path / "e.sptx")
    assert p.read_bytes() == MAGIC + b"\x01\x00\x00\x00\x00"
    assert load_checkpoint(p) == {}


def test_small_layout():
    buf = _encode({"w": np.array([[1, 2], [3, 4]], np.float32)})
    # magic, version, count, name len, name, dtype, rank, dims, payload
    assert len(buf) == 5 + 1 + 4 + 2 + 1 + 2 + 8 + 16
    assert buf[-16:] == np.array([1, 2, 3, 4], "<f4").tobytes()


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_bitwise(a):
    back = decode_checkpoint(_encode({"a": a, "ü/b": a}))
    assert list(back) == ["a", "ü/b"]
    assert back["a"].shape == a.shape
    np.testing.assert_array_equal(back["a"].view(np.uint32), a.view(np.uint32))


def test_bad_magic_and_version():
    good = _encode({"x": np.ones(2, np.float32)})
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE1" + good[5:])
    with pytest.raises(FormatError):
        decode_checkpoint(good[:5] + b"\x02" + good[6:])
    bad_dtype = bytearray(good)
    bad_dtype[5 + 1 + 4 + 2 + 1] = 7
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(bad_dtype))


@pytest.mark.parametrize("cut", [6, 10, 13, 15, 20, 27])
def test_truncation_reports_offset(cut):
    good = _encode({"x": np.ones(3, np.float32)})
    with pytest.raises(CorruptionError) as e:
        decode_checkpoint(good[:cut])
    assert 0 <= e.value.offset <= cut


def test_trailing_bytes():
    with pytest.raises(CorruptionError):
        decode_checkpoint(_encode({}) + b"\x00")


def test_model_round_trip(tmp_path):
    cfg = ModelConfig(n_layers=2, hidden=8, n_heads=2, ff_mult=2, context=6, seed=2 ** 63 + 12345)
    p = init_params(cfg)
    back = load_model(save_model(p, tmp_path / "m.sptx"))
    assert back.config == cfg
    assert back.checksum() == p.checksum()
    assert not (tmp_path / "m.sptx.tmp").exists()
