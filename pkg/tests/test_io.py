import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fpno import io
from fpno.exceptions import FormatError


def _sample():
    return {"a": np.arange(6, dtype=float).reshape(2, 3), "idx": np.array([3, 1, 2]),
            "empty": np.zeros((0, 4))}


def test_round_trip_and_layout():
    blob = io.dumps("model", {"x": 1, "name": "t"}, _sample())
    assert blob[:8] == io.MAGIC
    assert int.from_bytes(blob[8:12], "little") == io.VERSION
    assert blob[12:20] == b"model\0\0\0"
    assert blob[-32:] == hashlib.sha256(blob[:-32]).digest()
    kind, meta, arrays = io.loads(blob, "model")
    assert kind == "model" and meta == {"x": 1, "name": "t"}
    assert arrays["idx"].dtype == np.dtype("<i8")
    for k, v in _sample().items():
        assert np.array_equal(arrays[k], v) and arrays[k].shape == v.shape


def test_header_key_order_irrelevant():
    a = io.dumps("x", {"b": 1, "a": 2}, {})
    b = io.dumps("x", {"a": 2, "b": 1}, {})
    assert a == b


@pytest.mark.parametrize("cut", [1, 32, 100])
def test_truncation(cut):
    blob = io.dumps("model", {}, _sample())
    with pytest.raises(FormatError):
        io.loads(blob[:-cut])


def test_bad_magic_version_kind():
    blob = bytearray(io.dumps("model", {}, _sample()))
    with pytest.raises(FormatError, match="kind|expected"):
        io.loads(bytes(blob), "dataset")
    bad = bytearray(blob)
    bad[0:8] = b"NOTFPNO!"
    with pytest.raises(FormatError, match="not an fpno"):
        io.loads(bytes(bad))
    bad = bytearray(blob)
    bad[8] = 2
    with pytest.raises(FormatError, match="version"):
        io.loads(bytes(bad))


def test_single_bit_flip_detected():
    blob = bytearray(io.dumps("model", {}, _sample()))
    blob[len(blob) // 2] ^= 1
    with pytest.raises(FormatError, match="checksum"):
        io.loads(bytes(blob))


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        io.dumps("model", {}, {"s": np.array(["a"])})


def test_file_helpers(tmp_path):
    path = tmp_path / "c.bin"
    blob = io.write(path, "dataset", {"k": [1, 2]}, _sample())
    assert path.read_bytes() == blob
    assert io.read(path, "dataset")[1] == {"k": [1, 2]}


@given(arrays(np.float64, array_shapes(max_dims=3, max_side=5)))
def test_float_round_trip_bitwise(a):
    blob = io.dumps("t", {}, {"a": a})
    back = io.loads(blob)[2]["a"]
    assert back.tobytes() == a.astype("<f8").tobytes()
    assert io.dumps("t", {}, {"a": back}) == blob


@given(st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=4))
def test_header_round_trip(meta):
    assert io.loads(io.dumps("t", meta, {}))[1] == meta
