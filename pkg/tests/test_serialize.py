import io
import pathlib
import struct
import tempfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fasttcm.serialize import (
    FormatError,
    read_container,
    read_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    write_container,
)


def test_header_layout():
    raw = tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert raw[:4] == b"FTCM"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<2Q", raw[12:28]) == (1, 3)
    assert np.frombuffer(raw[28:], dtype="<f8").tolist() == [1.0, 2.0, 3.0]


def test_scalar_roundtrip():
    out = tensor_from_bytes(tensor_to_bytes(np.float64(2.5)))
    assert out.shape == () and out == 2.5


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=4)))
def test_tensor_roundtrip_bitwise(arr):
    back = tensor_from_bytes(tensor_to_bytes(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_bad_magic_reports_offset():
    with pytest.raises(FormatError, match="byte 0"):
        tensor_from_bytes(b"XXXX" + bytes(8))


def test_truncated_payload_reports_offset():
    raw = tensor_to_bytes(np.ones(4))
    with pytest.raises(FormatError, match="byte 20"):
        tensor_from_bytes(raw[:-3])


def test_read_several_tensors_from_one_stream():
    buf = io.BytesIO(tensor_to_bytes(np.ones(2)) + tensor_to_bytes(np.zeros((1, 3))))
    assert read_tensor(buf).shape == (2,)
    assert read_tensor(buf).shape == (1, 3)


def test_container_roundtrip(tmp_path):
    sections = {"encoders": {"w": np.arange(6.0).reshape(2, 3)}, "head": {}, "bridge": {"b": np.ones(1)}}
    meta = {"config_hash": "abc123", "step": "7"}
    path = tmp_path / "c.ftcm"
    write_container(path, sections, meta)
    back, back_meta = read_container(path)
    assert back_meta == meta
    assert list(back) == ["encoders", "head", "bridge"]
    np.testing.assert_array_equal(back["encoders"]["w"], sections["encoders"]["w"])
    assert not (tmp_path / "c.ftcm.tmp").exists()


def test_container_rejects_tensor_file(tmp_path):
    path = tmp_path / "t.ftcm"
    path.write_bytes(tensor_to_bytes(np.ones(2)))
    with pytest.raises(FormatError, match="container magic"):
        read_container(path)


def test_container_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "c.ftcm"
    write_container(path, {"s": {"x": np.ones(2)}})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_container(path)


@given(st.integers(1, 60))
def test_container_truncation_always_detected(cut):
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "c.ftcm"
        write_container(path, {"sec": {"a": np.ones(3)}}, {"k": "v"})
        raw = path.read_bytes()
        path.write_bytes(raw[: max(len(raw) - cut, 0)])
        with pytest.raises(FormatError):
            read_container(path)
