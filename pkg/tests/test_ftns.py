import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fusionattn import ftns


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(allow_nan=False, width=64)))
def test_float64_roundtrip_is_bit_exact(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("f") / "x.ftns"
    ftns.write_tensor(p, arr, version=ftns.VERSION_F64)
    back = ftns.read_tensor(p)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.astype("<f8").tobytes()


def test_float32_roundtrip(tmp_path):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    ftns.write_tensor(tmp_path / "a.ftns", arr)
    assert ftns.read_header(tmp_path / "a.ftns") == (1, (3, 4))
    np.testing.assert_array_equal(ftns.read_tensor(tmp_path / "a.ftns"), arr)


def test_layout_is_little_endian(tmp_path):
    ftns.write_tensor(tmp_path / "a.ftns", np.array([[1.5, -2.0]]), version=1)
    raw = (tmp_path / "a.ftns").read_bytes()
    assert raw[:4] == b"FTNS"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 2, 1, 2)
    assert struct.unpack("<2f", raw[20:]) == (1.5, -2.0)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b"XXXX" + b[4:], "not an FTNS"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "unsupported"),
        (lambda b: b[:-1], "size"),
        (lambda b: b[:14], "truncated"),
    ],
)
def test_corrupt_files_rejected(tmp_path, mutate, message):
    p = tmp_path / "a.ftns"
    ftns.write_tensor(p, np.ones((2, 3)))
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(ftns.FormatError, match=message):
        ftns.read_tensor(p)


def test_bad_version_on_write(tmp_path):
    with pytest.raises(ftns.FormatError):
        ftns.write_tensor(tmp_path / "a.ftns", np.ones(2), version=3)
