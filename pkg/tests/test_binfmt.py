import numpy as np
import pytest

from resmem import binfmt


def _write(tmp_path, **arrays):
    path = tmp_path / "c.bin"
    binfmt.write_container(path, b"TESTMAGI", {"note": "x"}, arrays)
    return path


def test_round_trip_preserves_arrays_and_header(tmp_path):
    arrays = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1, 2**63 + 5], dtype=np.uint64),
        "c": np.zeros((0,), dtype=np.int64),
    }
    header, out = binfmt.read_container(_write(tmp_path, **arrays), b"TESTMAGI")
    assert header["note"] == "x"
    for k, v in arrays.items():
        assert out[k].dtype == v.dtype
        np.testing.assert_array_equal(out[k], v)


def test_wrong_magic_rejected(tmp_path):
    path = _write(tmp_path, a=np.ones(3))
    with pytest.raises(binfmt.FormatError, match="magic"):
        binfmt.read_container(path, b"OTHERMAG")


def test_flipped_byte_fails_checksum(tmp_path):
    path = _write(tmp_path, a=np.ones(16))
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(binfmt.FormatError, match="checksum"):
        binfmt.read_container(path, b"TESTMAGI")


def test_truncated_file_rejected(tmp_path):
    path = _write(tmp_path, a=np.ones(16))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(binfmt.FormatError):
        binfmt.read_container(path, b"TESTMAGI")


def test_version_mismatch_is_explicit(tmp_path, monkeypatch):
    monkeypatch.setattr(binfmt, "FORMAT_VERSION", binfmt.FORMAT_VERSION + 1)
    path = _write(tmp_path, a=np.ones(2))
    monkeypatch.undo()
    with pytest.raises(binfmt.FormatError, match="version"):
        binfmt.read_container(path, b"TESTMAGI")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(TypeError):
        binfmt.write_container(tmp_path / "x", b"TESTMAGI", {}, {"a": np.ones(2, dtype=np.complex64)})
