import json
import struct

import numpy as np
import pytest

from hiformer import checkpoint
from hiformer.errors import DataError, VersionError


@pytest.fixture
def tensors():
    return {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0]),
            "ids": np.array([3, 4], dtype=np.int64)}


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tensors):
        checkpoint.save(tmp_path / "c.bin", tensors, {"k": 1})
        back, config = checkpoint.load(tmp_path / "c.bin")
        assert config == {"k": 1} and list(back) == ["a", "b", "ids"]
        for name, arr in tensors.items():
            assert back[name].dtype == arr.dtype
            np.testing.assert_array_equal(back[name], arr)

    def test_layout(self, tmp_path, tensors):
        checkpoint.save(tmp_path / "c.bin", tensors, {})
        raw = (tmp_path / "c.bin").read_bytes()
        header, blob = raw.split(b"\n", 1)
        manifest = json.loads(header)
        assert manifest["format_version"] == 1
        entries = {e["name"]: e for e in manifest["tensors"]}
        assert entries["a"] == {"name": "a", "shape": [2, 3], "dtype": "float32", "offset": 0, "nbytes": 24}
        assert entries["b"]["offset"] == 24 and entries["ids"]["offset"] == 40
        # little-endian, row-major
        assert struct.unpack("<6f", blob[:24]) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
        assert struct.unpack("<d", blob[32:40]) == (-2.0,)
        assert len(blob) == 56

    def test_deterministic_bytes(self, tmp_path, tensors):
        checkpoint.save(tmp_path / "1.bin", tensors, {"z": 1, "a": 2})
        checkpoint.save(tmp_path / "2.bin", tensors, {"a": 2, "z": 1})
        assert (tmp_path / "1.bin").read_bytes() == (tmp_path / "2.bin").read_bytes()

    def test_wrong_version(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b'{"format_version": 2, "config": {}, "tensors": []}\n')
        with pytest.raises(VersionError, match="format version 2"):
            checkpoint.load(tmp_path / "c.bin")

    def test_garbage(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"\x00\xffnot json\n")
        with pytest.raises(VersionError):
            checkpoint.read_manifest(tmp_path / "c.bin")

    def test_truncated(self, tmp_path, tensors):
        checkpoint.save(tmp_path / "c.bin", tensors, {})
        raw = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(raw[:-4])
        with pytest.raises(VersionError, match="truncated"):
            checkpoint.load(tmp_path / "c.bin")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            checkpoint.load(tmp_path / "none.bin")

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(DataError):
            checkpoint.save(tmp_path / "c.bin", {"x": np.zeros(2, dtype=np.complex64)}, {})
