import struct

import numpy as np
import pytest

from attnfuse import ngio


def test_tensor_roundtrip_bit_exact(tmp_path):
    arr = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.ngt"
    ngio.write_tensor(path, arr)
    back = ngio.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_tensor_layout_is_little_endian_with_magic(tmp_path):
    arr = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    path = tmp_path / "t.ngt"
    ngio.write_tensor(path, arr)
    buf = path.read_bytes()
    assert buf[:4] == b"NGT1"
    rank, b, c, h, w = struct.unpack_from("<5I", buf, 4)
    assert (rank, b, c, h, w) == (4, 1, 1, 2, 2)
    assert np.frombuffer(buf[24:], "<f4").tolist() == [0, 1, 2, 3]


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.ngt"
    path.write_bytes(b"XXXX" + b"\x00" * 40)
    with pytest.raises(ngio.FormatError, match="magic"):
        ngio.read_tensor(path)


def test_tensor_truncated_payload(tmp_path):
    arr = np.zeros((1, 1, 4, 4), np.float32)
    path = tmp_path / "t.ngt"
    ngio.write_tensor(path, arr)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ngio.FormatError, match="truncated"):
        ngio.read_tensor(path)


def test_tensor_trailing_garbage(tmp_path):
    arr = np.zeros((1, 1, 2, 2), np.float32)
    path = tmp_path / "t.ngt"
    ngio.write_tensor(path, arr)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(ngio.FormatError, match="trailing"):
        ngio.read_tensor(path)


def _arrays():
    rng = np.random.default_rng(1)
    return [("enc.w", rng.standard_normal((2, 3, 3, 3)).astype(np.float32)),
            ("enc.b", rng.standard_normal((1, 2, 1, 1)).astype(np.float32))]


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "m.ckpt"
    arrays = _arrays()
    ngio.write_checkpoint(path, {"kind": "demo"}, arrays)
    config, back = ngio.read_checkpoint(path)
    assert config == {"kind": "demo"}
    assert list(back.keys()) == [n for n, _ in arrays]
    for name, arr in arrays:
        assert np.array_equal(back[name], arr)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ngio.FormatError, match="magic"):
        ngio.read_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    ngio.write_checkpoint(path, {}, _arrays())
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(ngio.FormatError):
        ngio.read_checkpoint(path)


def test_checkpoint_header_payload_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    ngio.write_checkpoint(path, {}, _arrays())
    buf = path.read_bytes()
    # extend the payload: manifest no longer covers the file
    path.write_bytes(buf + b"\x00" * 16)
    with pytest.raises(ngio.FormatError, match="payload"):
        ngio.read_checkpoint(path)


def test_atomic_write_replaces_without_partial(tmp_path):
    path = tmp_path / "out.txt"
    ngio.atomic_write_text(path, "first")
    ngio.atomic_write_text(path, "second")
    assert path.read_text() == "second"
    leftovers = [p for p in tmp_path.iterdir() if p.name != "out.txt"]
    assert leftovers == []
