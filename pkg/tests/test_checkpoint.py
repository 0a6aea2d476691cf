"""Checkpoint binary format tests: byte layout, round trips, corruption."""

import struct
import zlib

import numpy as np
import pytest

from moonnet.checkpoint import (
    MAGIC,
    BadMagicError,
    CheckpointError,
    CrcMismatchError,
    TruncatedError,
    bytes_to_tensor,
    load_checkpoint,
    save_checkpoint,
    tensor_to_bytes,
)


def sample_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return [
        ("stage0/conv/kernel", rng.standard_normal((4, 3, 3, 3)).astype(np.float32)),
        ("stage0/conv/bias", rng.standard_normal(4).astype(np.float32)),
        ("head/w", rng.standard_normal((1, 4, 1, 1)).astype(np.float32)),
    ]


class TestLayout:
    def test_starts_with_magic(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(sample_tensors(), p)
        assert p.read_bytes()[:8] == MAGIC == b"MOONNET1"

    def test_count_field(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(sample_tensors(), p)
        (count,) = struct.unpack_from("<I", p.read_bytes(), 8)
        assert count == 3

    def test_trailing_crc_valid(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(sample_tensors(), p)
        data = p.read_bytes()
        (crc,) = struct.unpack("<I", data[-4:])
        assert crc == zlib.crc32(data[:-4]) & 0xFFFFFFFF

    def test_first_record_fields(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(sample_tensors(), p)
        data = p.read_bytes()
        off = 12
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode()
        off += name_len
        rank = data[off]
        dims = struct.unpack_from(f"<{rank}I", data, off + 1)
        assert name == "stage0/conv/kernel"
        assert rank == 4 and dims == (4, 3, 3, 3)


class TestRoundTrip:
    def test_values_and_order_exact(self, tmp_path):
        p = tmp_path / "a.ckpt"
        tensors = sample_tensors()
        save_checkpoint(tensors, p)
        back = load_checkpoint(p)
        assert [n for n, _ in back] == [n for n, _ in tensors]
        for (_, a), (_, b) in zip(back, tensors):
            assert a.dtype == np.float32 and a.shape == b.shape
            assert a.tobytes() == b.tobytes()

    def test_save_load_save_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(sample_tensors(), p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_scalar_rank_zero(self, tmp_path):
        p = tmp_path / "s.ckpt"
        save_checkpoint([("lr", np.float32(0.01).reshape(()))], p)
        (name, arr) = load_checkpoint(p)[0]
        assert name == "lr" and arr.shape == () and arr == np.float32(0.01)

    def test_empty_list(self, tmp_path):
        p = tmp_path / "e.ckpt"
        save_checkpoint([], p)
        assert load_checkpoint(p) == []


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(sample_tensors(), p)
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_checkpoint(p)

    def test_flipped_payload_byte_is_crc_mismatch(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(sample_tensors(), p)
        data = bytearray(p.read_bytes())
        data[40] ^= 0x01
        p.write_bytes(bytes(data))
        with pytest.raises(CrcMismatchError):
            load_checkpoint(p)

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(sample_tensors(), p)
        p.write_bytes(p.read_bytes()[:6])
        with pytest.raises(TruncatedError):
            load_checkpoint(p)

    def test_errors_share_base_class(self):
        for exc in (BadMagicError, CrcMismatchError, TruncatedError):
            assert issubclass(exc, CheckpointError)
            assert issubclass(exc, IOError)


class TestMetadataBlobs:
    def test_bytes_round_trip_all_lengths(self):
        for n in range(0, 9):
            data = bytes(range(n))
            assert tensor_to_bytes(bytes_to_tensor(data)) == data

    def test_utf8_text_round_trip(self):
        text = "design_id=5\nwidth=0.25\n# gate é\n"
        arr = bytes_to_tensor(text.encode())
        assert arr.ndim == 1
        assert tensor_to_bytes(arr).decode() == text

    def test_blob_survives_checkpoint(self, tmp_path):
        p = tmp_path / "m.ckpt"
        blob = b"\x00\x01\xfe\xff json-ish {\"a\": 1}"
        save_checkpoint([("__meta__/raw", bytes_to_tensor(blob))], p)
        name, arr = load_checkpoint(p)[0]
        assert name == "__meta__/raw"
        assert tensor_to_bytes(arr) == blob
