import io
import struct

import pytest
import torch

from exceptions import FormatError
from substrate.lvtd import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_tensor,
    read_tensor,
    save_checkpoint,
    save_tensor,
    write_tensor,
)


def test_tensor_header_layout():
    buf = io.BytesIO()
    write_tensor(buf, torch.arange(6, dtype=torch.float32).reshape(2, 3))
    raw = buf.getvalue()
    assert raw[:4] == b"LVTD"
    assert struct.unpack("<HH", raw[4:8]) == (1, 2)
    assert struct.unpack("<2Q", raw[8:24]) == (2, 3)
    assert len(raw) == 24 + 6 * 4
    assert struct.unpack("<f", raw[24 + 4:24 + 8])[0] == 1.0


def test_tensor_file_round_trip(tmp_path, rng):
    from substrate.tensor_ops import sample_gaussian

    x = sample_gaussian(rng, (3, 4, 5))
    save_tensor(tmp_path / "x.lvtd", x)
    assert torch.equal(load_tensor(tmp_path / "x.lvtd"), x)


def test_bad_magic_is_format_error():
    with pytest.raises(FormatError, match="magic"):
        read_tensor(io.BytesIO(b"NOPE" + b"\x00" * 16))


def test_truncated_data_is_format_error():
    buf = io.BytesIO()
    write_tensor(buf, torch.ones(4))
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(io.BytesIO(buf.getvalue()[:-3]))


def test_unsupported_version_is_format_error():
    raw = b"LVTD" + struct.pack("<HH", 7, 0)
    with pytest.raises(FormatError, match="version"):
        read_tensor(io.BytesIO(raw))


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "absent.lvtd")


def test_checkpoint_is_byte_deterministic_and_sorted(tmp_path):
    tensors = {"teacher/b": torch.ones(2), "student/a": torch.zeros(1, 2)}
    config = {"step": 3, "config": {"seed": 1}}
    assert encode_checkpoint(config, tensors) == encode_checkpoint(config, dict(reversed(list(tensors.items()))))

    save_checkpoint(tmp_path / "c.lvck", config, tensors)
    header, loaded = load_checkpoint(tmp_path / "c.lvck")
    assert header == config
    assert list(loaded) == ["student/a", "teacher/b"]
    assert torch.equal(loaded["teacher/b"], torch.ones(2))


def test_checkpoint_with_bad_config_block():
    raw = b"LVCK" + struct.pack("<H", 1) + struct.pack("<I", 3) + b"{x}"
    with pytest.raises(FormatError, match="JSON"):
        decode_checkpoint(io.BytesIO(raw))
