"""
Binary formats
==============

LVTD, one dense tensor:
    magic  b"LVTD"
    u16    version (1)
    u16    rank
    u64    extents[rank]
    f32    data, row-major
All integers and floats little-endian.

LVCK, a checkpoint:
    magic  b"LVCK"
    u16    version (1)
    u32    config length, then the config as UTF-8 JSON (sorted keys)
    u32    tensor count
    per tensor: u16 name length, UTF-8 name, LVTD record

Names are namespaced, e.g. ``student/blocks.0.attn.qkv.weight`` and
``teacher/vision_head.fc1.bias``. Writers are deterministic, so equal
inputs give byte-identical files.
"""

import io
import json
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Tuple, Any, Union

import numpy as np
import torch

from exceptions import FormatError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"LVTD"
CHECKPOINT_MAGIC = b"LVCK"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}", getattr(fp, "name", None))
    return data


# ── LVTD ─────────────────────────────────────────────────────────────────────

def write_tensor(fp: BinaryIO, tensor: torch.Tensor) -> None:
    array = tensor.detach().to(torch.float32).contiguous().cpu().numpy()
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<HH", FORMAT_VERSION, array.ndim))
    fp.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fp.write(array.astype("<f4", copy=False).tobytes(order="C"))


def read_tensor(fp: BinaryIO) -> torch.Tensor:
    source = getattr(fp, "name", None)
    magic = _read_exact(fp, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", source)
    version, rank = struct.unpack("<HH", _read_exact(fp, 4, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported LVTD version {version}", source)
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank, "extents")) if rank else ()
    count = int(np.prod(shape, dtype=np.uint64)) if rank else 1
    raw = _read_exact(fp, 4 * count, "tensor data")
    array = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return torch.from_numpy(array.copy())


def save_tensor(path: PathLike, tensor: torch.Tensor) -> None:
    with open(path, "wb") as f:
        write_tensor(f, tensor)


def load_tensor(path: PathLike) -> torch.Tensor:
    try:
        with open(path, "rb") as f:
            return read_tensor(f)
    except OSError as e:
        raise FormatError(f"cannot read tensor dump: {e}", str(path))


# ── LVCK ─────────────────────────────────────────────────────────────────────

def encode_checkpoint(config: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        write_tensor(buf, tensors[name])
    return buf.getvalue()


def decode_checkpoint(fp: BinaryIO) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    source = getattr(fp, "name", None)
    magic = _read_exact(fp, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", source)
    (version,) = struct.unpack("<H", _read_exact(fp, 2, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported LVCK version {version}", source)
    (length,) = struct.unpack("<I", _read_exact(fp, 4, "config length"))
    try:
        config = json.loads(_read_exact(fp, length, "config").decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"config block is not JSON: {e}", source)
    (count,) = struct.unpack("<I", _read_exact(fp, 4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(fp, 2, "name length"))
        name = _read_exact(fp, n, "name").decode("utf-8")
        tensors[name] = read_tensor(fp)
    return config, tensors


def save_checkpoint(path: PathLike, config: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(config, tensors))
    except OSError as e:
        raise FormatError(f"cannot write checkpoint: {e}", str(path))
    logger.info("Wrote checkpoint %s (%d tensors)", path, len(tensors))


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    try:
        with open(path, "rb") as f:
            return decode_checkpoint(f)
    except OSError as e:
        raise FormatError(f"cannot read checkpoint: {e}", str(path))
