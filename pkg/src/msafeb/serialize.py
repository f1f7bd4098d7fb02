"""Binary tensor and checkpoint files.

Tensor block ("MSFT"): magic, u32 version, u32 rank, rank x u32 dims, then
row-major little-endian float32 payload. Feature files are a single rank-4
block; checkpoints ("MSCK") hold a fixed-order manifest of named blocks.
All integers little-endian.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .tensor import Tensor

FEATURE_MAGIC = b"MSFT"
CHECKPOINT_MAGIC = b"MSCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A serialized file violates its declared layout."""


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def _write_block(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    f.write(FEATURE_MAGIC)
    f.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_block(f: BinaryIO, context: str = "tensor block") -> np.ndarray:
    magic = _read_exact(f, 4, f"{context} header")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{context}: bad magic: expected {FEATURE_MAGIC!r}, got {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(f, 8, f"{context} header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{context}: unsupported version {version}")
    if not 1 <= rank <= 4:
        raise FormatError(f"{context}: rank {rank} outside 1-4")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{context} dims"))
    if any(d < 1 for d in dims):
        raise FormatError(f"{context}: zero extent in dims {dims}")
    count = int(np.prod(dims))
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(
            f"{context}: payload length mismatch: expected {4 * count} bytes, "
            f"got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


# -- feature files -----------------------------------------------------------

def write_features(path, batch: Tensor) -> None:
    """Write one rank-4 feature tensor; round-trips bit-exactly."""
    if batch.data.ndim != 4:
        raise FormatError(f"feature file holds rank-4 tensors, got rank {batch.data.ndim}")
    with open(path, "wb") as f:
        _write_block(f, batch.data)


def read_features(path) -> Tensor:
    with open(path, "rb") as f:
        arr = _read_block(f, "feature file")
        if arr.ndim != 4:
            raise FormatError(f"feature file: rank {arr.ndim} != 4")
        trailing = f.read(1)
        if trailing:
            raise FormatError("feature file: trailing bytes after payload")
    return Tensor(arr)


# -- checkpoints --------------------------------------------------------------

def save_stages(path, stages: Sequence[tuple]) -> None:
    """Write (name, ndarray) stages in the given order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(stages)))
        for name, arr in stages:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            _write_block(f, arr)


def load_stages(path) -> list:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint header")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(
                f"checkpoint: bad magic: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "checkpoint header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"checkpoint: unsupported version {version}")
        stages = []
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, f"stage {i} name length"))
            name = _read_exact(f, name_len, f"stage {i} name").decode("utf-8")
            stages.append((name, _read_block(f, f"stage '{name}'")))
    return stages


def save_checkpoint(model, path) -> None:
    """Serialize a model's named parameter/buffer stages in manifest order."""
    save_stages(path, model.state_stages())


def load_checkpoint(path, model):
    """Load stages into `model`, validating names, order, and shapes."""
    stages = load_stages(path)
    targets = model.state_stages()
    if len(stages) != len(targets):
        raise FormatError(
            f"checkpoint holds {len(stages)} stages, model expects {len(targets)}")
    for i, ((got_name, arr), (want_name, target)) in enumerate(zip(stages, targets)):
        if got_name != want_name:
            raise FormatError(
                f"stage {i}: checkpoint has '{got_name}', model expects '{want_name}'")
        if arr.shape != target.shape:
            raise FormatError(
                f"stage '{got_name}': dims {arr.shape} do not match model {target.shape}")
        target[...] = arr
    return model
