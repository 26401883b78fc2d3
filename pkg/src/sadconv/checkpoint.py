"""Binary checkpoint container for :class:`SadcNet`.

Layout (little-endian)::

    b"SADC" | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | 4 x u32 shape | f32 payload

Biases are stored with shape ``(C, 1, 1, 1)``. Network hyperparameters are
recovered from the tensor names and shapes.
"""
from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .sadc import SadcNet

MAGIC = b"SADC"
VERSION = 1
_NAME = re.compile(r"^(stem\.w|head\.w|block(\d+)\.(w_l|w1|w2))(\.bias)?$")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


def _shape4(arr: np.ndarray) -> tuple[int, int, int, int]:
    if arr.ndim == 1:
        return (arr.shape[0], 1, 1, 1)
    if arr.ndim != 4:
        raise ValueError(f"cannot store a {arr.ndim}-d tensor")
    return arr.shape


def dumps(tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<4I", *_shape4(arr)))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"truncated checkpoint while reading {what} "
                                           f"(need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def loads(buf: bytes) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a checkpoint into ``(version, {name: float32 array})``. Bias arrays come back 1-d."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", r.take(8, "header"))
    tensors = {}
    for i in range(count):
        (length,) = struct.unpack("<I", r.take(4, f"entry {i} name length"))
        try:
            name = r.take(length, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry {i}: name is not UTF-8") from exc
        shape = struct.unpack("<4I", r.take(16, f"{name} shape"))
        size = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * size, f"{name} payload"), dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = arr.reshape(shape[0]) if name.endswith(".bias") else arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after {count} entries")
    return version, tensors


def save_checkpoint(net: SadcNet, path) -> None:
    Path(path).write_bytes(dumps({k: v.data for k, v in net.named_parameters().items()}))


def _net_from_tensors(tensors: dict[str, np.ndarray], input_mode: str, slope: float) -> SadcNet:
    blocks: dict[int, set[str]] = {}
    for name in tensors:
        mt = _NAME.match(name)
        if mt and mt.group(2) is not None:
            blocks.setdefault(int(mt.group(2)), set()).add(mt.group(3))
    if "stem.w" not in tensors or "head.w" not in tensors or not blocks:
        raise CheckpointError("checkpoint lacks stem.w, head.w or any block tensors")
    n_blocks = max(blocks) + 1
    if sorted(blocks) != list(range(n_blocks)):
        raise CheckpointError(f"block indices are not contiguous: {sorted(blocks)}")
    stem = tensors["stem.w"]
    channels, kernel_size = stem.shape[0], stem.shape[-1]
    kinds = blocks[0]
    if kinds == {"w_l", "w1", "w2"}:
        variant = "sadc"
    elif kinds == {"w1", "w2"}:
        variant = "shared"
    elif kinds == {"w_l", "w1"}:
        variant = "split"
    else:
        raise CheckpointError(f"block0 holds an unrecognised tensor set {sorted(kinds)}")
    has_bias = "stem.w.bias" in tensors
    net = SadcNet(channels, n_blocks, kernel_size, variant, input_mode, slope, has_bias, init="identity")
    expected = net.named_parameters()
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {missing}")
    for name, param in expected.items():
        arr = tensors[name]
        if arr.shape != param.shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} does not fit expected {param.shape}")
        param.data = arr.copy()
    return net


def load_checkpoint(path, input_mode: str = "whole", slope: float = 0.2) -> SadcNet:
    """Rebuild a :class:`SadcNet` from a checkpoint file.

    ``input_mode`` and ``slope`` are not stored and must match training.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    version, tensors = loads(path.read_bytes())
    unknown = sorted(n for n in tensors if not _NAME.match(n))
    if version != VERSION:
        detail = f"; unknown tensor names: {unknown}" if unknown else ""
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}{detail}")
    if unknown:
        raise UnknownTensorError(f"unknown tensor names: {unknown}")
    return _net_from_tensors(tensors, input_mode, slope)
