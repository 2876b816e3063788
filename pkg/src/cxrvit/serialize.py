"""Binary tensor format and named-block checkpoints.

Tensor record (little-endian)::

    u64 rank | u64 dim[rank] | f64 payload[prod(dims)]

Checkpoint::

    b"CXRVCKPT" | u64 version | u64 len | config JSON (utf-8, sorted keys)
    u64 n_blocks | n_blocks x (u64 len | name | u64 flags | tensor record)

Flag bit 0 marks a trainable block, bit 1 a non-parameter buffer.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np

MAGIC = b"CXRVCKPT"
VERSION = 1
FLAG_TRAINABLE = 1
FLAG_BUFFER = 2

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", _read_exact(fh, 8))[0]


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f8", order="C")
    fh.write(struct.pack("<Q", array.ndim))
    if array.ndim:
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(array.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    rank = _read_u64(fh)
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(dims)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


@dataclass
class Checkpoint:
    config: dict
    blocks: Dict[str, np.ndarray] = field(default_factory=dict)
    flags: Dict[str, int] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<Q", VERSION))
        header = json.dumps(self.config, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<Q", len(header)))
        buf.write(header)
        buf.write(struct.pack("<Q", len(self.blocks)))
        for name, array in self.blocks.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<Q", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<Q", self.flags.get(name, 0)))
            write_tensor(buf, array)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Checkpoint":
        fh = io.BytesIO(payload)
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        version = _read_u64(fh)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config = json.loads(_read_exact(fh, _read_u64(fh)).decode("utf-8"))
        ckpt = cls(config)
        for _ in range(_read_u64(fh)):
            name = _read_exact(fh, _read_u64(fh)).decode("utf-8")
            ckpt.flags[name] = _read_u64(fh)
            ckpt.blocks[name] = read_tensor(fh)
        return ckpt

    def save(self, path: PathLike) -> str:
        payload = self.to_bytes()
        Path(path).write_bytes(payload)
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def sha256_file(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
