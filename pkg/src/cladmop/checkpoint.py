"""Binary parameter checkpoints.

Layout (little-endian): magic ``CLDMCKPT``, version (u32), config hash
(32 raw bytes), record count (u32); then per parameter, sorted by name:
name length (u16) + UTF-8 name, rank (u32) + dims (u32 each), float32
row-major data, CRC32 (u32) of the data bytes.
"""

from __future__ import annotations

import hashlib
import struct
import zlib

import numpy as np

CHECKPOINT_MAGIC = b"CLDMCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> bytes:
    """SHA-256 over canonical 'key=value' lines of a flat config mapping."""
    lines = [f"{k}={config[k]}" for k in sorted(config)]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).digest()


def save_checkpoint(path, state: dict[str, np.ndarray],
                    cfg_hash: bytes = b"\0" * 32) -> None:
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(cfg_hash)
        fh.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)) + raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        cfg_hash = fh.read(32)
        (count,) = struct.unpack("<I", fh.read(4))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            payload = fh.read(4 * size)
            (crc,) = struct.unpack("<I", fh.read(4))
            if zlib.crc32(payload) != crc:
                raise CheckpointError(f"{path}: checksum mismatch at {name!r}")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        return state, cfg_hash


def diff_states(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> set[str]:
    """Names whose values are not bitwise identical (or missing on one side)."""
    changed = set(a) ^ set(b)
    for name in set(a) & set(b):
        if a[name].shape != b[name].shape or a[name].tobytes() != b[name].tobytes():
            changed.add(name)
    return changed
