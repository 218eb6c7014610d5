"""Writer for the shared embedding-store wire format.

The consumer is a separate package; the only coupling is this byte layout,
which both sides implement against (little-endian throughout):

* header: magic ``CLDMEMB1`` (8 bytes), d_llm (u32), record count (u32)
* index: per record, id length (u16), UTF-8 id, absolute offset (u64);
  entries sorted by id, offsets strictly increasing
* record: n_c (u32), four level matrices (coarse/medium/fine/last) as
  float32 row-major, each n_c x d_llm, then CRC32 (u32) over everything
  from n_c through the last matrix byte
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

STORE_MAGIC = b"CLDMEMB1"
NUM_LEVELS = 4


class StoreFormatError(RuntimeError):
    pass


def write_store(path, d_llm: int,
                records: dict[str, tuple[np.ndarray, ...]]) -> None:
    ids = sorted(records)
    payloads = []
    for trial_id in ids:
        mats = records[trial_id]
        if len(mats) != NUM_LEVELS:
            raise ValueError(f"{trial_id}: expected {NUM_LEVELS} level matrices")
        n_c = mats[0].shape[0]
        body = struct.pack("<I", n_c)
        for mat in mats:
            if mat.shape != (n_c, d_llm):
                raise ValueError(
                    f"{trial_id}: level shape {mat.shape} != ({n_c}, {d_llm})"
                )
            body += np.ascontiguousarray(mat, dtype="<f4").tobytes()
        payloads.append(body + struct.pack("<I", zlib.crc32(body)))

    index_size = sum(2 + len(t.encode("utf-8")) + 8 for t in ids)
    offset = len(STORE_MAGIC) + 8 + index_size
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<II", d_llm, len(ids)))
        for trial_id, payload in zip(ids, payloads):
            raw = trial_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", offset))
            offset += len(payload)
        for payload in payloads:
            fh.write(payload)


def validate_store(path) -> tuple[int, list[str]]:
    """Check the header and index; returns (d_llm, trial ids)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(STORE_MAGIC))
        if magic != STORE_MAGIC:
            raise StoreFormatError(f"{path}: bad magic {magic!r}")
        d_llm, count = struct.unpack("<II", fh.read(8))
        ids = []
        prev = -1
        for _ in range(count):
            (id_len,) = struct.unpack("<H", fh.read(2))
            trial_id = fh.read(id_len).decode("utf-8")
            (offset,) = struct.unpack("<Q", fh.read(8))
            if offset <= prev:
                raise StoreFormatError(
                    f"{path}: offsets not strictly increasing at {trial_id!r}"
                )
            prev = offset
            ids.append(trial_id)
    return d_llm, ids
