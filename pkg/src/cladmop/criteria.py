"""Frozen criteria encoder: toy stand-in and precomputed embedding stores.

The trainable branch only ever sees a :class:`MultiLevelCriteriaEmbedding`:
four equal-shaped token matrices (coarse/medium/fine/last). Whether they
come from the deterministic toy encoder or from a store file produced by an
offline extractor is invisible downstream, and none of the tensors carry
gradients.

Store file layout (little-endian throughout):

* header: magic ``CLDMEMB1`` (8 bytes), d_llm (u32), record count (u32)
* index: per record, id length (u16), UTF-8 id, absolute offset (u64);
  entries sorted by id, offsets strictly increasing
* record: n_c (u32), then the four level matrices as float32 row-major
  (each n_c x d_llm) in coarse/medium/fine/last order, then CRC32 (u32)
  of everything from n_c through the last matrix byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, constant
from .seeding import seeded_rng

STORE_MAGIC = b"CLDMEMB1"
LEVELS = ("coarse", "medium", "fine", "last")
TOY_D_LLM = 32
MAX_CRITERIA_TOKENS = 512


class StoreLookupError(KeyError):
    pass


class StoreCorruptionError(RuntimeError):
    pass


@dataclass
class MultiLevelCriteriaEmbedding:
    coarse: Tensor
    medium: Tensor
    fine: Tensor
    last: Tensor

    def __post_init__(self):
        shapes = {level: getattr(self, level).shape for level in LEVELS}
        if len(set(shapes.values())) != 1:
            raise ValueError(f"levels must share one shape, got {shapes}")
        if self.coarse.shape[0] < 1:
            raise ValueError("criteria embedding must hold at least one token")

    @property
    def n_c(self) -> int:
        return self.coarse.shape[0]

    @property
    def d_llm(self) -> int:
        return self.coarse.shape[1]

    def level(self, name: str) -> Tensor:
        return getattr(self, name)


def toy_encode(text: str, seed: int, d_llm: int = TOY_D_LLM,
               max_tokens: int = MAX_CRITERIA_TOKENS) -> MultiLevelCriteriaEmbedding:
    """Deterministic stand-in for the frozen encoder.

    Whitespace tokens map to seeded N(0,1) rows; the four levels differ only
    through a level salt, so changing one word changes exactly that token's
    rows at every level.
    """
    tokens = text.split()
    if not tokens:
        raise ValueError("empty criteria text")
    tokens = tokens[:max_tokens]
    levels = {}
    for level in LEVELS:
        rows = [
            seeded_rng(seed, "criteria-toy", level, tok)
            .standard_normal(d_llm)
            .astype(np.float32)
            for tok in tokens
        ]
        levels[level] = constant(np.stack(rows))
    return MultiLevelCriteriaEmbedding(**levels)


def write_store(path, d_llm: int,
                records: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
                ) -> None:
    """Serialize per-trial level matrices into the store format."""
    ids = sorted(records)
    payloads: list[bytes] = []
    for trial_id in ids:
        mats = records[trial_id]
        if len(mats) != len(LEVELS):
            raise ValueError(f"{trial_id}: expected {len(LEVELS)} level matrices")
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


class EmbeddingStore:
    """Read-only view over a store file; safe for concurrent readers."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "rb")
        try:
            self._read_header()
        except Exception:
            self._fh.close()
            raise

    def _read_header(self):
        magic = self._fh.read(len(STORE_MAGIC))
        if magic != STORE_MAGIC:
            raise StoreCorruptionError(
                f"{self.path}: bad magic {magic!r}, expected {STORE_MAGIC!r}"
            )
        d_llm, count = struct.unpack("<II", self._fh.read(8))
        self.d_llm = d_llm
        self.index: dict[str, int] = {}
        prev = -1
        for _ in range(count):
            (id_len,) = struct.unpack("<H", self._fh.read(2))
            trial_id = self._fh.read(id_len).decode("utf-8")
            (offset,) = struct.unpack("<Q", self._fh.read(8))
            if offset <= prev:
                raise StoreCorruptionError(
                    f"{self.path}: offsets not strictly increasing at {trial_id!r}"
                )
            prev = offset
            self.index[trial_id] = offset

    @property
    def ids(self) -> list[str]:
        return sorted(self.index)

    def load(self, trial_id: str) -> MultiLevelCriteriaEmbedding:
        offset = self.index.get(trial_id)
        if offset is None:
            raise StoreLookupError(f"trial id {trial_id!r} not in store {self.path}")
        self._fh.seek(offset)
        n_c_bytes = self._fh.read(4)
        (n_c,) = struct.unpack("<I", n_c_bytes)
        mat_bytes = self._fh.read(4 * len(LEVELS) * n_c * self.d_llm)
        (crc,) = struct.unpack("<I", self._fh.read(4))
        if zlib.crc32(n_c_bytes + mat_bytes) != crc:
            raise StoreCorruptionError(
                f"{self.path}: checksum mismatch for record {trial_id!r}"
            )
        per_level = 4 * n_c * self.d_llm
        levels = {}
        for i, level in enumerate(LEVELS):
            chunk = mat_bytes[i * per_level : (i + 1) * per_level]
            mat = np.frombuffer(chunk, dtype="<f4").reshape(n_c, self.d_llm)
            levels[level] = constant(mat.copy())
        return MultiLevelCriteriaEmbedding(**levels)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ToyCriteriaEncoder:
    """Encoder interface over :func:`toy_encode`, keyed by trial text."""

    def __init__(self, seed: int, d_llm: int = TOY_D_LLM,
                 max_tokens: int = MAX_CRITERIA_TOKENS):
        self.seed = seed
        self.d_llm = d_llm
        self.max_tokens = max_tokens

    def encode(self, trial) -> MultiLevelCriteriaEmbedding:
        return toy_encode(trial.criteria_text, self.seed, self.d_llm, self.max_tokens)


class StoreCriteriaEncoder:
    """Encoder interface over a precomputed store, keyed by trial id."""

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.d_llm = store.d_llm

    def encode(self, trial) -> MultiLevelCriteriaEmbedding:
        return self.store.load(trial.nct_id)


class CachingEncoder:
    """Memoizes another encoder by trial id; the backing encoders are pure."""

    def __init__(self, inner):
        self.inner = inner
        self.d_llm = inner.d_llm
        self._cache: dict[str, MultiLevelCriteriaEmbedding] = {}

    def encode(self, trial) -> MultiLevelCriteriaEmbedding:
        hit = self._cache.get(trial.nct_id)
        if hit is None:
            hit = self.inner.encode(trial)
            self._cache[trial.nct_id] = hit
        return hit
