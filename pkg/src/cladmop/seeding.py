"""Deterministic RNG streams derived from a master seed and string tags.

Tags are hashed with SHA-256 so the streams are stable across runs,
platforms and Python processes (unlike the salted builtin ``hash``).
"""

from __future__ import annotations

import hashlib

import numpy as np


def seeded_rng(*parts) -> np.random.Generator:
    """Independent generator keyed by the given seed/tag parts."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))
