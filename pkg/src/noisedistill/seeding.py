"""Deterministic RNG derivation.

Every random draw in the package descends from a root seed plus a path of
string/integer tags, so any stage or per-item stream can be reproduced in
isolation and results are independent of scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_rng", "stable_u32_words"]


def stable_u32_words(*parts: int | str) -> list[int]:
    """Hash a tag path to u32 words, stable across platforms and sessions."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed path parts must be int or str, got {type(part)!r}")
        token = f"i{part}" if isinstance(part, int) else f"s{part}"
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def derive_rng(*parts: int | str) -> np.random.Generator:
    """Return a Generator seeded from the given (seed, tag, index, ...) path."""
    if not parts:
        raise ValueError("at least one seed path part is required")
    return np.random.default_rng(np.random.SeedSequence(stable_u32_words(*parts)))
