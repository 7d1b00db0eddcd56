"""Deterministic derivation of named random substreams.

Every source of randomness in a run flows from one master seed through a
named substream, so adding a stream never perturbs existing ones and
work items can pre-derive their own generators (counter-based, safe to
evaluate in any order).
"""

from __future__ import annotations

import zlib

import numpy as np

_U32 = 1 << 32


def _key_part(part: int | str) -> int:
    if isinstance(part, bool):
        raise TypeError("stream path parts must be int or str, not bool")
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if not 0 <= value < _U32:
            raise ValueError(f"integer stream part out of range [0, 2**32): {part}")
        return value
    raise TypeError(f"stream path parts must be int or str, got {part!r}")


def substream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the substream of ``master_seed`` named by ``path``."""
    key = tuple(_key_part(part) for part in path)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))
