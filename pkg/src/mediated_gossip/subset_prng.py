"""Per-node pseudo-random fanout subsets derived from a mediator-issued seed.

For event id l, a 128-bit word b is read from a keyed hash of (seed, l);
y = b mod C(n-1, f) indexes the y-th f-subset of the other nodes in
lexicographic order.  The mod bias is at most C(n-1, f) / 2**128.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from math import comb

from .core import Seed, SimConfig

WORD_BITS = 128


def unrank_subset(y: int, universe, f: int) -> tuple:
    """The y-th f-subset of `universe` (lexicographic in index order), as a sorted tuple."""
    universe = list(universe)
    N = len(universe)
    total = comb(N, f)
    if not 0 <= y < total:
        raise ValueError(f"rank {y} outside [0, {total})")
    out = []
    start = 0
    for k in range(f, 0, -1):
        for c in range(start, N):
            block = comb(N - c - 1, k - 1)
            if y < block:
                out.append(universe[c])
                start = c + 1
                break
            y -= block
    return tuple(out)


def rank_subset(subset, universe, f: int) -> int:
    """Inverse of unrank_subset."""
    universe = list(universe)
    idx = sorted(universe.index(x) for x in subset)
    if len(idx) != f or len(set(idx)) != f:
        raise ValueError("subset must have exactly f distinct members of the universe")
    N = len(universe)
    y, start = 0, 0
    for pos, i in enumerate(idx):
        k = f - pos
        for c in range(start, i):
            y += comb(N - c - 1, k - 1)
        start = i + 1
    return y


def word(seed_bits: int, event_id: int) -> int:
    h = hashlib.blake2b(event_id.to_bytes(8, "big"), key=seed_bits.to_bytes(8, "big"), digest_size=WORD_BITS // 8)
    return int.from_bytes(h.digest(), "big")


@lru_cache(maxsize=None)
def subset_table(n: int, f: int, me: int) -> tuple:
    """All f-subsets of the nodes other than `me`, indexed by rank."""
    universe = [k for k in range(n) if k != me]
    return tuple(unrank_subset(y, universe, f) for y in range(comb(n - 1, f)))


@lru_cache(maxsize=1 << 14)
def _expand(seed_bits: int, event_id: int, me: int, n: int, f: int) -> tuple:
    table = subset_table(n, f, me)
    return table[word(seed_bits, event_id) % len(table)]


def expand(seed: Seed, event_id: int, me: int, cfg: SimConfig) -> tuple:
    """Fanout subset of node `me` for event_id under its seed (sorted tuple of node ids)."""
    return _expand(seed.bits, event_id, me, cfg.n, cfg.f)


def mod_bias_bound(n: int, f: int) -> float:
    """Upper bound on |P(subset) - 1/x| caused by reducing a WORD_BITS word mod x."""
    return comb(n - 1, f) / 2**WORD_BITS
