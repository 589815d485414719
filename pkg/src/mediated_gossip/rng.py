"""Labeled random substreams derived from a master seed.

Every random quantity in a run is addressed by a label tuple such as
("payload", stage, event_id).  The value is a keyed hash of the label, so two
runs that share a master seed see the same number for the same label no
matter in which order, or whether, other labels were consumed.  This is what
lets paired runs share common random numbers.
"""

from __future__ import annotations

import hashlib
from fractions import Fraction

MASK64 = (1 << 64) - 1


def _label_bytes(labels: tuple) -> bytes:
    for item in labels:
        if not isinstance(item, (int, str)):
            raise TypeError(f"substream labels must be int or str, got {type(item).__name__}")
    return repr(labels).encode()


def derive(master_seed: int, *labels, bits: int = 64) -> int:
    """Return a uniform integer in [0, 2**bits) for the given label tuple."""
    if not 0 < bits <= 512:
        raise ValueError("bits must be in 1..512")
    nbytes = (bits + 7) // 8
    h = hashlib.blake2b(
        _label_bytes(labels),
        key=(master_seed & MASK64).to_bytes(8, "big"),
        digest_size=nbytes,
    )
    return int.from_bytes(h.digest(), "big") >> (8 * nbytes - bits)


def bernoulli(master_seed: int, p: Fraction, *labels) -> bool:
    """Exact-threshold coin with success probability p (up to 2**-64 rounding)."""
    p = Fraction(p)
    if p <= 0:
        return False
    if p >= 1:
        return True
    u = derive(master_seed, *labels, bits=64)
    return u * p.denominator < p.numerator << 64


def replicate_seed(master_seed: int, index: int, purpose: str = "replicate") -> int:
    """Master seed for the index-th independent replicate of an experiment."""
    return derive(master_seed, purpose, index, bits=64)
