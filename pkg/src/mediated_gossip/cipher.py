"""Commutative, self-inverse XOR stream cipher used for punishments.

The bit-level part XORs a payload with a keystream expanded from the key.
The symbolic part tracks which keys a payload carries an odd number of times,
which is all the utility model needs to decide whether a receiver can
recover the original event.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

from .core import KEY_BITS, Key, PayloadMeta
from . import rng


@lru_cache(maxsize=1 << 14)
def _stream(key_bits: int, len_bits: int) -> int:
    if len_bits == 0:
        return 0
    nbytes = (len_bits + 7) // 8
    kb = key_bits.to_bytes(KEY_BITS // 8, "big")
    out = bytearray()
    counter = 0
    while len(out) < nbytes:
        out += hashlib.blake2b(counter.to_bytes(8, "big"), key=kb, digest_size=64).digest()
        counter += 1
    return int.from_bytes(out[:nbytes], "big") >> (8 * nbytes - len_bits)


def keystream(key: Key, len_bits: int) -> int:
    """Deterministic len_bits-bit stream for a key, returned as an int."""
    if len_bits < 0:
        raise ValueError("len_bits must be non-negative")
    return _stream(key.bits, len_bits)


def apply(key: Key, payload: int, meta: PayloadMeta, len_bits: int) -> tuple[int, PayloadMeta]:
    """Cipher (or decipher, it is the same) a payload of len_bits bits."""
    if payload < 0 or payload >> len_bits:
        raise ValueError(f"payload does not fit in {len_bits} bits")
    parity = meta.key_parity ^ {key}
    new_meta = PayloadMeta(meta.event_id, meta.stage, meta.origin, parity)
    return payload ^ _stream(key.bits, len_bits), new_meta


def retrievable(meta: PayloadMeta, known_keys, owner: int) -> bool:
    """Can `owner` recover the base data from a payload with this metadata?"""
    for k in meta.key_parity:
        if k.owner == owner or k not in known_keys:
            return False
    return True


def fresh_keys(master_seed: int, stage: int, nodes) -> dict:
    """One key per node for a stage, pairwise distinct."""
    keys, seen = {}, set()
    for node in nodes:
        attempt = 0
        while True:
            bits = rng.derive(master_seed, "key", stage, node, attempt, bits=KEY_BITS)
            if bits not in seen:
                break
            attempt += 1
        seen.add(bits)
        keys[node] = Key(node, stage, bits)
    return keys
