"""Configuration, round arithmetic, wire messages and their bit sizes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from functools import cached_property
from fractions import Fraction
from typing import Union

SOURCE = 0  # node 0 is both the event source and the mediator

SENT = "sent"
RECEIVED = "received"


def ceil_log2(x: int) -> int:
    """Smallest L with 2**L >= x (0 for x <= 1)."""
    return (x - 1).bit_length() if x > 1 else 0


def as_fraction(x) -> Fraction:
    # floats go through their shortest repr so 0.95 becomes 19/20, not a binary expansion
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class SimConfig:
    """All protocol and economic parameters of one game instance.

    Fields left as None are derived in __post_init__: the default split pads
    rho up to a perfect square with m = S = sqrt(rho) and p_mon = 1/sqrt(rho),
    beta defaults to 10*gamma*f and r_dis to rho + delta_exp.
    """

    n: int = 6
    f: int = 2
    rho: int = 64
    delta_exp: int = 5
    n_seq: int | None = None
    per_seq: int | None = None
    p_mon: Fraction | None = None
    alpha: Fraction = Fraction(1)
    beta: Fraction | None = None
    payload_bits: int = 32
    delta_disc: Fraction = Fraction(19, 20)
    r_dis: int | None = None
    master_seed: int = 20240601
    live_events: int | None = None  # ids above this carry all-zero payloads (square padding)

    def __post_init__(self):
        put = lambda k, v: object.__setattr__(self, k, v)
        rho, S, m = self.rho, self.n_seq, self.per_seq
        if S is None and m is None:
            side = math.isqrt(max(rho, 1))
            if side * side < rho:
                side += 1
            if self.live_events is None and side * side != rho:
                put("live_events", rho)
            S = m = side
            rho = side * side
        elif S is None:
            S = -(-rho // m)
        elif m is None:
            m = -(-rho // S)
        put("rho", rho)
        put("n_seq", S)
        put("per_seq", m)
        if self.live_events is None:
            put("live_events", rho)
        put("alpha", as_fraction(self.alpha))
        put("delta_disc", as_fraction(self.delta_disc))
        if self.p_mon is None:
            root = math.isqrt(rho)
            p = Fraction(1, root) if root * root == rho else Fraction(1 / math.sqrt(rho)).limit_denominator(10**6)
            put("p_mon", p)
        else:
            put("p_mon", as_fraction(self.p_mon))
        if self.beta is None:
            put("beta", 10 * self.gamma * self.f)
        else:
            put("beta", as_fraction(self.beta))
        if self.r_dis is None:
            put("r_dis", rho + self.delta_exp)

    @cached_property
    def log_rho(self) -> int:
        return ceil_log2(self.rho)

    @cached_property
    def gamma(self) -> Fraction:
        """Cost of sending one dissemination tuple."""
        return self.alpha * (self.payload_bits + self.log_rho)

    @cached_property
    def r_mon(self) -> int:
        return 2 * self.n_seq + 2

    @cached_property
    def rounds(self) -> int:
        return self.r_mon + self.r_dis

    @cached_property
    def acc_bits(self) -> int:
        return ceil_log2(self.n) + 1

    @cached_property
    def report_bits(self) -> int:
        """Fixed size of everything a node sends about one subject in one report round."""
        return 2 * self.per_seq * 2 * self.log_rho

    def seq_ids(self, seq: int) -> range:
        return range((seq - 1) * self.per_seq + 1, seq * self.per_seq + 1)

    def with_(self, **changes) -> "SimConfig":
        """Copy with changes, re-deriving defaulted fields that depend on them."""
        base = {f.name: getattr(self, f.name) for f in fields(self)}
        if "rho" in changes:
            for k in ("n_seq", "per_seq", "p_mon", "r_dis", "live_events"):
                base[k] = None
        if "delta_exp" in changes and base["r_dis"] == self.rho + self.delta_exp:
            base["r_dis"] = None
        base.update(changes)
        return SimConfig(**base)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def seq_of(event_id: int, cfg: SimConfig) -> int:
    return -(-event_id // cfg.per_seq)


def age(event_id: int, rnd: int, cfg: SimConfig) -> int:
    """Age of an identifier in a stage-local round; valid iff 1 <= age <= delta_exp."""
    return rnd + 1 - (event_id + cfg.r_mon)


def is_valid_age(event_id: int, rnd: int, cfg: SimConfig) -> bool:
    return 1 <= rnd + 1 - (event_id + cfg.r_mon) <= cfg.delta_exp


# --- keys, seeds and payload metadata -------------------------------------------------


@dataclass(frozen=True, slots=True)
class Key:
    owner: int
    stage: int
    bits: int


@dataclass(frozen=True, slots=True)
class Seed:
    owner: int
    stage: int
    bits: int


@dataclass(frozen=True, slots=True)
class PayloadMeta:
    """Symbolic view of a payload: which event it started as and which keys it carries.

    origin is SOURCE for the genuine event and the forger's id for fabricated data.
    """

    event_id: int
    stage: int
    origin: int = SOURCE
    key_parity: frozenset = frozenset()

    @property
    def genuine(self) -> bool:
        return self.origin == SOURCE

    def parity_owners(self) -> frozenset:
        return frozenset(k.owner for k in self.key_parity)


@dataclass(frozen=True, slots=True)
class Payload:
    bits: int
    meta: PayloadMeta


# --- wire messages -------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Accusation:
    target: int


@dataclass(frozen=True, slots=True)
class MonitorRequest:
    target: int
    seq: int


@dataclass(frozen=True, slots=True)
class Report:
    subject: int
    direction: str  # SENT or RECEIVED, from the reporter's point of view
    entries: tuple = ()  # ((event_id, round), ...)


@dataclass(frozen=True, slots=True)
class Verdict:
    target: int


@dataclass(frozen=True, slots=True)
class KeyDelivery:
    target: int
    key: Key


@dataclass(frozen=True, slots=True)
class SeedDelivery:
    seed: Seed


@dataclass(frozen=True, slots=True)
class Dissemination:
    tuples: tuple = ()  # ((event_id, Payload), ...)

    def ids(self) -> list:
        return [t[0] for t in self.tuples]


@dataclass(frozen=True, slots=True)
class Padding:
    bits: int


Message = Union[Accusation, MonitorRequest, Report, Verdict, KeyDelivery, SeedDelivery, Dissemination, Padding]

KEY_BITS = 128
SEED_BITS = 64


class FramingError(ValueError):
    pass


def message_bits(msg: Message, cfg: SimConfig) -> int:
    """Exact wire size of a message in bits."""
    L = cfg.log_rho
    kind = type(msg)
    if kind is Dissemination:
        return len(msg.tuples) * (L + cfg.payload_bits)
    if kind is Padding:
        if msg.bits < 0:
            raise FramingError("negative padding")
        return msg.bits
    if kind is Report:
        ids = [e[0] for e in msg.entries]
        if len(set(ids)) != len(ids):
            raise FramingError("report lists an id twice")
        return 2 * L * len(msg.entries)
    if kind is Accusation:
        return cfg.acc_bits
    if kind is MonitorRequest:
        return ceil_log2(cfg.n) + ceil_log2(cfg.n_seq)
    if kind is Verdict:
        return ceil_log2(cfg.n)
    if kind is KeyDelivery:
        return ceil_log2(cfg.n) + KEY_BITS
    if kind is SeedDelivery:
        return SEED_BITS
    raise FramingError(f"unknown message kind {kind.__name__}")


# --- configuration checks --------------------------------------------------------------


@dataclass
class Validation:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_config(cfg: SimConfig) -> Validation:
    """Structural checks (errors) plus finite-size proxies of the asymptotic conditions (warnings)."""
    v = Validation()
    err = v.errors.append
    if cfg.n < 3:
        err(f"n={cfg.n}: need at least the source and two other nodes")
    if not 0 < cfg.f <= cfg.n - 2:
        err(f"f={cfg.f}: fanout must satisfy 0 < f <= n-2")
    if cfg.rho < 1:
        err("rho must be positive")
    if cfg.delta_exp < 1:
        err("delta_exp must be positive")
    if cfg.n_seq * cfg.per_seq != cfg.rho:
        err(f"n_seq*per_seq = {cfg.n_seq * cfg.per_seq} != rho = {cfg.rho}")
    if cfg.r_dis < cfg.rho + cfg.delta_exp:
        err(f"r_dis={cfg.r_dis} < rho+delta_exp={cfg.rho + cfg.delta_exp}")
    if not 0 <= cfg.p_mon <= 1:
        err("p_mon must lie in [0,1]")
    if not 0 <= cfg.delta_disc < 1:
        err("delta_disc must lie in [0,1)")
    if cfg.alpha < 0 or cfg.beta < 0:
        err("alpha and beta must be non-negative")
    if cfg.payload_bits < 0:
        err("payload_bits must be non-negative")
    if not 0 <= cfg.master_seed < 1 << 64:
        err("master_seed must be a 64-bit unsigned value")
    if v.errors:
        return v

    L, m, p, S = cfg.log_rho, cfg.per_seq, cfg.p_mon, cfg.n_seq
    c1 = Fraction(m * L, cfg.rho)
    if c1 > Fraction(1, 2):
        v.warnings.append(f"C1 proxy: m*log(rho)/rho = {float(c1):.3f} > 0.5")
    c2 = p * L
    if c2 > Fraction(1, 2):
        v.warnings.append(f"C2 proxy: p*log(rho) = {float(c2):.3f} > 0.5")
    if p * cfg.rho < m:
        v.warnings.append(f"C3 proxy: p*rho = {float(p * cfg.rho):.3f} < m = {m}")
    c4 = (1 - p) ** S
    if not Fraction(1, 10) <= c4 <= Fraction(9, 10):
        v.warnings.append(f"C4 proxy: (1-p)^S = {float(c4):.3f} outside [0.1, 0.9]")
    return v
