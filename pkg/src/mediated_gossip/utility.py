"""Realized per-stage utilities, discounting and average utility."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

from .cipher import keystream, retrievable
from .core import SOURCE, Dissemination, SimConfig, message_bits


def rec_set(trace, stage: int, node: int) -> set:
    """Events (id, event bits) that `node` retrieved in a stage.

    A tuple counts if it carries the genuine event of this stage, the node
    knows every key on it and its own key is not among them, and the node had
    not itself sent bitwise the same tuple in an earlier round.
    """
    rec = trace.stage(stage)
    cfg = trace.cfg
    known = {k for owner, k in rec.keys.items() if owner != node}
    first_sent = {}
    for rnd, i, _, m in rec.messages:
        if i == node and type(m) is Dissemination:
            for ell, p in m.tuples:
                key = (ell, p.bits)
                if key not in first_sent:
                    first_sent[key] = rnd
    out = set()
    got = set()
    for rnd, _, j, m in rec.messages:
        if j != node or type(m) is not Dissemination:
            continue
        for ell, p in m.tuples:
            if ell in got:
                continue
            meta = p.meta
            if meta.origin != SOURCE or meta.stage != stage or meta.event_id != ell:
                continue
            if meta.key_parity and not retrievable(meta, known, node):
                continue
            if first_sent.get((ell, p.bits), rnd) < rnd:
                continue
            got.add(ell)
            bits = p.bits
            for k in meta.key_parity:  # decipher with the known keys
                bits ^= keystream(k, cfg.payload_bits)
            out.add((ell, bits))
    return out


def bits_sent(trace, stage: int, node: int, monitoring_only: bool = False) -> int:
    cfg = trace.cfg
    total = 0
    for rnd, i, _, m in trace.stage(stage).messages:
        if i == node and (not monitoring_only or rnd <= cfg.r_mon):
            total += message_bits(m, cfg)
    return total


def stage_utility(trace, stage: int, node: int, cfg: SimConfig | None = None) -> Fraction:
    """(beta * |rec| - alpha * bits sent) / rho, exactly."""
    cfg = cfg or trace.cfg
    benefit = len(rec_set(trace, stage, node))
    return (cfg.beta * benefit - cfg.alpha * bits_sent(trace, stage, node)) / cfg.rho


def discounted(utilities, delta_disc, tail_value=None):
    """sum_t delta^t u_t plus delta^T * tail / (1 - delta).

    tail_value stands for the per-stage value after the recorded stages; when
    omitted the mean of the recorded utilities is used (stationary play).
    """
    delta = Fraction(delta_disc) if not isinstance(delta_disc, float) else delta_disc
    if not 0 < delta < 1:
        raise ValueError("discount factor must lie in (0, 1)")
    utilities = list(utilities)
    if tail_value is None:
        tail_value = sum(utilities) / len(utilities) if utilities else 0
    total = 0
    w = 1
    for u in utilities:
        total += w * u
        w *= delta
    return total + w * tail_value / (1 - delta)


@dataclass
class UtilityRow:
    node: int
    stage: int
    benefit_events: int
    bits_sent: int
    realized_u: Fraction


def utility_report(trace) -> list:
    cfg = trace.cfg
    rows = []
    for s in trace.stages:
        for i in range(cfg.n):
            b = len(rec_set(trace, s.stage, i))
            bits = bits_sent(trace, s.stage, i)
            rows.append(UtilityRow(i, s.stage, b, bits, (cfg.beta * b - cfg.alpha * bits) / cfg.rho))
    return rows


def average_utility(rows, node: int, delta_disc) -> Fraction:
    """(1 - delta) * discounted utility of one node over the report's stages."""
    us = [r.realized_u for r in sorted(rows, key=lambda r: r.stage) if r.node == node]
    return (1 - Fraction(delta_disc)) * discounted(us, delta_disc)


def write_report(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "stage", "benefit_events", "bits_sent", "realized_u"])
        for r in rows:
            w.writerow([r.node, r.stage, r.benefit_events, r.bits_sent, f"{float(r.realized_u):.9g}"])
