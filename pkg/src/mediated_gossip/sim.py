"""Synchronous round engine with deviation injection and trace recording."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Optional, Union

from . import rng
from .core import (
    RECEIVED,
    SENT,
    SOURCE,
    Accusation,
    Dissemination,
    Padding,
    Payload,
    PayloadMeta,
    Report,
    SimConfig,
    message_bits,
    validate_config,
)
from .protocol import (
    BAD,
    GOOD,
    MediatorState,
    NodeState,
    cipher_payload,
    mediator_absorb,
    mediator_emit,
    node_absorb,
    node_emit,
    report_messages,
    source_step,
    valid_dissemination,
)
from .subset_prng import _expand


class PlanError(ValueError):
    pass


# --- deviation kinds -------------------------------------------------------------------
#
# Each kind rewrites the node's conformant outbox for one round.  rewrite()
# returns None when the deviation has nothing to act on in that round, which
# lets plans with round=None wait for their first opportunity.


def _dissem_map(outbox: list) -> tuple[dict, list]:
    per, other = {}, []
    for j, m in outbox:
        if type(m) is Dissemination:
            per.setdefault(j, []).extend(m.tuples)
        else:
            other.append((j, m))
    return per, other


def _rebuild(per: dict, other: list) -> list:
    return other + [(j, Dissemination(tuple(per[j]))) for j in sorted(per) if per[j]]


def _is_dissem(rnd, cfg):
    return rnd > cfg.r_mon


def _is_report(rnd, cfg):
    return 1 < rnd < cfg.r_mon and rnd % 2 == 1


@dataclass(frozen=True)
class DropForward:
    """Skip forwarding one id, the due ids of one sequence, or (both None) everything due."""

    id: Optional[int] = None
    seq: Optional[int] = None

    def _hit(self, ell, cfg):
        if self.id is not None:
            return ell == self.id
        if self.seq is not None:
            return (ell - 1) // cfg.per_seq + 1 == self.seq
        return True

    def rewrite(self, outbox, st, rnd, cfg, stage):
        if not _is_dissem(rnd, cfg):
            return None
        per, other = _dissem_map(outbox)
        hit = False
        for j in per:
            kept = [t for t in per[j] if not self._hit(t[0], cfg)]
            hit |= len(kept) != len(per[j])
            per[j] = kept
        return _rebuild(per, other) if hit else None


@dataclass(frozen=True)
class WrongSubset:
    """Forward one due id (or the first due id of a sequence) to a different subset."""

    id: Optional[int] = None
    seq: Optional[int] = None
    replacement: Optional[tuple] = None

    def rewrite(self, outbox, st, rnd, cfg, stage):
        if not _is_dissem(rnd, cfg):
            return None
        per, other = _dissem_map(outbox)
        due = sorted({t[0] for ts in per.values() for t in ts})
        if self.id is not None:
            due = [e for e in due if e == self.id]
        elif self.seq is not None:
            due = [e for e in due if (e - 1) // cfg.per_seq + 1 == self.seq]
        if not due:
            return None
        ell = due[0]
        expected = tuple(j for j in sorted(per) if any(t[0] == ell for t in per[j]))
        target = self.replacement
        if target is None:
            universe = [k for k in range(cfg.n) if k != st.node]
            target = next(c for c in combinations(universe, len(expected)) if c != expected)
        base = st.pend[ell]
        for j in per:
            per[j] = [t for t in per[j] if t[0] != ell]
        for j in target:
            p = cipher_payload(st.known_keys[j], base, cfg) if j in st.accusations_held else base
            per.setdefault(j, []).append((ell, p))
        return _rebuild(per, other)


@dataclass(frozen=True)
class PrematureSend:
    """Send an id the node has not received, with fabricated data (default: the id introduced this round)."""

    id: Optional[int] = None
    payload: Optional[int] = None
    recipients: Optional[tuple] = None

    def rewrite(self, outbox, st, rnd, cfg, stage):
        if not _is_dissem(rnd, cfg):
            return None
        ell = self.id if self.id is not None else rnd - cfg.r_mon
        if not 1 <= ell <= cfg.rho or ell in st.first_rx:
            return None
        bits = self.payload
        if bits is None:
            bits = rng.derive(cfg.master_seed, "forge", stage, st.node, ell, bits=max(cfg.payload_bits, 1))
            bits &= (1 << cfg.payload_bits) - 1
        forged = Payload(bits, PayloadMeta(ell, stage, origin=st.node))
        to = self.recipients or _expand(st.own_seed.bits, ell, st.node, cfg.n, cfg.f)
        per, other = _dissem_map(outbox)
        for j in to:
            lst = per.setdefault(j, [])
            if all(t[0] != ell for t in lst):
                lst.append((ell, forged))
        return _rebuild(per, other)


@dataclass(frozen=True)
class InvalidMessage:
    """Send a message that breaks the validity rules of the current round.

    shape: "expired" (id outside its age window) or "duplicate" (same id twice)
    in dissemination rounds; "padding" (a stray padding message to the
    mediator) in monitoring rounds.  "auto" picks by round type.
    """

    shape: str = "auto"
    recipient: Optional[int] = None

    def rewrite(self, outbox, st, rnd, cfg, stage):
        shape = self.shape
        if shape == "auto":
            shape = "expired" if _is_dissem(rnd, cfg) else "padding"
        if shape == "padding":
            if _is_dissem(rnd, cfg):
                raise PlanError("padding shape only applies to monitoring rounds")
            return list(outbox) + [(SOURCE, Padding(1))]
        if not _is_dissem(rnd, cfg):
            raise PlanError(f"shape {shape!r} only applies to dissemination rounds")
        to = self.recipient
        if to is None:
            to = min(j for j in range(1, cfg.n) if j != st.node)
        per, other = _dissem_map(outbox)
        lst = per.setdefault(to, [])
        junk = Payload(0, PayloadMeta(1, stage, origin=st.node))
        if shape == "expired":
            ell = rnd - cfg.r_mon + 1  # age 0: not introduced yet
            if ell > cfg.rho:
                ell = 1
            lst.append((ell, junk))
        elif shape == "duplicate":
            if lst:
                lst.append(lst[0])
            else:
                ell = max(1, min(cfg.rho, rnd - cfg.r_mon))
                junk = Payload(0, PayloadMeta(ell, stage, origin=st.node))
                lst.extend([(ell, junk), (ell, junk)])
        else:
            raise PlanError(f"unknown shape {shape!r}")
        return _rebuild(per, other)


@dataclass(frozen=True)
class WithholdAccusation:
    """In round 1, replace the accusation against target (None: every accusation) by padding."""

    target: Optional[int] = None

    def rewrite(self, outbox, st, rnd, cfg, stage):
        if rnd != 1:
            return None
        out, hit = [], False
        for j, m in outbox:
            if type(m) is Accusation and (self.target is None or m.target == self.target):
                out.append((j, Padding(cfg.acc_bits)))
                hit = True
            else:
                out.append((j, m))
        return out if hit else None


def _matches(req, target, seq):
    return (target is None or req[0] == target) and (seq is None or req[1] == seq)


@dataclass(frozen=True)
class WithholdReport:
    """Skip a requested report (None fields: every report due that round)."""

    target: Optional[int] = None
    seq: Optional[int] = None

    def rewrite(self, outbox, st, rnd, cfg, stage):
        if not _is_report(rnd, cfg) or not st.requests:
            return None
        keep = [r for r in st.requests if not _matches(r, self.target, self.seq)]
        if len(keep) == len(st.requests):
            return None
        return report_messages(st, keep, cfg) if st.good else []


@dataclass(frozen=True)
class FalsifyReport:
    """Lie in a requested report while keeping it well-formed.

    edit "incriminate" claims the node forwarded every id of the sequence to
    the subject in the first dissemination round and received none of them
    from it, which would convict the reporter itself if its words counted.
    "empty" reports nothing; "shift" moves every round by one.
    """

    target: Optional[int] = None
    seq: Optional[int] = None
    edit: str = "incriminate"

    def rewrite(self, outbox, st, rnd, cfg, stage):
        if not _is_report(rnd, cfg) or not st.requests or not st.good:
            return None
        hit = [r for r in st.requests if _matches(r, self.target, self.seq)]
        if not hit:
            return None
        out = report_messages(st, [r for r in st.requests if r not in hit], cfg)
        for subject, seq in hit:
            honest = report_messages(st, [(subject, seq)], cfg)
            rx = next(m.entries for _, m in honest if type(m) is Report and m.direction == RECEIVED)
            tx = next(m.entries for _, m in honest if type(m) is Report and m.direction == SENT)
            if self.edit == "incriminate":
                rx, tx = (), tuple((i, cfg.r_mon + 1) for i in cfg.seq_ids(seq))
            elif self.edit == "empty":
                rx, tx = (), ()
            elif self.edit == "shift":
                rx = tuple((i, min(r + 1, cfg.rounds)) for i, r in rx)
                tx = tuple((i, min(r + 1, cfg.rounds)) for i, r in tx)
            else:
                raise PlanError(f"unknown edit {self.edit!r}")
            out.append((SOURCE, Report(subject, RECEIVED, rx)))
            out.append((SOURCE, Report(subject, SENT, tx)))
            pad = cfg.report_bits - 2 * cfg.log_rho * (len(rx) + len(tx))
            if pad:
                out.append((SOURCE, Padding(pad)))
        return out


DeviationKind = Union[
    DropForward, WrongSubset, PrematureSend, InvalidMessage, WithholdAccusation, WithholdReport, FalsifyReport
]

KIND_NAMES = {
    "DropForward": DropForward,
    "WrongSubset": WrongSubset,
    "PrematureSend": PrematureSend,
    "InvalidMessage": InvalidMessage,
    "WithholdAccusation": WithholdAccusation,
    "WithholdReport": WithholdReport,
    "FalsifyReport": FalsifyReport,
}


@dataclass(frozen=True)
class DeviationPlan:
    """One-shot local deviation: `node` replaces its outbox once in `stage`.

    With round=None the deviation fires in the first round of the stage where
    its kind finds something to act on.
    """

    node: int
    stage: int
    round: Optional[int]
    kind: DeviationKind

    @property
    def kind_name(self) -> str:
        return type(self.kind).__name__


def check_plan(plan: DeviationPlan, cfg: SimConfig, stages: int):
    if not 1 <= plan.node < cfg.n:
        raise PlanError(f"plan node {plan.node} is not a non-source node (1..{cfg.n - 1})")
    if not 1 <= plan.stage <= stages:
        raise PlanError(f"plan stage {plan.stage} outside 1..{stages}")
    if plan.round is not None and not 1 <= plan.round <= cfg.rounds:
        raise PlanError(f"plan round {plan.round} outside 1..{cfg.rounds}")
    if not isinstance(plan.kind, tuple(KIND_NAMES.values())):
        raise PlanError(f"unknown deviation kind {plan.kind!r}")


# --- traces --------------------------------------------------------------------------------


@dataclass
class StageRecord:
    stage: int
    messages: list = field(default_factory=list)  # (round, sender, recipient, message)
    verdicts: frozenset = frozenset()
    monitored: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    deviations: list = field(default_factory=list)  # (plan, round applied)
    end_self_bad: frozenset = frozenset()  # nodes with stat[self] = Bad at stage end
    end_miss: dict = field(default_factory=dict)  # node -> frozenset of sequences
    snapshots: list = field(default_factory=list)  # filled when recording detail

    def copy(self) -> "StageRecord":
        return StageRecord(
            self.stage, list(self.messages), self.verdicts, dict(self.monitored), dict(self.keys),
            dict(self.seeds), list(self.deviations), self.end_self_bad, dict(self.end_miss),
            list(self.snapshots),
        )


@dataclass(frozen=True)
class Snapshot:
    """Per node state digest at the end of a round."""

    round: int
    node: int
    self_good: bool
    bad_peers: frozenset
    miss: frozenset
    pend: tuple  # (id, owners of key_parity, origin)


@dataclass
class Trace:
    cfg: SimConfig
    stages: list = field(default_factory=list)

    def stage(self, t: int) -> StageRecord:
        return self.stages[t - 1]

    def verdicts(self) -> list:
        return [s.verdicts for s in self.stages]

    def summary_rows(self) -> list:
        rows = []
        for s in self.stages:
            bits = [0] * self.cfg.n
            for _, i, _, m in s.messages:
                bits[i] += message_bits(m, self.cfg)
            rows.append({
                "stage": s.stage,
                "messages": len(s.messages),
                "verdicts": sorted(s.verdicts),
                "monitored": sorted(k for k, v in s.monitored.items() if v),
                "bits_sent": bits,
                "deviations": [(p.node, p.kind_name, r) for p, r in s.deviations],
            })
        return rows

    def records(self):
        """Line records: one per message, then one summary per stage."""
        cfg = self.cfg
        for s, summary in zip(self.stages, self.summary_rows()):
            for rnd, i, j, m in s.messages:
                ids = []
                parity = []
                if type(m) is Dissemination:
                    ids = [t[0] for t in m.tuples]
                    parity = [sorted(t[1].meta.parity_owners()) for t in m.tuples]
                elif type(m) is Report:
                    ids = [e[0] for e in m.entries]
                yield {
                    "type": "msg", "stage": s.stage, "round": rnd, "sender": i, "recipient": j,
                    "kind": type(m).__name__, "bits": message_bits(m, cfg), "ids": ids, "key_parity": parity,
                }
            yield {"type": "stage", **summary}

    def export(self, path):
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# --- the engine -----------------------------------------------------------------------------


class Simulation:
    """Step-by-step runner; clone() gives an independent copy for forking."""

    def __init__(self, cfg: SimConfig, stages: int, plans: Iterable[DeviationPlan] = (), detail: bool = False):
        v = validate_config(cfg)
        if not v.ok:
            raise ValueError("invalid config: " + "; ".join(v.errors))
        self.cfg = cfg
        self.total = stages
        self.plans = []
        self.by_stage = {}  # stage -> indices into self.plans
        for p in plans:
            check_plan(p, cfg, stages)
            self.add_plan(p)
        self.fired = set()  # indices into self.plans
        self.detail = detail
        self.nodes = [NodeState(i, cfg.n) for i in range(cfg.n)]
        self.med = MediatorState()
        self.trace = Trace(cfg)
        self.stage, self.rnd = 1, 1  # next round to execute

    def add_plan(self, plan: DeviationPlan) -> int:
        self.plans.append(plan)
        self.by_stage.setdefault(plan.stage, []).append(len(self.plans) - 1)
        return len(self.plans) - 1

    @property
    def done(self) -> bool:
        return self.stage > self.total

    def clone(self) -> "Simulation":
        c = Simulation.__new__(Simulation)
        c.cfg, c.total, c.detail = self.cfg, self.total, self.detail
        c.plans = list(self.plans)
        c.by_stage = {t: list(ks) for t, ks in self.by_stage.items()}
        c.fired = set(self.fired)
        c.nodes = [s.clone() for s in self.nodes]
        c.med = self.med.clone()
        c.trace = Trace(self.cfg, self.trace.stages[:-1] + [self.trace.stages[-1].copy()] if self.trace.stages else [])
        c.stage, c.rnd = self.stage, self.rnd
        return c

    def would_fire(self, plan: DeviationPlan) -> bool:
        """Would plan act if it were active in the next round?"""
        if plan.stage != self.stage or (plan.round is not None and plan.round != self.rnd):
            return False
        if plan.round is not None:
            return True
        st = self.nodes[plan.node]
        return plan.kind.rewrite(node_emit(st, self.rnd, self.cfg), st, self.rnd, self.cfg, self.stage) is not None

    def step(self):
        cfg, rnd, stage, nodes = self.cfg, self.rnd, self.stage, self.nodes
        n = cfg.n
        if rnd == 1:
            self.trace.stages.append(StageRecord(stage))
        rec = self.trace.stages[-1]
        outs = [node_emit(nodes[i], rnd, cfg) for i in range(n)]
        for k in self.by_stage.get(stage, ()):
            plan = self.plans[k]
            if k in self.fired or (plan.round is not None and plan.round != rnd):
                continue
            st = nodes[plan.node]
            new = plan.kind.rewrite(outs[plan.node], st, rnd, cfg, stage)
            if new is None and plan.round is None:
                continue
            if new is not None:
                outs[plan.node] = new
            self.fired.add(k)
            rec.deviations.append((plan, rnd))
        med_out = mediator_emit(self.med, rnd, cfg, nodes[0], stage)
        inbox = [[] for _ in range(n)]
        msgs = rec.messages
        for i in range(n):
            for j, m in outs[i]:
                inbox[j].append((i, m))
                msgs.append((rnd, i, j, m))
        for j, m in med_out:
            inbox[j].append((SOURCE, m))
            msgs.append((rnd, SOURCE, j, m))
        validity = None
        if rnd > cfg.r_mon:
            # each message is checked once, for its sender and its recipient
            validity = {id(m): valid_dissemination(m, rnd, cfg) for out in outs for _, m in out}
        for i in range(n):
            node_absorb(nodes[i], rnd, inbox[i], outs[i], cfg, stage, validity)
        if rnd <= cfg.r_mon:
            mediator_absorb(self.med, rnd, inbox[0], cfg, nodes[0])
        if rnd == cfg.r_mon:
            rec.verdicts = self.med.verdicts
            rec.monitored = dict(self.med.monitored)
            rec.keys = dict(self.med.issued_keys)
            rec.seeds = dict(self.med.issued_seeds)
        if cfg.r_mon <= rnd < cfg.r_mon + cfg.rho:
            source_step(nodes[0], rnd + 1, cfg, stage)
        if self.detail:
            for st in nodes:
                rec.snapshots.append(Snapshot(
                    rnd, st.node, st.stat[st.node] == GOOD,
                    frozenset(j for j, s in st.stat.items() if s == BAD and j != st.node),
                    frozenset(st.miss),
                    tuple((ell, p.meta.parity_owners(), p.meta.origin) for ell, p in sorted(st.pend.items())),
                ))
        if rnd == cfg.rounds:
            rec.end_self_bad = frozenset(st.node for st in nodes if st.stat[st.node] == BAD)
            rec.end_miss = {st.node: frozenset(st.miss) for st in nodes}
            self.stage, self.rnd = stage + 1, 1
        else:
            self.rnd = rnd + 1

    def run_until(self, stage: int, rnd: int = 1):
        while not self.done and (self.stage, self.rnd) < (stage, rnd):
            self.step()

    def finish(self) -> Trace:
        while not self.done:
            self.step()
        return self.trace


def run(cfg: SimConfig, stages: int, plan: DeviationPlan | None = None, history: Iterable[DeviationPlan] = (),
        detail: bool = False) -> Trace:
    """Execute `stages` full stages, optionally with deviation plans."""
    plans = list(history) + ([plan] if plan is not None else [])
    return Simulation(cfg, stages, plans, detail).finish()


def _future_key(sim: Simulation) -> tuple:
    """Everything that can influence a run after the verdict round of the current stage.

    At that point re/se/first_rx are still empty for the stage, last stage's
    records have already been reported, and the mediator's collected reports
    are discarded at the next stage start.
    """
    nodes = tuple(
        (tuple(st.stat.values()), frozenset(st.miss), tuple(st.pend.items()), st.accusations_held,
         tuple(sorted(st.known_keys.items())), st.own_seed, tuple(st.requests), tuple(st.fresh))
        for st in sim.nodes
    )
    med = sim.med
    return nodes, med.verdicts, tuple(sorted(med.issued_keys.items())), tuple(sorted(med.issued_seeds.items()))


def run_forks(cfg: SimConfig, stages: int, plans: list, history: Iterable[DeviationPlan] = (),
              detail: bool = False) -> tuple[Trace, list]:
    """One conformant trace plus one deviating trace per plan, sharing common randomness.

    Every deviating run is forked from the conformant run just before the
    round where its plan fires, so the prefix is computed once.  When a fork
    reaches a verdict round in exactly the conformant run's state, the rest
    of its trace is taken from the conformant run instead of recomputed.
    """
    history = list(history)
    for p in plans:
        check_plan(p, cfg, stages)
    base = Simulation(cfg, stages, history, detail)
    children = [None] * len(plans)
    checkpoints = {}  # stage -> (future key, fired history plans, message index after the verdict round)
    while not base.done:
        for k, p in enumerate(plans):
            if children[k] is None and base.would_fire(p):
                child = base.clone()
                child.add_plan(p)
                children[k] = child
        stage, rnd = base.stage, base.rnd
        base.step()
        if rnd == cfg.r_mon and not detail:
            checkpoints[stage] = (_future_key(base), frozenset(base.fired), len(base.trace.stage(stage).messages))
    out = []
    for k, child in enumerate(children):
        if child is None:
            out.append(base.trace)  # the plan never found anything to act on
            continue
        me = len(child.plans) - 1
        while not child.done:
            stage, rnd = child.stage, child.rnd
            child.step()
            if rnd != cfg.r_mon or me not in child.fired or stage not in checkpoints:
                continue
            key, fired, cut = checkpoints[stage]
            if child.fired - {me} != fired or _future_key(child) != key:
                continue
            src = base.trace.stage(stage)
            rec = child.trace.stages[-1]
            rec.messages.extend(src.messages[cut:])
            rec.end_self_bad, rec.end_miss = src.end_self_bad, src.end_miss
            child.trace.stages.extend(base.trace.stages[stage:])
            break
        out.append(child.trace)
    return base.trace, out


def paired_run(cfg: SimConfig, stages: int, plan: DeviationPlan, history: Iterable[DeviationPlan] = (),
               detail: bool = False) -> tuple[Trace, Trace]:
    conform, (deviate,) = run_forks(cfg, stages, [plan], history, detail)
    return conform, deviate
