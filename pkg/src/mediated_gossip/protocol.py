"""Node and mediator state machines.

A round is processed in three steps by the engine: every entity emits its
outbox (node_emit / mediator_emit), all messages are delivered at once, then
every entity absorbs what it received together with what it actually sent
(node_absorb / mediator_absorb).  Passing the actual outbox back to the
sender is what lets a deviating node keep honest bookkeeping about itself.

Record maps (re, se and the mediator's assembled views) are dicts
peer -> {event_id: first round}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import cipher, rng
from .core import (
    RECEIVED,
    SENT,
    SOURCE,
    Accusation,
    Dissemination,
    KeyDelivery,
    MonitorRequest,
    Padding,
    Payload,
    PayloadMeta,
    Report,
    Seed,
    SeedDelivery,
    SimConfig,
    Verdict,
    age,
    message_bits,
)
from .subset_prng import _expand

GOOD = "Good"
BAD = "Bad"


# --- round classification ------------------------------------------------------------


def round_kind(rnd: int, cfg: SimConfig) -> str:
    if rnd == 1:
        return "accuse"
    if rnd < cfg.r_mon:
        return "request" if rnd % 2 == 0 else "report"
    if rnd == cfg.r_mon:
        return "verdict"
    return "dissem"


def report_round_seq(rnd: int) -> int:
    """Sequence whose reports are due in odd monitoring round rnd (requests went out in rnd-1)."""
    return (rnd - 1) // 2


# --- the inconsistency predicate ------------------------------------------------------


def inconsistent(ell: int, sent: dict, received: dict, expected, cfg: SimConfig) -> bool:
    """Does the (sent, received) record of one node show it mishandled identifier ell?

    sent/received map peer -> {event_id: first round}; expected is the node's
    fanout subset for ell.
    """
    for peer, recs in sent.items():
        if ell in recs and peer not in expected:
            return True  # sent to a node outside its subset
    first = None
    for recs in received.values():
        r = recs.get(ell)
        if r is not None and (first is None or r < first):
            first = r
    if first is not None:
        if 1 <= age(ell, first, cfg) <= cfg.delta_exp - 1:
            for peer in expected:
                recs = sent.get(peer)
                if recs is None or recs.get(ell) != first + 1:
                    return True  # failed to forward on time
        return False
    return any(ell in recs for recs in sent.values())  # sent before ever receiving


# --- message validity, shared by senders (self-check) and receivers ------------------------


def valid_dissemination(msg, rnd: int, cfg: SimConfig) -> bool:
    if type(msg) is not Dissemination:
        return False
    lo = rnd + 1 - cfg.r_mon - cfg.delta_exp  # smallest id with age <= delta_exp
    hi = rnd - cfg.r_mon  # largest id with age >= 1
    top = 1 << cfg.payload_bits
    seen = set()
    for ell, p in msg.tuples:
        if ell in seen or not lo <= ell <= hi or ell < 1 or ell > cfg.rho:
            return False
        if not 0 <= p.bits < top:
            return False
        seen.add(ell)
    return True


def valid_accusation_batch(msgs: list, sender: int, cfg: SimConfig) -> bool:
    """Round 1: one slot (accusation or padding of accusation size) per other node."""
    if len(msgs) != cfg.n - 1:
        return False
    targets = set()
    for m in msgs:
        if type(m) is Accusation:
            if m.target == sender or m.target in targets or not 0 <= m.target < cfg.n:
                return False
            targets.add(m.target)
        elif type(m) is Padding:
            if m.bits != cfg.acc_bits:
                return False
        else:
            return False
    return True


def valid_report_batch(msgs: list, requests: list, cfg: SimConfig) -> bool:
    """Odd monitoring round: exactly the requested reports, padded to a fixed size."""
    if not requests:
        return not msgs
    due = {}
    for subject, seq in requests:
        due[subject] = set(cfg.seq_ids(seq))
    got = set()
    total = 0
    for m in msgs:
        if type(m) is Report:
            if m.subject not in due or m.direction not in (SENT, RECEIVED) or (m.subject, m.direction) in got:
                return False
            got.add((m.subject, m.direction))
            ids = [e[0] for e in m.entries]
            if len(set(ids)) != len(ids) or not all(i in due[m.subject] for i in ids):
                return False
            if not all(1 <= e[1] <= cfg.rounds for e in m.entries):
                return False
        elif type(m) is not Padding or m.bits < 0:
            return False
        total += message_bits(m, cfg)
    return len(got) == 2 * len(due) and total == len(due) * cfg.report_bits


# --- node state -------------------------------------------------------------------------


@dataclass
class NodeState:
    node: int
    n: int
    stage: int = 0
    stat: dict = field(default_factory=dict)
    miss: set = field(default_factory=set)
    re: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)
    prev_re: dict = field(default_factory=dict)  # last stage's records, used for reports
    prev_se: dict = field(default_factory=dict)
    first_rx: dict = field(default_factory=dict)  # id -> earliest valid reception round
    fresh: list = field(default_factory=list)  # ids first received in the previous round
    pend: dict = field(default_factory=dict)  # id -> Payload, to be sent next round
    known_keys: dict = field(default_factory=dict)  # owner -> Key, other nodes only
    own_seed: Seed | None = None
    accusations_held: frozenset = frozenset()  # nodes under verdict this stage
    requests: list = field(default_factory=list)  # (subject, seq) awaiting a report

    def __post_init__(self):
        if not self.stat:
            self.stat = {j: GOOD for j in range(self.n)}
        for j in range(self.n):
            if j != self.node:
                self.re.setdefault(j, {})
                self.se.setdefault(j, {})

    @property
    def good(self) -> bool:
        return self.stat[self.node] == GOOD

    def clone(self) -> "NodeState":
        c = NodeState.__new__(NodeState)
        c.node, c.n, c.stage = self.node, self.n, self.stage
        c.stat = dict(self.stat)
        c.miss = set(self.miss)
        c.re = {j: dict(d) for j, d in self.re.items()}
        c.se = {j: dict(d) for j, d in self.se.items()}
        c.prev_re = self.prev_re  # never mutated after the stage reset
        c.prev_se = self.prev_se
        c.first_rx = dict(self.first_rx)
        c.fresh = list(self.fresh)
        c.pend = dict(self.pend)
        c.known_keys = dict(self.known_keys)
        c.own_seed = self.own_seed
        c.accusations_held = self.accusations_held
        c.requests = list(self.requests)
        return c

    def reset_stage(self, stage: int):
        self.stage = stage
        self.prev_re, self.prev_se = self.re, self.se
        self.re = {j: {} for j in range(self.n) if j != self.node}
        self.se = {j: {} for j in range(self.n) if j != self.node}
        self.stat = {j: GOOD for j in range(self.n)}
        self.miss = set()
        self.pend = {}
        self.first_rx = {}
        self.fresh = []
        self.known_keys = {}
        self.own_seed = None
        self.accusations_held = frozenset()
        self.requests = []


def cipher_payload(key, p: Payload, cfg: SimConfig) -> Payload:
    bits, meta = cipher.apply(key, p.bits, p.meta, cfg.payload_bits)
    return Payload(bits, meta)


def report_messages(st: NodeState, requests: list, cfg: SimConfig) -> list:
    """Honest reports (plus padding) about each requested (subject, seq)."""
    out = []
    for subject, seq in requests:
        ids = cfg.seq_ids(seq)
        rx = st.prev_re.get(subject, {})
        tx = st.prev_se.get(subject, {})
        got = tuple((i, rx[i]) for i in ids if i in rx)
        gave = tuple((i, tx[i]) for i in ids if i in tx)
        out.append((SOURCE, Report(subject, RECEIVED, got)))
        out.append((SOURCE, Report(subject, SENT, gave)))
        pad = cfg.report_bits - 2 * cfg.log_rho * (len(got) + len(gave))
        if pad:
            out.append((SOURCE, Padding(pad)))
    return out


def node_emit(st: NodeState, rnd: int, cfg: SimConfig) -> list:
    """Conformant outbox of a node for round rnd, as [(recipient, message)]."""
    me = st.node
    if rnd == 1:
        if me == SOURCE:
            return []
        return [
            (SOURCE, Accusation(j) if st.stat.get(j) == BAD else Padding(cfg.acc_bits))
            for j in range(cfg.n)
            if j != me
        ]
    if st.stat[me] != GOOD:
        return []
    if rnd <= cfg.r_mon:
        if rnd % 2 == 1 and rnd < cfg.r_mon and st.requests:
            return report_messages(st, st.requests, cfg)
        return []
    if not st.pend:
        return []
    per = {}
    miss, m, held = st.miss, cfg.per_seq, st.accusations_held
    seed_bits, n, f = st.own_seed.bits, cfg.n, cfg.f
    for ell, p in st.pend.items():
        if miss and (ell - 1) // m + 1 in miss:
            continue
        for j in _expand(seed_bits, ell, me, n, f):
            q = cipher_payload(st.known_keys[j], p, cfg) if j in held else p
            lst = per.get(j)
            if lst is None:
                per[j] = [(ell, q)]
            else:
                lst.append((ell, q))
    return [(j, Dissemination(tuple(per[j]))) for j in sorted(per)]


def _by_peer(pairs) -> dict:
    out = {}
    for peer, msg in pairs:
        lst = out.get(peer)
        if lst is None:
            out[peer] = [msg]
        else:
            lst.append(msg)
    return out


def node_absorb(st: NodeState, rnd: int, inbox: list, sent: list, cfg: SimConfig, stage: int | None = None,
                validity: dict | None = None):
    """Update a node's state with what it received (inbox) and actually sent (sent) in round rnd.

    validity optionally maps id(message) to its precomputed validity for this round.
    """
    me = st.node
    if rnd <= cfg.r_mon:
        _absorb_monitoring(st, rnd, inbox, sent, cfg, stage)
        return
    if not inbox and not sent:
        st.pend = {}
        if st.fresh and me != SOURCE:
            _scan(st, st.fresh, cfg)
        st.fresh = []
        return
    stat = st.stat
    if validity is None:
        validity = {}
    # inbound validity: one well-formed message per sender
    valid_in = []
    seen, dup = set(), set()
    for sender, _ in inbox:
        if sender in seen:
            dup.add(sender)
        seen.add(sender)
    for sender, msg in inbox:
        ok = validity.get(id(msg))
        if ok is None:
            ok = valid_dissemination(msg, rnd, cfg)
        if sender not in dup and ok:
            valid_in.append((sender, msg))
        else:
            stat[sender] = BAD
    if len(valid_in) > 1 and any(valid_in[k][0] > valid_in[k + 1][0] for k in range(len(valid_in) - 1)):
        valid_in.sort(key=lambda sm: sm[0])
    st.pend = {}
    # own sends, recorded at the end of the round
    candidates = st.fresh
    se = st.se
    targets = set()
    for peer, msg in sent:
        ok = validity.get(id(msg))
        if ok is None:
            ok = valid_dissemination(msg, rnd, cfg)
        if peer in targets or not ok:
            stat[me] = BAD
            continue
        targets.add(peer)
        recs = se[peer]
        for ell, _ in msg.tuples:
            if ell not in recs:
                recs[ell] = rnd
            candidates.append(ell)
    if me != SOURCE and candidates:
        _scan(st, candidates, cfg)
    # receptions
    fresh = []
    first_rx, re, pend, held = st.first_rx, st.re, st.pend, st.accusations_held
    can_store = me != SOURCE
    for sender, msg in valid_in:
        recs = re[sender]
        for ell, p in msg.tuples:
            if ell not in recs:
                recs[ell] = rnd
            if ell not in first_rx:
                first_rx[ell] = rnd
                fresh.append(ell)
                if can_store and rnd + 1 - (ell + cfg.r_mon) <= cfg.delta_exp - 1:
                    pend[ell] = cipher_payload(st.known_keys[sender], p, cfg) if sender in held else p
    st.fresh = fresh


def _scan(st: NodeState, candidates, cfg: SimConfig):
    m, miss, me = cfg.per_seq, st.miss, st.node
    seed_bits = st.own_seed.bits if st.own_seed is not None else None
    for ell in set(candidates):
        s = (ell - 1) // m + 1
        if s in miss:
            continue
        if seed_bits is None:
            miss.add(s)
            continue
        if _self_inconsistent(st, ell, _expand(seed_bits, ell, me, cfg.n, cfg.f), cfg):
            miss.add(s)


def _self_inconsistent(st: NodeState, ell: int, expected, cfg: SimConfig) -> bool:
    # same predicate as inconsistent(), using the node's first-reception index
    se = st.se
    for peer, recs in se.items():
        if ell in recs and peer not in expected:
            return True
    first = st.first_rx.get(ell)
    if first is not None:
        if 1 <= first + 1 - (ell + cfg.r_mon) <= cfg.delta_exp - 1:
            for peer in expected:
                if se[peer].get(ell) != first + 1:
                    return True
        return False
    return any(ell in recs for recs in se.values())


def _absorb_monitoring(st: NodeState, rnd: int, inbox: list, sent: list, cfg: SimConfig, stage):
    me = st.node
    if rnd == 1:
        st.reset_stage(stage if stage is not None else st.stage + 1)
    if me == SOURCE:
        return  # monitoring traffic to node 0 is the mediator's business
    for sender, _ in inbox:
        if sender != SOURCE:
            st.stat[sender] = BAD  # nodes only ever talk to the mediator in these rounds
    to_med = [m for peer, m in sent if peer == SOURCE]
    if len(to_med) != len(sent):
        st.stat[me] = BAD
    if rnd == 1:
        if not valid_accusation_batch(to_med, me, cfg):
            st.stat[me] = BAD
        return
    if rnd < cfg.r_mon and rnd % 2 == 1:
        if not valid_report_batch(to_med, st.requests, cfg):
            st.stat[me] = BAD
        st.requests = []
    elif to_med:
        st.stat[me] = BAD
    if rnd < cfg.r_mon and rnd % 2 == 0:
        st.requests = [(m.target, m.seq) for s, m in inbox if s == SOURCE and type(m) is MonitorRequest]
        return
    if rnd == cfg.r_mon:
        held = set()
        for s, m in inbox:
            if s != SOURCE:
                continue
            kind = type(m)
            if kind is Verdict:
                held.add(m.target)
            elif kind is KeyDelivery:
                st.known_keys[m.target] = m.key
            elif kind is SeedDelivery:
                st.own_seed = m.seed
        st.accusations_held = frozenset(held)


def node_step(st: NodeState, rnd: int, inbox: list, sent: list, cfg: SimConfig, stage: int | None = None):
    """Absorb round rnd and return the conformant outbox for round rnd+1."""
    node_absorb(st, rnd, inbox, sent, cfg, stage)
    if rnd + 1 > cfg.rounds:
        return st, []
    return st, node_emit(st, rnd + 1, cfg)


# --- source -------------------------------------------------------------------------------


def event_payload(cfg: SimConfig, stage: int, ell: int) -> Payload:
    bits = 0
    if cfg.payload_bits and ell <= cfg.live_events:
        bits = rng.derive(cfg.master_seed, "payload", stage, ell, bits=cfg.payload_bits)
    return Payload(bits, PayloadMeta(ell, stage))


def source_step(st: NodeState, rnd: int, cfg: SimConfig, stage: int) -> list:
    """Queue the event first sent in round rnd; returns the ids added."""
    ell = rnd - cfg.r_mon
    if st.node != SOURCE or not 1 <= ell <= cfg.rho:
        return []
    st.pend[ell] = event_payload(cfg, stage, ell)
    return [ell]


# --- mediator ------------------------------------------------------------------------------


@dataclass
class MediatorState:
    stage: int = 0
    received_accusations: set = field(default_factory=set)
    monitored: dict = field(default_factory=dict)  # (target, seq) -> drawn?
    pending_requests: dict = field(default_factory=dict)  # reporter -> [(subject, seq)]
    collected: dict = field(default_factory=dict)  # target -> (sent view, received view)
    incomplete: set = field(default_factory=set)  # (target, seq) with a missing or invalid report
    issued_keys: dict = field(default_factory=dict)
    issued_seeds: dict = field(default_factory=dict)
    prev_seeds: dict = field(default_factory=dict)
    verdicts: frozenset = frozenset()

    def clone(self) -> "MediatorState":
        return MediatorState(
            self.stage,
            set(self.received_accusations),
            dict(self.monitored),
            {k: list(v) for k, v in self.pending_requests.items()},
            {j: ({p: dict(d) for p, d in a.items()}, {p: dict(d) for p, d in b.items()})
             for j, (a, b) in self.collected.items()},
            set(self.incomplete),
            dict(self.issued_keys),
            dict(self.issued_seeds),
            dict(self.prev_seeds),
            self.verdicts,
        )


def assembled_views(ms: MediatorState, node0: NodeState, target: int) -> tuple:
    """The mediator's (sent, received) record of target for last stage."""
    sent, received = ms.collected.get(target, ({}, {}))
    sent = dict(sent)
    received = dict(received)
    sent[SOURCE] = node0.prev_re.get(target, {})
    received[SOURCE] = node0.prev_se.get(target, {})
    return sent, received


def decide_verdicts(ms: MediatorState, node0: NodeState, cfg: SimConfig) -> frozenset:
    out = set()
    accused = {t for a, t in ms.received_accusations if a != t}
    for j in range(1, cfg.n):
        if j in accused:
            out.add(j)
            continue
        seed = ms.prev_seeds.get(j)
        if seed is None:
            continue
        seqs = [k for (t, k), drawn in ms.monitored.items() if t == j and drawn and (j, k) not in ms.incomplete]
        if not seqs:
            continue
        sent, received = assembled_views(ms, node0, j)
        if any(
            inconsistent(ell, sent, received, _expand(seed.bits, ell, j, cfg.n, cfg.f), cfg)
            for k in seqs
            for ell in cfg.seq_ids(k)
        ):
            out.add(j)
    return frozenset(out)


def mediator_emit(ms: MediatorState, rnd: int, cfg: SimConfig, node0: NodeState, stage: int) -> list:
    """Mediator outbox for round rnd; also applies its internal (self-addressed) effects."""
    if rnd == 1:
        ms.stage = stage
        ms.received_accusations = {(SOURCE, j) for j in range(1, cfg.n) if node0.stat.get(j) == BAD}
        ms.monitored = {}
        ms.pending_requests = {}
        ms.collected = {}
        ms.incomplete = set()
        ms.prev_seeds = ms.issued_seeds
        ms.issued_seeds = {}
        ms.issued_keys = {}
        ms.verdicts = frozenset()
        return []
    if rnd < cfg.r_mon and rnd % 2 == 0:
        k = rnd // 2
        out = []
        ms.pending_requests = {}
        for j in range(1, cfg.n):
            drawn = rng.bernoulli(cfg.master_seed, cfg.p_mon, "monitor", stage, j, k)
            ms.monitored[(j, k)] = drawn
            if drawn:
                for l in range(1, cfg.n):
                    if l != j:
                        out.append((l, MonitorRequest(j, k)))
                        ms.pending_requests.setdefault(l, []).append((j, k))
        return out
    if rnd == cfg.r_mon:
        ms.verdicts = decide_verdicts(ms, node0, cfg)
        ms.issued_keys = cipher.fresh_keys(cfg.master_seed, stage, range(cfg.n))
        ms.issued_seeds = {
            j: Seed(j, stage, rng.derive(cfg.master_seed, "seed", stage, j, bits=64)) for j in range(cfg.n)
        }
        out = []
        for l in range(1, cfg.n):
            for j in sorted(ms.verdicts):
                out.append((l, Verdict(j)))
            for j in range(cfg.n):
                if j != l:
                    out.append((l, KeyDelivery(j, ms.issued_keys[j])))
            out.append((l, SeedDelivery(ms.issued_seeds[l])))
        # the mediator's own node learns the same things without a network hop
        node0.accusations_held = ms.verdicts
        node0.known_keys = {j: key for j, key in ms.issued_keys.items() if j != SOURCE}
        node0.own_seed = ms.issued_seeds[SOURCE]
        return out
    return []


def mediator_absorb(ms: MediatorState, rnd: int, inbox: list, cfg: SimConfig, node0: NodeState):
    """Collect accusations and reports; flag malformed monitoring traffic."""
    if rnd > cfg.r_mon:
        return
    by = _by_peer(inbox)
    if rnd == 1:
        for l in range(1, cfg.n):
            msgs = by.get(l, [])
            if valid_accusation_batch(msgs, l, cfg):
                ms.received_accusations.update((l, m.target) for m in msgs if type(m) is Accusation)
            else:
                node0.stat[l] = BAD
        return
    if rnd < cfg.r_mon and rnd % 2 == 1:
        for l in range(1, cfg.n):
            msgs = by.get(l, [])
            reqs = ms.pending_requests.get(l, [])
            if not valid_report_batch(msgs, reqs, cfg):
                node0.stat[l] = BAD
                ms.incomplete.update(reqs)
                continue
            for m in msgs:
                if type(m) is not Report:
                    continue
                sent, received = ms.collected.setdefault(m.subject, ({}, {}))
                view = sent if m.direction == RECEIVED else received
                recs = view.setdefault(l, {})
                for ell, r in m.entries:
                    recs.setdefault(ell, r)
        ms.pending_requests = {}
        return
    for l in by:
        if l != SOURCE:
            node0.stat[l] = BAD  # nothing is expected from nodes in these rounds
