"""Reliability oracle, punishment probabilities and one-deviation checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from itertools import combinations

import numpy as np
from scipy import stats

from .core import SOURCE, Dissemination, SimConfig
from .rng import replicate_seed
from .sim import (
    DeviationPlan,
    DropForward,
    FalsifyReport,
    InvalidMessage,
    PrematureSend,
    Simulation,
    WithholdAccusation,
    WithholdReport,
    WrongSubset,
    run_forks,
)
from .utility import bits_sent, stage_utility

MAX_EXACT_N = 8


# --- exact reliability -----------------------------------------------------------------


@dataclass
class Reliability:
    q: Fraction  # common probability that a non-source node receives an event
    per_node: dict
    first_age: dict  # age -> probability that a given non-source node first receives at that age
    delta_exp: int

    @property
    def q_forward(self) -> Fraction:
        """Probability of a first reception early enough to forward (age < delta_exp)."""
        return sum((p for a, p in self.first_age.items() if a < self.delta_exp), Fraction(0))


def _masks(n: int, f: int) -> list:
    out = []
    for u in range(n):
        others = [k for k in range(n) if k != u]
        out.append([sum(1 << k for k in c) for c in combinations(others, f)])
    return out


def reliability_exact(cfg: SimConfig) -> Reliability:
    """Exact reception probabilities via the partition recursion, in rational arithmetic."""
    n, f, delta = cfg.n, cfg.f, cfg.delta_exp
    if n > MAX_EXACT_N:
        raise ValueError(f"n={n} too large for exact enumeration; use reliability_mc")
    if not 0 < f <= n - 1:
        raise ValueError("need 0 < f <= n-1")
    choices = _masks(n, f)
    x = len(choices[0])
    full = (1 << n) - 1
    union_memo = {}

    def union_dist(I: int, R: int) -> dict:
        # distribution of (union of forwarders' picks) restricted to R
        key = (I, R)
        if key in union_memo:
            return union_memo[key]
        dist = {0: Fraction(1)}
        for u in range(n):
            if not I >> u & 1:
                continue
            nxt = {}
            for mask, p in dist.items():
                share = p / x
                for c in choices[u]:
                    m = mask | (c & R)
                    nxt[m] = nxt.get(m, 0) + share
            dist = nxt
        union_memo[key] = dist
        return dist

    # state: (S, I) bitmasks; round a = age of the forwarding step about to happen
    states = {(0, 1 << SOURCE): Fraction(1)}
    first_age = {a: [Fraction(0)] * n for a in range(1, delta + 1)}
    for a in range(1, delta + 1):
        nxt = {}
        for (S, I), p in states.items():
            if I == 0:
                nxt[(S, 0)] = nxt.get((S, 0), 0) + p
                continue
            R = full & ~(S | I)
            for new, q in union_dist(I, R).items():
                pq = p * q
                for k in range(n):
                    if new >> k & 1:
                        first_age[a][k] += pq
                # receivers at age delta do not forward
                key = (S | I, new) if a < delta else (S | I | new, 0)
                nxt[key] = nxt.get(key, 0) + pq
        states = nxt
    per_node = {k: sum(first_age[a][k] for a in first_age) for k in range(n)}
    per_node[SOURCE] = Fraction(1)
    return Reliability(per_node[1], per_node, {a: first_age[a][1] for a in first_age}, delta)


def ubar(cfg: SimConfig, rel: Reliability | None = None) -> Fraction:
    """Frictionless conformant per-stage utility q(f)(beta - gamma f)."""
    rel = rel or reliability_exact(cfg)
    return rel.q * (cfg.beta - cfg.gamma * cfg.f)


# --- Monte Carlo reliability ----------------------------------------------------------------


def reception_fractions(trace) -> list:
    """For every (stage, id), the fraction of non-source nodes that received some tuple with that id."""
    cfg = trace.cfg
    out = []
    for s in trace.stages:
        got = [set() for _ in range(cfg.rho + 1)]
        for _, _, j, m in s.messages:
            if j != SOURCE and type(m) is Dissemination:
                for ell, _ in m.tuples:
                    got[ell].add(j)
        out.extend(len(got[ell]) / (cfg.n - 1) for ell in range(1, cfg.rho + 1))
    return out


def reliability_mc(cfg: SimConfig, trials: int, level: float = 0.99) -> tuple[float, float]:
    """Mean per-event reception fraction over conformant runs and its normal half-width."""
    if trials < 1:
        raise ValueError("trials must be positive")
    stages = -(-trials // cfg.rho)
    sim = Simulation(cfg, stages)
    vals = []
    while not sim.done:
        stage = sim.stage
        sim.run_until(stage + 1)
        # keep memory flat: only the finished stage is inspected, then dropped
        vals.extend(reception_fractions(sim.trace))
        sim.trace.stages.clear()
    x = np.asarray(vals[:trials])
    z = stats.norm.ppf(0.5 + level / 2)
    hw = z * x.std(ddof=1) / math.sqrt(len(x)) if len(x) > 1 else float("inf")
    return float(x.mean()), float(hw)


# --- punishment ---------------------------------------------------------------------------


def punish_probability(k: int, p_mon):
    """Probability that at least one of k inconsistent sequences is monitored."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if isinstance(p_mon, float):
        return 1.0 - (1.0 - p_mon) ** k
    p = Fraction(p_mon)
    return 1 - (1 - p) ** k


# --- one-deviation checks -----------------------------------------------------------------

KINDS = ("DropForward", "WrongSubset", "PrematureSend", "InvalidMessage", "WithholdReport", "WithholdAccusation")


def default_plan(kind: str, cfg: SimConfig, node: int = 1, stage: int = 1) -> tuple[DeviationPlan, tuple]:
    """A representative one-shot deviation of each kind, plus the history it needs.

    Deviations land in the middle of the stage (middle sequence or middle
    dissemination round).  WithholdAccusation needs a peer that misbehaved
    towards the deviator in the previous stage, so it comes with a history
    plan and is placed one stage later.
    """
    mid_seq = (cfg.n_seq + 1) // 2
    mid_round = cfg.r_mon + cfg.rho // 2
    peer = 2 if node != 2 else 3
    if kind == "DropForward":
        return DeviationPlan(node, stage, None, DropForward(seq=mid_seq)), ()
    if kind == "WrongSubset":
        return DeviationPlan(node, stage, None, WrongSubset(seq=mid_seq)), ()
    if kind == "PrematureSend":
        return DeviationPlan(node, stage, mid_round, PrematureSend()), ()
    if kind == "InvalidMessage":
        return DeviationPlan(node, stage, mid_round, InvalidMessage("expired")), ()
    if kind == "WithholdReport":
        return DeviationPlan(node, stage, None, WithholdReport()), ()
    if kind == "FalsifyReport":
        return DeviationPlan(node, stage, None, FalsifyReport()), ()
    if kind == "WithholdAccusation":
        hist = (DeviationPlan(peer, stage, mid_round, InvalidMessage("expired", recipient=node)),)
        return DeviationPlan(node, stage + 1, 1, WithholdAccusation(peer)), hist
    raise ValueError(f"unknown deviation kind {kind!r}")


@dataclass
class DeltaEstimate:
    kind: str
    mean: float
    half_width: float
    replicates: int
    params: dict
    d_now: np.ndarray = field(repr=False, default=None)  # per replicate u_conform - u_deviate at stage t
    d_next: np.ndarray = field(repr=False, default=None)  # same at stage t+1
    tail_max_abs: float | None = None  # max |difference| at stage t+2, when checked

    @property
    def lower(self) -> float:
        return self.mean - self.half_width

    @property
    def upper(self) -> float:
        return self.mean + self.half_width

    def passes(self, tol: float) -> bool:
        return self.lower >= -tol

    def rediscount(self, delta_disc) -> "DeltaEstimate":
        """Same replicates, different discount factor."""
        return _estimate(self.kind, self.d_now, self.d_next, float(delta_disc),
                         {**self.params, "delta": float(delta_disc)}, self.tail_max_abs)


def _estimate(kind, d_now, d_next, delta, params, tail=None) -> DeltaEstimate:
    d = d_now + delta * d_next
    k = len(d)
    sd = float(d.std(ddof=1)) if k > 1 else 0.0
    hw = float(stats.t.ppf(0.995, k - 1) * sd / math.sqrt(k)) if k > 1 and sd > 0 else 0.0
    return DeltaEstimate(kind, float(d.mean()), hw, k, params, d_now, d_next, tail)


def _params(cfg: SimConfig) -> dict:
    return {
        "n": cfg.n, "rho": cfg.rho, "f": cfg.f, "delta_exp": cfg.delta_exp,
        "beta_over_gamma_f": float(cfg.beta / (cfg.gamma * cfg.f)),
        "delta": float(cfg.delta_disc), "p_mon": float(cfg.p_mon),
    }


def delta_batch(cfg: SimConfig, plans: list, replicates: int, history=(), check_tail: bool = False,
                names: list | None = None) -> list:
    """DeltaEstimates for several plans that share a history, reusing one conformant run per replicate."""
    if replicates < 2:
        raise ValueError("need at least two replicates")
    history = tuple(history)
    t = plans[0].stage
    if any(p.stage != t for p in plans):
        raise ValueError("plans in one batch must deviate in the same stage")
    horizon = t + (2 if check_tail else 1)
    dev_nodes = [p.node for p in plans]
    d_now = np.zeros((len(plans), replicates))
    d_next = np.zeros((len(plans), replicates))
    tail = [0.0] * len(plans)
    for r in range(replicates):
        c = replace(cfg, master_seed=replicate_seed(cfg.master_seed, r))
        base, devs = run_forks(c, horizon, plans, history)
        cache = {}

        def u(trace, stage, node):
            key = (id(trace.stage(stage)), node)  # spliced forks share stage records
            if key not in cache:
                cache[key] = stage_utility(trace, stage, node, c)
            return cache[key]

        for k, (dev, node) in enumerate(zip(devs, dev_nodes)):
            d_now[k, r] = float(u(base, t, node) - u(dev, t, node))
            d_next[k, r] = float(u(base, t + 1, node) - u(dev, t + 1, node))
            if check_tail:
                tail[k] = max(tail[k], abs(float(u(base, t + 2, node) - u(dev, t + 2, node))))
    names = names or [p.kind_name for p in plans]
    delta = float(cfg.delta_disc)
    return [
        _estimate(names[k], d_now[k], d_next[k], delta, _params(cfg), tail[k] if check_tail else None)
        for k in range(len(plans))
    ]


def one_deviation_delta(cfg: SimConfig, plan: DeviationPlan, replicates: int, history=(),
                        check_tail: bool = False) -> DeltaEstimate:
    """Paired Monte-Carlo estimate of U(conform) - U(deviate) for one plan."""
    return delta_batch(cfg, [plan], replicates, history, check_tail)[0]


@dataclass
class SweepRow:
    params: dict
    deviation: str
    delta_mean: float
    ci_halfwidth: float
    passed: bool


def equilibrium_sweep(cfgs: list, kinds=KINDS, replicates: int = 200, tol_frac: float = 1e-6,
                      check_tail: bool = False) -> list:
    """One row per (config, deviation kind); PASS when the CI lower bound is >= -tol_frac*beta."""
    rows = []
    for cfg in cfgs:
        groups = {}
        for kind in kinds:
            plan, hist = default_plan(kind, cfg)
            groups.setdefault((hist, plan.stage), []).append((kind, plan))
        est = {}
        for (hist, _), items in groups.items():
            res = delta_batch(cfg, [p for _, p in items], replicates, hist, check_tail, [k for k, _ in items])
            est.update({k: e for (k, _), e in zip(items, res)})
        tol = tol_frac * float(cfg.beta)
        for kind in kinds:
            e = est[kind]
            rows.append(SweepRow(e.params, kind, e.mean, e.half_width, e.passes(tol)))
    return rows


# --- average-utility gap ----------------------------------------------------------------------


@dataclass
class GapResult:
    gap: float
    avg_utility: float
    ubar: float
    stages: int
    monitoring_bits: float  # mean per node per stage
    monitoring_bits_max: int
    bound: float  # n * alpha_star * (1 + p*S) / alpha, in bits
    se: float  # standard error of avg_utility


def alpha_star_bits(cfg: SimConfig) -> int:
    """Report cost per (node, sequence) in bits: 4 m log(rho)."""
    return 4 * cfg.per_seq * cfg.log_rho


def theorem1_gap(cfg: SimConfig, stages: int) -> GapResult:
    """|(1-delta) U_hat - ubar| from a long conformant run (node 0 excluded: it is the source)."""
    sim = Simulation(cfg, stages)
    per_stage, mon = [], []
    while not sim.done:
        stage = sim.stage
        sim.run_until(stage + 1)
        tr = sim.trace
        us = [float(stage_utility(tr, stage, i, cfg)) for i in range(1, cfg.n)]
        per_stage.append(sum(us) / len(us))
        mon.extend(bits_sent(tr, stage, i, monitoring_only=True) for i in range(1, cfg.n))
        tr.stages[-1].messages = []  # utilities done; keep memory flat
    x = np.asarray(per_stage)
    # per-stage utilities are i.i.d. across stages, so the stationary average is their mean
    avg = float(x.mean())
    ub = float(ubar(cfg))
    bound = cfg.n * alpha_star_bits(cfg) * (1 + float(cfg.p_mon) * cfg.n_seq)
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("inf")
    return GapResult(abs(avg - ub), avg, ub, stages, float(np.mean(mon)), int(max(mon)), bound, se)
