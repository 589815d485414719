"""The acceptance criteria as plain functions.

Each check takes the master seed and returns an Outcome whose `data` is
fully deterministic given that seed, so two runs can be compared byte for
byte.  Wall-clock limits are checked separately and never written to the
result files.  Used by tests/test_acceptance.py and scripts/run_acceptance.py.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import time
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations_with_replacement, permutations
from pathlib import Path

import numpy as np
from scipy import stats

from mediated_gossip import rng
from mediated_gossip.analysis import (
    KINDS,
    default_plan,
    delta_batch,
    reliability_exact,
    reliability_mc,
    theorem1_gap,
)
from mediated_gossip.cipher import apply, keystream
from mediated_gossip.core import SOURCE, Key, PayloadMeta, Seed, SimConfig
from mediated_gossip.sim import (
    DeviationPlan,
    DropForward,
    FalsifyReport,
    InvalidMessage,
    PrematureSend,
    Simulation,
    WithholdAccusation,
    WithholdReport,
    WrongSubset,
    run,
)
from mediated_gossip.subset_prng import expand, subset_table

from oracles import brute_force_reliability, verdict_probability

SEED_ENV = "MEDIATED_GOSSIP_SEED"
DEFAULT_SEED = 20240601
REPORT = []  # one line per criterion, printed at the end of a pytest session


def acceptance_seed() -> int:
    return int(os.environ.get(SEED_ENV, str(DEFAULT_SEED)), 0)


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool
    summary: str
    data: dict
    runtime: float = 0.0
    time_limit: float | None = None
    notes: list = field(default_factory=list)

    @property
    def in_time(self) -> bool:
        return self.time_limit is None or self.runtime < self.time_limit

    @property
    def ok(self) -> bool:
        return self.passed and self.in_time

    def line(self) -> str:
        limit = f" (limit {self.time_limit:.0f} s)" if self.time_limit else ""
        return (f"[{'PASS' if self.ok else 'FAIL'}] criterion {self.number:>2} {self.title}: {self.summary}; "
                f"{self.runtime:.1f} s{limit}")

    def serialized(self) -> bytes:
        body = {"criterion": self.number, "title": self.title, "passed": self.passed, "data": self.data}
        return (json.dumps(body, sort_keys=True, indent=1, default=_jsonable) + "\n").encode()


def _jsonable(x):
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()


def light_run(cfg: SimConfig, stages: int, plans=()) -> list:
    """Per stage (verdicts, end_miss, end_self_bad) without keeping the message log."""
    sim = Simulation(cfg, stages, plans)
    out = []
    while not sim.done:
        sim.run_until(sim.stage + 1)
        rec = sim.trace.stages[-1]
        out.append((rec.verdicts, rec.end_miss, rec.end_self_bad))
        sim.trace.stages.clear()
    return out


# --- 1. cipher algebra ---------------------------------------------------------------------


def check_cipher(seed: int) -> Outcome:
    keys = [Key(i + 1, 1, rng.derive(seed, "acceptance-key", i, bits=128)) for i in range(4)]
    meta0 = PayloadMeta(1, 1)
    sequences = mismatches = 0
    for size in range(5):
        for multiset in combinations_with_replacement(range(4), size):
            odd = frozenset(keys[i] for i in set(multiset) if multiset.count(i) % 2)
            mask = 0
            for k in odd:
                mask ^= keystream(k, 8)
            orders = sorted(set(permutations(multiset)))
            sequences += len(orders)
            for v in range(256):
                for order in orders:
                    bits, meta = v, meta0
                    for i in order:
                        bits, meta = apply(keys[i], bits, meta, 8)
                    # same result in every order, xor of the odd keys only, identity iff parity empty
                    if bits != v ^ mask or meta.key_parity != odd or ((bits == v) != (mask == 0)):
                        mismatches += 1
    data = {"key_sequences": sequences, "payloads": 256, "mismatches": mismatches}
    return Outcome(1, "cipher algebra", mismatches == 0,
                   f"{sequences} key sequences x 256 payloads, {mismatches} mismatches", data, time_limit=10)


# --- 2. subset PRNG uniformity ---------------------------------------------------------------


def check_prng(seed: int) -> Outcome:
    cfg = SimConfig(n=5, f=2)
    me, draws = 1, 60_000
    table = subset_table(cfg.n, cfg.f, me)
    index = {s: k for k, s in enumerate(table)}
    x = len(table)
    first = np.zeros(draws, dtype=np.int64)
    second = np.zeros(draws, dtype=np.int64)
    for i in range(draws):
        s = Seed(me, 1, rng.derive(seed, "acceptance-prng", i))
        first[i] = index[expand(s, 1, me, cfg)]
        second[i] = index[expand(s, 2, me, cfg)]
    counts = np.bincount(first, minlength=x)
    p_gof = float(stats.chisquare(counts).pvalue)
    joint = np.zeros((x, x), dtype=np.int64)
    np.add.at(joint, (first, second), 1)
    p_indep = float(stats.chi2_contingency(joint).pvalue)
    p_cond = [float(stats.chisquare(joint[a]).pvalue) for a in range(x)]
    ok = p_gof > 1e-3 and p_indep > 1e-3 and min(p_cond) > 1e-3
    data = {"draws": draws, "counts": counts.tolist(), "p_uniform": p_gof, "p_independence": p_indep,
            "p_conditional": p_cond}
    return Outcome(2, "subset PRNG uniformity", ok,
                   f"chi-square p={p_gof:.3g}, independence p={p_indep:.3g}, min conditional p={min(p_cond):.3g}"
                   " (need > 0.001)", data, time_limit=30)


# --- 3. reliability oracle --------------------------------------------------------------------

RELIABILITY_CASES = ((4, 1, 3), (5, 2, 4), (6, 2, 4))


def check_reliability(seed: int) -> Outcome:
    rows, ok = [], True
    for n, f, d in RELIABILITY_CASES:
        cfg = SimConfig(n=n, f=f, rho=64, delta_exp=d, master_seed=rng.replicate_seed(seed, n, "acceptance-rel"))
        rel = reliability_exact(cfg)
        per_node, first, total = brute_force_reliability(n, f, d)
        exact_equal = [rel.per_node[k] for k in range(n)] == per_node and rel.first_age == {
            a: Fraction(c, total) for a, c in first.items()}
        est, hw = reliability_mc(cfg, 100_000)
        close = abs(est - float(rel.q)) <= 3 * hw
        ok &= exact_equal and close
        rows.append({"n": n, "f": f, "delta": d, "q_exact": str(rel.q), "q_bruteforce": str(per_node[1]),
                     "exact_equal": exact_equal, "q_mc": est, "halfwidth": hw, "within_3hw": close})
    summary = ", ".join(f"({r['n']},{r['f']},{r['delta']}) q={r['q_exact']} mc={r['q_mc']:.4f}+-{r['halfwidth']:.4f}"
                        for r in rows)
    return Outcome(3, "reliability oracle", ok, summary, {"cases": rows}, time_limit=120)


# --- 4. punishment probability ------------------------------------------------------------------


def check_punishment_rate(seed: int) -> Outcome:
    # node k (1..3) drops its due ids of sequences 1..k in every stage; node 4 never deviates
    stages = 10_000
    rows, ok = [], True
    for p in (Fraction(3, 10), Fraction(1)):
        cfg = SimConfig(n=5, f=2, rho=9, delta_exp=3, p_mon=p,
                        master_seed=rng.replicate_seed(seed, p.numerator * 100 + p.denominator, "acceptance-m1"))
        plans = [DeviationPlan(k, t, None, DropForward(seq=s))
                 for t in range(1, stages + 1) for k in (1, 2, 3) for s in range(1, k + 1)]
        res = light_run(cfg, stages + 1, plans)
        for node, k in ((4, 0), (1, 1), (2, 2), (3, 3)):
            used = hits = 0
            for t in range(stages):
                verdicts, miss, bad = res[t]
                if len(miss[node]) != k or node in bad:
                    continue  # condition on the realized miss set
                used += 1
                hits += node in res[t + 1][0]
            freq = hits / used if used else float("nan")
            target = verdict_probability(k, p)
            good = hits == 0 if k == 0 else abs(freq - float(target)) <= 0.02
            ok &= good and used >= 0.95 * stages
            rows.append({"p_mon": str(p), "k": k, "stages_used": used, "verdicts": hits, "freq": freq,
                         "predicted": float(target), "ok": good})
    worst = max(abs(r["freq"] - r["predicted"]) for r in rows)
    return Outcome(4, "verdict rate 1-(1-p)^k", ok,
                   f"8 (p,k) cells of ~{stages} stages, max |freq - prediction| = {worst:.4f} (tol 0.02), "
                   f"k=0 verdicts = {sum(r['verdicts'] for r in rows if r['k'] == 0)}", {"cells": rows})


# --- 5 and 7. fuzzed one-shot deviations -------------------------------------------------------

FUZZ_CASES = 500
FUZZ_CFG = SimConfig(n=5, f=2, rho=16, delta_exp=3, p_mon=Fraction(1, 2))
ALL_KINDS = KINDS + ("FalsifyReport",)


def fuzz_case(seed: int, i: int):
    """One random deviation (plus sometimes an earlier, independent one by another node)."""
    cfg = FUZZ_CFG.with_(master_seed=rng.replicate_seed(seed, i, "acceptance-fuzz"))
    R = random.Random(rng.derive(seed, "acceptance-fuzz-plan", i))
    kind = ALL_KINDS[R.randrange(len(ALL_KINDS))]
    v = R.randint(1, cfg.n - 1)
    w = R.choice([x for x in range(1, cfg.n) if x != v])
    t = R.randint(1, 3)
    dis_round = R.randint(cfg.r_mon + 1, cfg.rounds)
    background = None
    if kind == "DropForward":
        dev = R.choice([DropForward(id=R.randint(1, cfg.rho)), DropForward(seq=R.randint(1, cfg.n_seq)), DropForward()])
        plan = DeviationPlan(v, t, None, dev)
    elif kind == "WrongSubset":
        dev = R.choice([WrongSubset(id=R.randint(1, cfg.rho)), WrongSubset(seq=R.randint(1, cfg.n_seq))])
        plan = DeviationPlan(v, t, None, dev)
    elif kind == "PrematureSend":
        plan = DeviationPlan(v, t, dis_round, PrematureSend())
    elif kind == "InvalidMessage":
        if R.random() < 0.5:
            plan = DeviationPlan(v, t, dis_round, InvalidMessage(R.choice(["expired", "duplicate"])))
        else:
            plan = DeviationPlan(v, t, R.randint(1, cfg.r_mon), InvalidMessage("padding"))
    elif kind == "WithholdAccusation":
        t = max(t, 2)
        plan = DeviationPlan(v, t, 1, WithholdAccusation())
        background = DeviationPlan(w, t - 1, dis_round, InvalidMessage("expired", recipient=v))
    elif kind == "WithholdReport":
        plan = DeviationPlan(v, t, None, WithholdReport())
    else:
        plan = DeviationPlan(v, t, None, FalsifyReport(edit=R.choice(["incriminate", "empty", "shift"])))
    if background is None and t >= 2 and R.random() < 0.5:
        background = DeviationPlan(w, t - 1, dis_round, InvalidMessage("expired"))
    plans = [p for p in (background, plan) if p is not None]
    return cfg, kind, plans, t + 2


def _fuzz_traces(seed: int):
    for i in range(FUZZ_CASES):
        cfg, kind, plans, stages = fuzz_case(seed, i)
        yield i, kind, plans, run(cfg, stages, history=plans, detail=True)


def check_fuzz(seed: int) -> tuple[Outcome, Outcome]:
    t0 = time.perf_counter()
    stats_m = {"cases": 0, "verdicts": 0, "next_stage": 0, "framed": 0, "violations": 0,
               "invalid_plans": 0, "invalid_punished": 0, "fired": 0}
    stats_d = {"entries": 0, "punished_entries": 0, "forged_skipped": 0, "violations": 0}
    per_case = []
    kinds_seen = {}
    for i, kind, plans, tr in _fuzz_traces(seed):
        stats_m["cases"] += 1
        kinds_seen[kind] = kinds_seen.get(kind, 0) + 1
        fired = {}  # stage -> [(node, plan)]
        for rec in tr.stages:
            for plan, _ in rec.deviations:
                fired.setdefault(rec.stage, []).append((plan.node, plan))
        stats_m["fired"] += sum(len(v) for v in fired.values())
        for rec in tr.stages:
            s = rec.stage
            for x in rec.verdicts:
                stats_m["verdicts"] += 1
                if any(node == x for node, _ in fired.get(s - 1, ())):
                    stats_m["next_stage"] += 1
                elif any(p.kind_name == "FalsifyReport" and node != x for node, p in fired.get(s, ())):
                    stats_m["framed"] += 1  # lies in this stage's reports about x
                else:
                    stats_m["violations"] += 1
        neutralized = kind == "WithholdAccusation"  # its only witness withholds the accusation
        for s, lst in fired.items():
            for node, p in lst:
                if p.kind_name == "InvalidMessage" and not (neutralized and p is plans[0]):
                    stats_m["invalid_plans"] += 1
                    stats_m["invalid_punished"] += node in tr.stage(s + 1).verdicts
        # D1 on every pend entry of every snapshot
        for rec in tr.stages:
            held = rec.verdicts
            for snap in rec.snapshots:
                j = snap.node
                for _, owners, origin in snap.pend:
                    if origin != SOURCE:
                        stats_d["forged_skipped"] += 1
                        continue
                    stats_d["entries"] += 1
                    stats_d["punished_entries"] += j in held
                    if not owners <= {j} or (owners == {j}) != (j in held):
                        stats_d["violations"] += 1
        per_case.append([kind, [p.stage for p in plans], [sorted(v) for v in tr.verdicts()]])
    total = time.perf_counter() - t0
    digest = _digest(per_case)
    m = stats_m
    ok_m = m["violations"] == 0 and m["invalid_plans"] > 0 and m["invalid_punished"] == m["invalid_plans"]
    o5 = Outcome(5, "verdict timing (one-shot fuzz)", ok_m,
                 f"{m['cases']} cases, {m['verdicts']} verdicts: {m['next_stage']} in stage t+1, "
                 f"{m['framed']} against others framed by falsified reports in stage t, {m['violations']} violations; "
                 f"invalid-message deviations punished {m['invalid_punished']}/{m['invalid_plans']}",
                 {"stats": m, "kinds": kinds_seen, "cases_digest": digest})
    d = stats_d
    o7 = Outcome(7, "cipher parity invariant in pend", d["violations"] == 0 and d["punished_entries"] > 0,
                 f"{d['entries']} genuine pend entries ({d['punished_entries']} at punished nodes), "
                 f"{d['violations']} violations; {d['forged_skipped']} forged entries not covered",
                 {"stats": d, "cases_digest": digest})
    o5.runtime = o7.runtime = total
    return o5, o7


# --- 6. own reports are ignored --------------------------------------------------------------------


def check_own_reports(seed: int) -> Outcome:
    stages = 10_000
    base = SimConfig(n=4, f=2, rho=9, delta_exp=3, p_mon=Fraction(1, 2))
    arms = {}
    for arm, lying in (("honest", False), ("self-incriminating", True)):
        cfg = base.with_(master_seed=rng.replicate_seed(seed, int(lying), "acceptance-m4"))
        plans = []
        report_rounds = range(3, cfg.r_mon, 2)
        for t in range(1, stages + 1):
            plans.append(DeviationPlan(1, t, None, DropForward(seq=1)))
            if lying:
                plans.extend(DeviationPlan(1, t, r, FalsifyReport(edit="incriminate")) for r in report_rounds)
        res = light_run(cfg, stages + 1, plans)
        hits = sum(1 in res[t][0] for t in range(1, stages + 1))
        arms[arm] = {"stages": stages, "verdicts": hits, "freq": hits / stages}
    a, b = arms["honest"], arms["self-incriminating"]
    pooled = (a["verdicts"] + b["verdicts"]) / (2 * stages)
    se = math.sqrt(pooled * (1 - pooled) * 2 / stages)
    z = (a["freq"] - b["freq"]) / se if se > 0 else 0.0
    pval = float(2 * stats.norm.sf(abs(z)))
    return Outcome(6, "own reports ignored", pval > 0.01,
                   f"verdict frequency honest {a['freq']:.4f} vs self-incriminating {b['freq']:.4f}, "
                   f"two-proportion p={pval:.3g} (need > 0.01)", {"arms": arms, "z": z, "p_value": pval})


# --- 8. one-deviation sign suite -----------------------------------------------------------------


def check_deviation_signs(seed: int, replicates: int = 2000) -> Outcome:
    cfg = SimConfig(delta_disc=Fraction(19, 20), master_seed=seed)
    assert cfg.beta == 10 * cfg.gamma * cfg.f
    tol = 1e-6 * float(cfg.beta)
    groups = {}
    for kind in KINDS:
        plan, hist = default_plan(kind, cfg)
        groups.setdefault(hist, []).append((kind, plan))
    est = {}
    for hist, items in groups.items():
        res = delta_batch(cfg, [p for _, p in items], replicates, hist, False, [k for k, _ in items])
        est.update({k: e for (k, _), e in zip(items, res)})
    rows = {k: {"mean": e.mean, "halfwidth": e.half_width, "lower": e.lower, "pass": e.passes(tol)}
            for k, e in est.items()}
    myopic = est["DropForward"].rediscount(0)
    ok = all(r["pass"] for r in rows.values()) and myopic.upper < 0
    summary = ", ".join(f"{k} {r['lower']:.1f}" for k, r in rows.items())
    return Outcome(8, "one-deviation signs", ok,
                   f"CI lower bounds at delta=0.95 (need >= {-tol:.2g}): {summary}; "
                   f"DropForward upper at delta=0: {myopic.upper:.2f} (need < 0)",
                   {"replicates": replicates, "kinds": rows,
                    "myopic_drop": {"mean": myopic.mean, "upper": myopic.upper}}, time_limit=600)


# --- 9. average-utility gap --------------------------------------------------------------------

GAP_RUNS = ((16, 36, 1000), (64, 34, 400), (256, 32, 200))  # rho, payload bits (keeps gamma = 40), stages


def check_gap(seed: int) -> Outcome:
    rows = []
    for rho, c, stages in GAP_RUNS:
        cfg = SimConfig(rho=rho, payload_bits=c, beta=800, master_seed=rng.replicate_seed(seed, rho, "acceptance-gap"))
        assert cfg.gamma == 40 and cfg.beta == 10 * cfg.gamma * cfg.f
        g = theorem1_gap(cfg, stages)
        rows.append({"rho": rho, "stages": stages, "gap": g.gap, "se": g.se, "avg_utility": g.avg_utility,
                     "ubar": g.ubar, "monitoring_bits_mean": g.monitoring_bits,
                     "monitoring_bits_max": g.monitoring_bits_max, "bound": g.bound,
                     "bound_ok": g.monitoring_bits <= g.bound})
    gaps = [r["gap"] for r in rows]
    decreasing = all(a > b for a, b in zip(gaps, gaps[1:]))
    ok = decreasing and all(r["bound_ok"] for r in rows)
    summary = ", ".join(f"rho={r['rho']} gap={r['gap']:.2f}+-{r['se']:.2f} A={r['monitoring_bits_mean']:.0f}"
                        f"<={r['bound']:.0f}" for r in rows)
    return Outcome(9, "average-utility gap", ok, summary, {"runs": rows})


# --- driver -------------------------------------------------------------------------------------


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    dt = time.perf_counter() - t0
    for o in out if isinstance(out, tuple) else (out,):
        if not o.runtime:
            o.runtime = dt
    return out


CHECKS = {1: check_cipher, 2: check_prng, 3: check_reliability, 4: check_punishment_rate, 5: check_fuzz,
          6: check_own_reports, 7: check_fuzz, 8: check_deviation_signs, 9: check_gap}


class Runner:
    """Computes each criterion at most once (5 and 7 share their traces)."""

    def __init__(self, seed: int):
        self.seed = seed
        self.done = {}

    def get(self, number: int) -> Outcome:
        if number not in self.done:
            out = timed(CHECKS[number], self.seed)
            for o in out if isinstance(out, tuple) else (out,):
                self.done[o.number] = o
        return self.done[number]


def run_all(seed: int, out_dir=None, numbers=tuple(CHECKS)) -> list:
    """The criteria that produce result files, optionally writing them."""
    runner = Runner(seed)
    outcomes = [runner.get(k) for k in numbers]
    if out_dir is not None:
        for o in outcomes:
            write_outcome(o, out_dir)
    return outcomes


def result_path(out_dir, number: int) -> Path:
    return Path(out_dir) / f"criterion_{number:02d}.json"


def write_outcome(o: Outcome, out_dir):
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    result_path(out_dir, o.number).write_bytes(o.serialized())
