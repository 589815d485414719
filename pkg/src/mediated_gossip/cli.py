"""Command-line experiment runner.

Configs are flat ``key=value`` text files (``#`` starts a comment) whose keys
are the SimConfig field names; the same pairs may be given as positional
overrides.  Every run writes the resolved config next to its tables.

    mediated-gossip simulate --stages 3
    mediated-gossip reliability n=5 f=2 delta_exp=4 --trials 20000
    mediated-gossip check-equilibrium --kind DropForward --replicates 200
    mediated-gossip sweep f=1,2 beta_ratio=1,3,10 --replicates 100
    mediated-gossip gap rho=16,64,256 --stages 200

Seed resolution: --seed, then $MEDIATED_GOSSIP_SEED, then master_seed from
the config or overrides, then the built-in default.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import os
import sys
from dataclasses import fields
from fractions import Fraction
from pathlib import Path

from .core import SimConfig, validate_config

SEED_ENV = "MEDIATED_GOSSIP_SEED"
SUBCOMMANDS = ("simulate", "reliability", "check-equilibrium", "sweep", "gap")
INT_KEYS = {"n", "f", "rho", "delta_exp", "n_seq", "per_seq", "payload_bits", "r_dis", "master_seed", "live_events"}
FRACTION_KEYS = {"p_mon", "alpha", "beta", "delta_disc"}
SWEEP_ONLY = {"beta_ratio"}  # beta = beta_ratio * gamma * f


class UsageError(Exception):
    """Bad input; reported as one line with exit status 2."""


def valid_keys() -> list:
    return [f.name for f in fields(SimConfig)]


def parse_value(key: str, text: str):
    text = text.strip()
    try:
        if key in INT_KEYS:
            return int(text, 0)
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"bad value for {key}: {text!r}") from None


def parse_pairs(lines, source: str, multi: bool = False, extra=()) -> dict:
    """key=value lines to a dict; with multi, values are comma-separated lists."""
    allowed = set(valid_keys()) | set(extra)
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{no}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise UsageError(f"{source}:{no}: unknown key {key!r}; valid keys: {', '.join(sorted(allowed))}")
        if multi:
            out[key] = [parse_value(key, v) for v in val.split(",")]
        else:
            out[key] = parse_value(key, val)
    return out


def resolve_seed(flag, values: dict) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return values.get("master_seed", SimConfig.master_seed)


def build_configs(args, multi: bool = False) -> list:
    """All configs requested by the config file plus overrides (cartesian product when multi)."""
    base = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
        base = parse_pairs(text.splitlines(), args.config)
    over = parse_pairs(args.overrides, "override", multi=True, extra=SWEEP_ONLY if multi else ())
    for k, vs in over.items():
        if len(vs) > 1 and not multi:
            raise UsageError(f"{k}: value lists are only accepted by sweep and gap")
    grid = {k: [v] for k, v in base.items()}
    grid.update(over)
    keys = list(grid)
    cfgs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        values = dict(zip(keys, combo))
        ratio = values.pop("beta_ratio", None)
        values["master_seed"] = resolve_seed(args.seed, values)
        try:
            cfg = SimConfig(**values)
            if ratio is not None:
                cfg = cfg.with_(beta=ratio * cfg.gamma * cfg.f)
        except (TypeError, ValueError, ZeroDivisionError) as e:
            raise UsageError(f"invalid config: {e}") from None
        v = validate_config(cfg)
        if not v.ok:
            raise UsageError("invalid config: " + "; ".join(v.errors))
        for w in v.warnings:
            print(f"warning: {w}", file=sys.stderr)
        cfgs.append(cfg)
    return cfgs


def fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x) if x.denominator == 1 else f"{float(x):.9g}"
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def config_text(cfgs: list) -> str:
    lines = []
    for k, cfg in enumerate(cfgs):
        if len(cfgs) > 1:
            lines.append(f"# config {k}")
        lines.extend(f"{key}={val}" for key, val in cfg.as_dict().items())
    return "\n".join(lines) + "\n"


def table_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    return buf.getvalue()


class Output:
    """Collects named files; writes them into --out (if given) and prints the main table."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir) if out_dir else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str, show: bool = False):
        if self.dir:
            (self.dir / name).write_text(text)
        if show:
            sys.stdout.write(text)


# --- subcommands -----------------------------------------------------------------------------


def cmd_simulate(args, out: Output):
    from .analysis import default_plan
    from .sim import run
    from .utility import utility_report

    (cfg,) = build_configs(args)
    out.write("config.txt", config_text([cfg]))
    plan, hist = (None, ())
    if args.kind:
        plan, hist = default_plan(args.kind[0], cfg)
    stages = max(args.stages, plan.stage + 1) if plan else args.stages
    trace = run(cfg, stages, plan, hist)
    rows = [
        [r["stage"], r["messages"], " ".join(map(str, r["verdicts"])), " ".join(f"{j}:{k}" for j, k in r["monitored"]),
         sum(r["bits_sent"]), " ".join(f"{n}:{k}@{t}" for n, k, t in r["deviations"])]
        for r in trace.summary_rows()
    ]
    out.write("summary.csv", table_text(["stage", "messages", "verdicts", "monitored", "bits_sent", "deviations"],
                                        rows), show=True)
    urows = [[u.node, u.stage, u.benefit_events, u.bits_sent, u.realized_u] for u in utility_report(trace)]
    out.write("utilities.csv", table_text(["node", "stage", "benefit_events", "bits_sent", "realized_u"], urows))
    if args.trace:
        trace.export(args.trace)


def cmd_reliability(args, out: Output):
    from .analysis import reliability_exact, reliability_mc

    cfgs = build_configs(args, multi=True)
    out.write("config.txt", config_text(cfgs))
    rows = []
    for cfg in cfgs:
        rel = reliability_exact(cfg)
        est, hw = reliability_mc(cfg, args.trials)
        agree = abs(est - float(rel.q)) <= 3 * hw
        rows.append([cfg.n, cfg.f, cfg.delta_exp, str(rel.q), float(rel.q), est, hw, "yes" if agree else "no"])
    out.write("reliability.csv", table_text(
        ["n", "f", "delta_exp", "q_exact", "q_exact_float", "q_mc", "mc_halfwidth_99", "agree"], rows), show=True)


def _estimate_rows(cfg, kinds, replicates):
    from .analysis import default_plan, delta_batch

    groups = {}
    for kind in kinds:
        plan, hist = default_plan(kind, cfg)
        groups.setdefault(hist, []).append((kind, plan))
    est = {}
    for hist, items in groups.items():
        res = delta_batch(cfg, [p for _, p in items], replicates, hist, False, [k for k, _ in items])
        est.update({k: e for (k, _), e in zip(items, res)})
    return [est[k] for k in kinds]


def cmd_check_equilibrium(args, out: Output):
    from .analysis import KINDS

    (cfg,) = build_configs(args)
    out.write("config.txt", config_text([cfg]))
    kinds = args.kind or list(KINDS)
    tol = args.tol * float(cfg.beta)
    rows = [[e.kind, e.mean, e.half_width, e.lower, e.upper, e.replicates, "PASS" if e.passes(tol) else "FAIL"]
            for e in _estimate_rows(cfg, kinds, args.replicates)]
    out.write("equilibrium.csv", table_text(
        ["deviation", "delta_mean", "ci_halfwidth_99", "ci_lower", "ci_upper", "replicates", "result"], rows),
        show=True)


def cmd_sweep(args, out: Output):
    from .analysis import KINDS

    cfgs = build_configs(args, multi=True)
    out.write("config.txt", config_text(cfgs))
    kinds = args.kind or list(KINDS)
    rows, passing = [], {}
    for cfg in cfgs:
        tol = args.tol * float(cfg.beta)
        ratio = cfg.beta / (cfg.gamma * cfg.f)
        ests = _estimate_rows(cfg, kinds, args.replicates)
        for e in ests:
            rows.append([cfg.n, cfg.f, cfg.rho, cfg.delta_exp, cfg.p_mon, cfg.beta, ratio, e.kind, e.mean,
                         e.half_width, "PASS" if e.passes(tol) else "FAIL"])
        key = (cfg.n, cfg.f, cfg.rho, cfg.delta_exp, cfg.p_mon)
        passing.setdefault(key, []).append((ratio, all(e.passes(tol) for e in ests)))
    out.write("sweep.csv", table_text(
        ["n", "f", "rho", "delta_exp", "p_mon", "beta", "beta_ratio", "deviation", "delta_mean",
         "ci_halfwidth_99", "result"], rows), show=True)
    # empirical threshold: smallest swept beta/(gamma f) from which every larger swept ratio passes
    trows = []
    for key, items in passing.items():
        items.sort()
        thr = None
        for ratio, ok in reversed(items):
            if not ok:
                break
            thr = ratio
        trows.append([*key, "" if thr is None else thr])
    out.write("threshold.csv", table_text(["n", "f", "rho", "delta_exp", "p_mon", "min_passing_beta_ratio"],
                                          trows))


def cmd_gap(args, out: Output):
    from .analysis import theorem1_gap

    cfgs = build_configs(args, multi=True)
    out.write("config.txt", config_text(cfgs))
    rows = []
    for cfg in cfgs:
        g = theorem1_gap(cfg, args.stages)
        rows.append([cfg.rho, g.stages, g.avg_utility, g.se, g.ubar, g.gap, g.monitoring_bits,
                     g.monitoring_bits_max, g.bound])
    out.write("gap.csv", table_text(
        ["rho", "stages", "avg_utility", "se", "ubar", "gap", "monitoring_bits_mean", "monitoring_bits_max",
         "monitoring_bound"], rows), show=True)


COMMANDS = {
    "simulate": cmd_simulate,
    "reliability": cmd_reliability,
    "check-equilibrium": cmd_check_equilibrium,
    "sweep": cmd_sweep,
    "gap": cmd_gap,
}


def make_parser() -> argparse.ArgumentParser:
    from .analysis import KINDS

    p = argparse.ArgumentParser(prog="mediated-gossip", description="Mediated gossip experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("overrides", nargs="*", metavar="key=value")
        s.add_argument("--config", help="flat key=value config file")
        s.add_argument("--out", help="directory for result files")
        s.add_argument("--seed", type=lambda x: int(x, 0), help=f"master seed (overrides ${SEED_ENV})")
        if name in ("check-equilibrium", "sweep"):
            s.add_argument("--replicates", type=int, default=200)
            s.add_argument("--tol", type=float, default=1e-6, help="pass if CI lower >= -tol*beta")
        if name in ("simulate", "check-equilibrium", "sweep"):
            s.add_argument("--kind", action="append", choices=KINDS + ("FalsifyReport",))
        if name == "simulate":
            s.add_argument("--stages", type=int, default=3)
            s.add_argument("--trace", help="write the full trace as JSON lines")
        if name == "gap":
            s.add_argument("--stages", type=int, default=200)
        if name == "reliability":
            s.add_argument("--trials", type=int, default=10**4)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    # overrides may also follow the flags
    bad = [x for x in extra if x.startswith("-") or "=" not in x]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = list(args.overrides) + extra
    try:
        out = Output(args.out)
        COMMANDS[args.command](args, out)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
