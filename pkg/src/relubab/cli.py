"""Command-line entry point: ``relubab {verify,bench,bounds,gen-corpus}``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .alpha_opt import INITIAL_CONFIG, NODE_CONFIG, optimize_alpha
from .bab import Status, VerifierConfig, VerifierError, verify
from .lirpa import SplitAssignment, compute_output_bounds
from .lp import lp_bound
from .model import ModelError, load_network, load_property, merge_property

EXIT_USAGE = 10
EXIT_DATA = 11
EXIT_INTERNAL = 12

TIMING_KEYS = ("bounding", "lp", "branching", "other")


class UsageError(Exception):
    pass


def _num(x):
    """JSON-safe float (infinities become strings, NaN becomes null)."""
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _add_solver_flags(p: argparse.ArgumentParser):
    p.add_argument("--batch-size", type=int, default=16, help="domains split per iteration (n)")
    p.add_argument("--eta", type=int, default=512, help="domain-set size that triggers the LP pass")
    p.add_argument("--timeout", type=float, default=60.0, help="wall-clock limit in seconds")
    p.add_argument("--threads", type=int, default=1, help="worker threads for bounding")
    p.add_argument("--alpha-iters-init", type=int, default=INITIAL_CONFIG.iterations)
    p.add_argument("--alpha-iters-node", type=int, default=NODE_CONFIG.iterations)
    p.add_argument("--lr", type=float, default=INITIAL_CONFIG.step_size, help="slope optimizer step size")
    p.add_argument("--seed", type=int, default=0, help="recorded in the report; the verifier itself is deterministic")
    p.add_argument("--no-alpha-opt", action="store_true", help="use heuristic slopes only")
    p.add_argument("--no-batch", action="store_true", help="split one domain per iteration")
    p.add_argument("--no-lp", action="store_true", help="disable the LP fallback (incomplete mode)")


def config_from_args(a) -> VerifierConfig:
    try:
        cfg = VerifierConfig(
            batch_size=a.batch_size, lp_threshold=a.eta, timeout=a.timeout, thread_count=a.threads,
            init_optimizer=replace(INITIAL_CONFIG, iterations=a.alpha_iters_init, step_size=a.lr),
            node_optimizer=replace(NODE_CONFIG, iterations=a.alpha_iters_node, step_size=a.lr),
            disable_alpha_opt=a.no_alpha_opt, force_batch_size_1=a.no_batch, disable_lp_fallback=a.no_lp,
        )
        cfg.validate()
    except (ValueError, VerifierError) as e:
        raise UsageError(str(e)) from e
    return cfg


def run_report(verdict, cfg: VerifierConfig, seed: int, net_path=None, prop_path=None) -> dict:
    st = verdict.stats
    timing = {k: st.timing[k] for k in TIMING_KEYS}
    timing["total"] = sum(timing.values())
    return {
        "tool": "relubab",
        "version": __version__,
        "net": None if net_path is None else str(net_path),
        "prop": None if prop_path is None else str(prop_path),
        "seed": seed,
        "config": cfg.to_dict(),
        "verdict": verdict.status.value,
        "exit_code": verdict.exit_code,
        "f_lb": _num(verdict.f_lb),
        "f_ub": _num(verdict.f_ub),
        "witness": None if verdict.witness is None else [float(v) for v in verdict.witness],
        "witness_value": _num(verdict.witness_value),
        "branches": st.branches,
        "lp_calls": st.lp_calls,
        "lp_infeasible": st.lp_infeasible,
        "lp_proved": st.lp_proved,
        "backtrack_prunes": st.backtrack_prunes,
        "infeasible_leaves": st.infeasible_leaves,
        "max_domains": st.max_domains,
        "trajectory": [{"iter": i, "f_lb": _num(lb), "f_ub": _num(ub), "domains": n} for i, lb, ub, n in st.trace],
        "timing": timing,
    }


def _load(net_path, prop_path):
    try:
        net = load_network(net_path)
        prop = load_property(prop_path)
        prop.check_against(net)
    except FileNotFoundError as e:
        raise UsageError(f"no such file: {e.filename}") from e
    return net, prop


def cmd_verify(a) -> int:
    cfg = config_from_args(a)
    net, prop = _load(a.net, a.prop)
    v = verify(net, prop, cfg)
    report = run_report(v, cfg, a.seed, a.net, a.prop)
    text = json.dumps(report, indent=1)
    if a.out:
        Path(a.out).write_text(text)
    line = f"{v.status.value} f_lb={v.f_lb:.6g} branches={v.stats.branches} lp_calls={v.stats.lp_calls}"
    if v.witness is not None:
        line += f" witness={[float(x) for x in v.witness]} value={v.witness_value:.6g}"
    print(line)
    return v.exit_code


MODES = {
    "plain": {"no_alpha_opt": True},
    "opt-nobatch": {"no_batch": True},
    "opt-batch": {},
    "lp-node": {"lp_every_node": True},
}


def cactus(rows, mode, solved_status=("VERIFIED", "FALSIFIED")) -> list[tuple[float, int]]:
    """Cumulative solved count against time for one mode."""
    times = sorted(r["time"] for r in rows if r["mode"] == mode and r["verdict"] in solved_status)
    return [(t, i + 1) for i, t in enumerate(times)]


def cmd_bench(a) -> int:
    from .oracle import read_corpus

    modes = a.modes.split(",")
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
    try:
        entries = read_corpus(a.manifest)
    except FileNotFoundError as e:
        raise UsageError(f"no such file: {e.filename}") from e
    if a.limit:
        entries = entries[:a.limit]
    rows = []
    for m in modes:
        ns = argparse.Namespace(**vars(a))
        flags = MODES[m]
        for k in ("no_alpha_opt", "no_batch"):
            setattr(ns, k, flags.get(k, getattr(a, k)))
        cfg = config_from_args(ns)
        cfg.lp_every_node = flags.get("lp_every_node", False)
        for e in entries:
            row = {"mode": m, "index": e["index"], "oracle": e.get("oracle")}
            t0 = time.perf_counter()
            try:
                v = verify(e["net_obj"], e["prop_obj"], cfg)
                row.update(verdict=v.status.value, branches=v.stats.branches, lp_calls=v.stats.lp_calls,
                           f_lb=v.f_lb, error="")
            except Exception as ex:  # recorded per row; the sweep continues
                row.update(verdict="ERROR", branches=0, lp_calls=0, f_lb=float("nan"), error=repr(ex))
            row["time"] = time.perf_counter() - t0
            rows.append(row)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = ["mode", "index", "oracle", "verdict", "time", "branches", "lp_calls", "f_lb", "error"]
    with out.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    cactus_path = out.with_name(out.stem + "_cactus.csv")
    with cactus_path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "time", "solved"])
        for m in modes:
            for t, n in cactus(rows, m):
                w.writerow([m, f"{t:.6f}", n])
    for m in modes:
        ts = [r["time"] for r in rows if r["mode"] == m]
        solved = sum(r["verdict"] in ("VERIFIED", "FALSIFIED") for r in rows if r["mode"] == m)
        print(f"{m}: solved {solved}/{len(ts)} median {np.median(ts):.4f}s total {sum(ts):.2f}s")
    return 0


def bounds_trace(net, prop, iterations: int, lr: float = INITIAL_CONFIG.step_size) -> list[dict]:
    """Optimized lower bound per iteration next to LPs on initial and optimized intermediate bounds."""
    g = merge_property(net, prop)
    splits = SplitAssignment.free(g)
    init = compute_output_bounds(g, splits, None, prop.lower, prop.upper)
    lp_init = lp_bound(g, splits, init.ibounds, prop.lower, prop.upper)
    cfg = replace(INITIAL_CONFIG, iterations=iterations, step_size=lr, patience=max(iterations, 1),
                  early_stop_verified=False)
    res = optimize_alpha(g, splits, None, prop.lower, prop.upper, cfg)
    lp_opt = lp_bound(g, splits, res.ibounds, prop.lower, prop.upper)
    return [{"iter": i, "lirpa": v, "lp_initial": lp_init.value, "lp_optimized": lp_opt.value}
            for i, v in enumerate(res.trace)]


def cmd_bounds(a) -> int:
    net, prop = _load(a.net, a.prop)
    if a.iters < 0:
        raise UsageError("--iters must be >= 0")
    rows = bounds_trace(net, prop, a.iters, a.lr)
    out = Path(a.out) if a.out else None
    fh = out.open("w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=["iter", "lirpa", "lp_initial", "lp_optimized"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if out:
            fh.close()
    last = rows[-1]
    if out:
        print(f"final lirpa={last['lirpa']:.6g} lp_initial={last['lp_initial']:.6g} "
              f"lp_optimized={last['lp_optimized']:.6g}")
    return 0


def cmd_gen_corpus(a) -> int:
    from .oracle import gen_instances, write_corpus

    if a.count < 1:
        raise UsageError("--count must be >= 1")
    inst = gen_instances(a.seed, a.count)
    path = write_corpus(inst, a.out, seed=a.seed)
    n_safe = sum(i.verdict.safe for i in inst)
    print(f"wrote {len(inst)} instances ({n_safe} SAFE) to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relubab", description="Complete ReLU network verification by branch and bound.")
    p.add_argument("--version", action="version", version=f"relubab {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    v = sub.add_parser("verify", help="verify one network/property pair")
    v.add_argument("--net", required=True)
    v.add_argument("--prop", required=True)
    v.add_argument("--out", help="write the JSON run report here")
    _add_solver_flags(v)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="run a corpus under several solver modes")
    b.add_argument("--manifest", required=True)
    b.add_argument("--modes", default="plain,opt-nobatch,opt-batch", help=f"comma list of {','.join(MODES)}")
    b.add_argument("--out", required=True, help="per-instance CSV; the cactus table goes next to it")
    b.add_argument("--limit", type=int, default=0)
    _add_solver_flags(b)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("bounds", help="optimized-bound trace against LP bounds on the root domain")
    t.add_argument("--net", required=True)
    t.add_argument("--prop", required=True)
    t.add_argument("--iters", type=int, default=200)
    t.add_argument("--lr", type=float, default=INITIAL_CONFIG.step_size)
    t.add_argument("--out")
    t.set_defaults(func=cmd_bounds)

    g = sub.add_parser("gen-corpus", help="write a seeded random corpus with exact verdicts")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            return 0
        return EXIT_USAGE
    try:
        return a.func(a)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover
        print(f"internal error: {e!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
