"""Triangle-relaxation LP for a sub-domain, and LP-based bounding/feasibility."""
from __future__ import annotations

import numpy as np

from .lirpa import FREE, NEG, POS, IntermediateBounds, SplitAssignment
from .model import Network
from .simplex import FEAS_TOL, LPOutcome, LPProblem, LPStatus, solve_lp

__all__ = ["LPProblem", "LPOutcome", "LPStatus", "build_lp", "solve_lp", "lp_bound", "input_point"]


class LPBuildError(ValueError):
    pass


def build_lp(net: Network, splits: SplitAssignment, ibounds: IntermediateBounds, lower, upper) -> LPProblem:
    """LP whose optimum lower-bounds the scalar output over the sub-domain.

    Variables are ordered inputs, then ``h``/``g`` per hidden layer, then the
    output. Rows named ``neg_*`` encode NEG splits (``h <= 0``).
    """
    if net.output_dim != 1:
        raise LPBuildError("build_lp needs a scalar-output network (merge the property first)")
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    p = LPProblem()
    prev = [p.add_var(f"x{d}", lo[d], hi[d]) for d in range(net.input_dim)]
    states = splits.arrays()
    for k, layer in enumerate(net.layers[:-1]):
        if k >= len(ibounds.lower):
            raise LPBuildError(f"missing intermediate bounds for hidden layer {k}")
        h = [p.add_var(f"h{k}_{j}") for j in range(layer.out_dim)]
        g = [p.add_var(f"g{k}_{j}") for j in range(layer.out_dim)]
        for j in range(layer.out_dim):
            row = {h[j]: 1.0}
            for i, w in enumerate(layer.weight[j]):
                row[prev[i]] = row.get(prev[i], 0.0) - w
            p.add_row(row, "=", layer.bias[j], f"aff{k}_{j}")
        l = np.asarray(ibounds.lower[k], dtype=np.float64)
        u = np.asarray(ibounds.upper[k], dtype=np.float64)
        s = states[k]
        for j in range(layer.out_dim):
            lj = max(l[j], 0.0) if s[j] == POS else l[j]
            uj = min(u[j], 0.0) if s[j] == NEG else u[j]
            if s[j] == NEG or (s[j] == FREE and uj <= 0):
                p.add_row({g[j]: 1.0}, "=", 0.0, f"off{k}_{j}")
                p.add_row({h[j]: 1.0}, "<=", 0.0, f"{'neg' if s[j] == NEG else 'inact'}{k}_{j}")
            elif s[j] == POS or lj >= 0:
                p.add_row({g[j]: 1.0, h[j]: -1.0}, "=", 0.0, f"on{k}_{j}")
                p.add_row({h[j]: 1.0}, ">=", 0.0, f"{'pos' if s[j] == POS else 'act'}{k}_{j}")
            else:
                slope = uj / (uj - lj)
                p.add_row({g[j]: 1.0, h[j]: -1.0}, ">=", 0.0, f"tri_a{k}_{j}")
                p.add_row({g[j]: 1.0}, ">=", 0.0, f"tri_b{k}_{j}")
                p.add_row({g[j]: 1.0, h[j]: -slope}, "<=", -slope * lj, f"tri_c{k}_{j}")
        prev = g
    last = net.layers[-1]
    y = p.add_var("y")
    row = {y: 1.0}
    for i, w in enumerate(last.weight[0]):
        row[prev[i]] = row.get(prev[i], 0.0) - w
    p.add_row(row, "=", last.bias[0], "out")
    p.objective = {y: 1.0}
    return p


def strictly_feasible(prob: LPProblem, margin_tol: float = FEAS_TOL) -> bool:
    """True if the NEG rows can hold with ``h < 0`` (not just ``h <= 0``).

    Solves ``max t`` with every ``neg_*`` row tightened to ``h + t <= 0``.
    """
    neg_rows = [i for i, name in enumerate(prob.row_names) if name.startswith("neg")]
    if not neg_rows:
        return True
    q = LPProblem(list(prob.var_names), list(prob.var_lb), list(prob.var_ub),
                  [dict(r) for r in prob.rows], list(prob.senses), list(prob.rhs), list(prob.row_names))
    t = q.add_var("margin", 0.0, 1.0)
    for i in neg_rows:
        q.rows[i][t] = 1.0
    q.objective = {t: -1.0}
    out = solve_lp(q)
    if out.status is LPStatus.NUMERICAL_FAILURE:
        return True  # conservative: never prune on numerical trouble
    return out.optimal and -out.value > margin_tol


def lp_bound(net: Network, splits: SplitAssignment, ibounds: IntermediateBounds, lower, upper,
             strict: bool = True) -> LPOutcome:
    """Build and solve the sub-domain LP.

    OPTIMAL carries a sound lower bound of the output over the sub-domain.
    INFEASIBLE means the split constraints admit no input; with ``strict`` the
    open constraints ``h < 0`` of NEG splits are honoured, so a domain that
    only touches ``h = 0`` is also reported INFEASIBLE.
    """
    prob = build_lp(net, splits, ibounds, lower, upper)
    out = solve_lp(prob)
    if strict and out.optimal and splits.num_split and not strictly_feasible(prob):
        return LPOutcome(LPStatus.INFEASIBLE, pivots=out.pivots)
    return out


def input_point(out: LPOutcome, net: Network) -> np.ndarray | None:
    """Input part of an LP primal point."""
    if out.x is None:
        return None
    return np.array(out.x[:net.input_dim])
