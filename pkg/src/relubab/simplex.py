"""Dense two-phase primal simplex with Bland's rule.

Problems are stated over bounded or free variables with ``<=``, ``>=`` and
``=`` rows; they are rewritten into standard form ``A z = b, z >= 0``
internally and the optimal vertex is mapped back.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

FEAS_TOL = 1e-8
OPT_TOL = 1e-8
PIVOT_TOL = 1e-9
MAX_PIVOTS = 10**6


class LPStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class LPOutcome:
    status: LPStatus
    value: float = np.nan
    x: np.ndarray | None = None
    pivots: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is LPStatus.OPTIMAL


@dataclass
class LPProblem:
    """``min c.x + c0`` subject to rows and variable bounds."""

    var_names: list[str] = field(default_factory=list)
    var_lb: list[float] = field(default_factory=list)
    var_ub: list[float] = field(default_factory=list)
    rows: list[dict[int, float]] = field(default_factory=list)
    senses: list[str] = field(default_factory=list)
    rhs: list[float] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    objective_const: float = 0.0

    @property
    def num_vars(self) -> int:
        return len(self.var_names)

    def add_var(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        self.var_names.append(name)
        self.var_lb.append(float(lb))
        self.var_ub.append(float(ub))
        return len(self.var_names) - 1

    def add_row(self, coeffs: dict[int, float], sense: str, rhs: float, name: str | None = None) -> int:
        if sense not in ("<=", ">=", "="):
            raise ValueError(f"unknown row sense {sense!r}")
        for j in coeffs:
            if not 0 <= j < self.num_vars:
                raise ValueError(f"row references undeclared variable {j}")
        self.rows.append({j: float(v) for j, v in coeffs.items() if v != 0.0})
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self.row_names.append(name or f"c{len(self.rows) - 1}")
        return len(self.rows) - 1

    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        A = np.zeros((len(self.rows), self.num_vars))
        for i, row in enumerate(self.rows):
            for j, v in row.items():
                A[i, j] = v
        c = np.zeros(self.num_vars)
        for j, v in self.objective.items():
            c[j] = v
        return A, np.array(self.rhs, dtype=np.float64), c

    def violation(self, x: np.ndarray) -> float:
        """Largest violation of any row or bound at ``x``."""
        A, b, _ = self.dense()
        worst = 0.0
        if A.shape[0]:
            r = A @ x - b
            s = np.array(self.senses)
            worst = max(worst, float(np.max(np.where(s == "<=", r, 0.0), initial=0.0)))
            worst = max(worst, float(np.max(np.where(s == ">=", -r, 0.0), initial=0.0)))
            worst = max(worst, float(np.max(np.where(s == "=", np.abs(r), 0.0), initial=0.0)))
        lb, ub = np.array(self.var_lb), np.array(self.var_ub)
        worst = max(worst, float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)))
        return worst

    def to_lp_format(self) -> str:
        """Plain-text dump in the CPLEX LP style, for cross-checking with other solvers.

        Grammar: ``Minimize`` / ``obj: <terms> [+ const]`` / ``Subject To`` /
        ``<name>: <terms> (<=|>=|=) <rhs>`` ... / ``Bounds`` /
        ``<lb> <= <var> <= <ub>`` or ``<var> free`` / ``End``; a term is
        ``<+|-> <coef> <var>``.
        """
        def terms(row):
            if not row:
                return "0 " + self.var_names[0] if self.var_names else "0"
            return " ".join(f"{'-' if v < 0 else '+'} {abs(v):.17g} {self.var_names[j]}" for j, v in sorted(row.items()))

        lines = ["Minimize", f" obj: {terms(self.objective)}"
                 + (f" + {self.objective_const:.17g}" if self.objective_const else ""), "Subject To"]
        for name, row, s, r in zip(self.row_names, self.rows, self.senses, self.rhs):
            lines.append(f" {name}: {terms(row)} {s} {r:.17g}")
        lines.append("Bounds")
        for name, lb, ub in zip(self.var_names, self.var_lb, self.var_ub):
            if np.isinf(lb) and np.isinf(ub):
                lines.append(f" {name} free")
            else:
                lo = "-inf" if np.isinf(lb) else f"{lb:.17g}"
                hi = "+inf" if np.isinf(ub) else f"{ub:.17g}"
                lines.append(f" {lo} <= {name} <= {hi}")
        lines.append("End")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- standard form

def _standard_form(prob: LPProblem):
    A, b, c = prob.dense()
    m, n = A.shape
    lb, ub = np.array(prob.var_lb, dtype=np.float64), np.array(prob.var_ub, dtype=np.float64)
    if np.any(lb > ub):
        return None
    # x = S z + s0 with z >= 0
    cols, offs = [], np.zeros(n)
    extra_rows = []  # (z column, upper limit)
    for j in range(n):
        if np.isfinite(lb[j]):
            offs[j] = lb[j]
            cols.append((j, 1.0))
            if np.isfinite(ub[j]):
                extra_rows.append((len(cols) - 1, ub[j] - lb[j]))
        elif np.isfinite(ub[j]):
            offs[j] = ub[j]
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    S = np.zeros((n, len(cols)))
    for k, (j, s) in enumerate(cols):
        S[j, k] = s
    AS = A @ S
    rhs = b - A @ offs
    senses = list(prob.senses)
    nz = len(cols)
    if extra_rows:
        E = np.zeros((len(extra_rows), nz))
        for r, (k, lim) in enumerate(extra_rows):
            E[r, k] = 1.0
        AS = np.vstack([AS, E]) if AS.size or m else E
        rhs = np.concatenate([rhs, [lim for _, lim in extra_rows]])
        senses += ["<="] * len(extra_rows)
    M = AS.shape[0] if AS.ndim == 2 else 0
    if M == 0:
        AS = np.zeros((0, nz))
    n_slack = sum(s != "=" for s in senses)
    T = np.zeros((M, nz + n_slack))
    T[:, :nz] = AS
    slack_of_row = [-1] * M
    k = nz
    for i, s in enumerate(senses):
        if s == "<=":
            T[i, k] = 1.0
        elif s == ">=":
            T[i, k] = -1.0
        if s != "=":
            slack_of_row[i] = k
            k += 1
    neg = rhs < 0
    T[neg] *= -1
    rhs = np.where(neg, -rhs, rhs)
    cz = np.concatenate([S.T @ c, np.zeros(n_slack)])
    const = float(c @ offs) + prob.objective_const
    return T, rhs, cz, const, S, offs, slack_of_row


def _pivot(T, z, i, j):
    T[i] /= T[i, j]
    col = T[:, j].copy()
    col[i] = 0.0
    T -= np.outer(col, T[i])
    z -= z[j] * T[i]


def _run(T, z, basis, allowed, budget):
    """Bland's rule on tableau ``T = [A | b]`` with reduced-cost row ``z``."""
    pivots = 0
    N = T.shape[1] - 1
    while True:
        cand = np.flatnonzero((z[:N] < -OPT_TOL) & allowed)
        if cand.size == 0:
            return "optimal", pivots
        j = cand[0]
        col = T[:, j]
        ok = col > PIVOT_TOL
        if not ok.any():
            return "unbounded", pivots
        ratios = np.full(col.shape, np.inf)
        ratios[ok] = T[ok, -1] / col[ok]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + 1e-12 * max(1.0, abs(best)))
        i = ties[np.argmin(basis[ties])]
        _pivot(T, z, i, j)
        basis[i] = j
        pivots += 1
        if pivots >= budget:
            return "cap", pivots


def solve_lp(prob: LPProblem, max_pivots: int = MAX_PIVOTS) -> LPOutcome:
    """Minimise the objective; INFEASIBLE iff the phase-one optimum exceeds 1e-8."""
    sf = _standard_form(prob)
    if sf is None:
        return LPOutcome(LPStatus.INFEASIBLE)
    T0, b, cz, _, S, offs, slack_of_row = sf
    M, Nz = T0.shape
    # an initial basis: slacks with +1 where available, artificials elsewhere
    basis = np.full(M, -1)
    art_rows = []
    for i in range(M):
        k = slack_of_row[i]
        if k >= 0 and T0[i, k] == 1.0:
            basis[i] = k
        else:
            art_rows.append(i)
    n_art = len(art_rows)
    T = np.zeros((M, Nz + n_art + 1))
    T[:, :Nz] = T0
    T[:, -1] = b
    for a, i in enumerate(art_rows):
        T[i, Nz + a] = 1.0
        basis[i] = Nz + a
    is_art = np.zeros(Nz + n_art, dtype=bool)
    is_art[Nz:] = True
    pivots = 0

    if n_art:
        z = np.zeros(Nz + n_art + 1)
        z[Nz:Nz + n_art] = 1.0
        for i in art_rows:
            z -= T[i]
        status, p = _run(T, z, basis, np.ones(Nz + n_art, dtype=bool), max_pivots)
        pivots += p
        if status == "cap":
            return LPOutcome(LPStatus.NUMERICAL_FAILURE, pivots=pivots)
        if -z[-1] > FEAS_TOL:
            return LPOutcome(LPStatus.INFEASIBLE, pivots=pivots)
        # drive artificials out of the basis; drop redundant rows
        keep = np.ones(M, dtype=bool)
        for i in range(M):
            if is_art[basis[i]]:
                nz = np.flatnonzero((np.abs(T[i, :Nz]) > PIVOT_TOL))
                if nz.size:
                    _pivot(T, z, i, nz[0])
                    basis[i] = nz[0]
                    pivots += 1
                else:
                    keep[i] = False
        T = T[keep]
        basis = basis[keep]
        T = np.hstack([T[:, :Nz], T[:, -1:]])

    z = np.concatenate([cz, [0.0]])
    for i, j in enumerate(basis):
        if z[j] != 0.0:
            z -= z[j] * T[i]
    status, p = _run(T, z, basis, np.ones(Nz, dtype=bool), max_pivots - pivots)
    pivots += p
    if status == "cap":
        return LPOutcome(LPStatus.NUMERICAL_FAILURE, pivots=pivots)
    if status == "unbounded":
        return LPOutcome(LPStatus.UNBOUNDED, value=-np.inf, pivots=pivots)

    # recover the vertex from the original columns for accuracy
    zs = np.zeros(Nz)
    if basis.size:
        Bm = T0[:, basis] if T0.shape[0] == basis.size else None
        try:
            zs[basis] = np.linalg.solve(Bm, b) if Bm is not None else T[:, -1]
        except np.linalg.LinAlgError:
            zs[basis] = T[:, -1]
    zs = np.maximum(zs, 0.0)
    x = S @ zs[:S.shape[1]] + offs
    if prob.violation(x) > 1e-7 * (1.0 + np.abs(x).max(initial=0.0)):
        zs2 = np.zeros(Nz)
        zs2[basis] = np.maximum(T[:, -1], 0.0)
        x2 = S @ zs2[:S.shape[1]] + offs
        if prob.violation(x2) > 1e-7 * (1.0 + np.abs(x2).max(initial=0.0)):
            return LPOutcome(LPStatus.NUMERICAL_FAILURE, pivots=pivots)
        x = x2
    _, _, c = prob.dense()
    return LPOutcome(LPStatus.OPTIMAL, value=float(c @ x) + prob.objective_const, x=x, pivots=pivots)
