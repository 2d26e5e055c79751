"""Branch and bound over ReLU splits with optimized LiRPA bounding and LP fallback."""
from __future__ import annotations

import enum
import itertools
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .alpha_opt import INITIAL_CONFIG, NODE_CONFIG, OptimizerConfig, batch_optimize_alpha
from .lirpa import (FREE, NEG, POS, AlphaParams, BoundResult, IntermediateBounds, SplitAssignment,
                    batch_output_bounds)
from .lp import input_point, lp_bound
from .model import Network, PropertySpec, forward, merge_property
from .simplex import LPStatus


class VerifierError(ValueError):
    pass


class Status(enum.Enum):
    VERIFIED = "VERIFIED"
    FALSIFIED = "FALSIFIED"
    TIMEOUT = "TIMEOUT"
    INCOMPLETE_MODE_EXHAUSTED = "INCOMPLETE_MODE_EXHAUSTED"


EXIT_CODES = {Status.VERIFIED: 0, Status.FALSIFIED: 1, Status.TIMEOUT: 2, Status.INCOMPLETE_MODE_EXHAUSTED: 3}


@dataclass
class SubDomain:
    id: int
    parent_id: int | None
    splits: SplitAssignment
    f_lb: float
    f_ub: float
    alpha: AlphaParams
    ibounds: IntermediateBounds
    depth: int
    lp_checked: bool = False
    x_star: np.ndarray | None = None
    lambdas: list = field(default_factory=list)

    def free_unstable(self) -> list[np.ndarray]:
        return self.ibounds.unstable(self.splits)

    @property
    def exhausted(self) -> bool:
        return not any(m.any() for m in self.free_unstable())


class DomainSet:
    """Unverified sub-domains keyed by id; iteration order is ``(f_lb, id)``."""

    def __init__(self):
        self._items: dict[int, SubDomain] = {}

    def __len__(self):
        return len(self._items)

    def __contains__(self, dom_id):
        return dom_id in self._items

    def __iter__(self):
        return iter(self.ordered())

    def add(self, d: SubDomain):
        if d.f_lb >= 0:
            raise VerifierError(f"domain {d.id} has f_lb >= 0 and cannot enter the unverified set")
        self._items[d.id] = d

    def remove(self, dom_id) -> SubDomain | None:
        return self._items.pop(dom_id, None)

    def get(self, dom_id) -> SubDomain | None:
        return self._items.get(dom_id)

    def ordered(self) -> list[SubDomain]:
        return sorted(self._items.values(), key=lambda d: (d.f_lb, d.id))

    def lower_bound(self) -> float:
        return min((d.f_lb for d in self._items.values()), default=np.inf)

    def upper_bound(self) -> float:
        return min((d.f_ub for d in self._items.values()), default=np.inf)


@dataclass
class VerifierConfig:
    batch_size: int = 16
    lp_threshold: int = 512
    timeout: float = 60.0
    thread_count: int = 1
    init_optimizer: OptimizerConfig = INITIAL_CONFIG
    node_optimizer: OptimizerConfig = NODE_CONFIG
    disable_alpha_opt: bool = False
    force_batch_size_1: bool = False
    disable_lp_fallback: bool = False
    lp_every_node: bool = False  # reference mode: LP-bound every surviving child
    record_events: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise VerifierError("batch_size must be >= 1")
        if self.lp_threshold < 2 * self.batch_size:
            raise VerifierError(f"lp_threshold ({self.lp_threshold}) must be >= 2 * batch_size ({2 * self.batch_size})")
        if not self.timeout > 0:
            raise VerifierError("timeout must be positive")
        if self.thread_count < 1:
            raise VerifierError("thread_count must be >= 1")

    @property
    def effective_batch(self) -> int:
        return 1 if self.force_batch_size_1 else self.batch_size

    def to_dict(self) -> dict:
        def opt(c):
            return {"iterations": c.iterations, "step_size": c.step_size, "decay": c.decay, "patience": c.patience}
        return {
            "batch_size": self.batch_size, "lp_threshold": self.lp_threshold, "timeout": self.timeout,
            "thread_count": self.thread_count, "init_optimizer": opt(self.init_optimizer),
            "node_optimizer": opt(self.node_optimizer), "disable_alpha_opt": self.disable_alpha_opt,
            "force_batch_size_1": self.force_batch_size_1, "disable_lp_fallback": self.disable_lp_fallback,
            "lp_every_node": self.lp_every_node,
        }


@dataclass
class Stats:
    branches: int = 0
    lp_calls: int = 0
    lp_infeasible: int = 0
    lp_proved: int = 0
    backtrack_prunes: int = 0
    verified_by_bounds: int = 0
    empty_by_bounds: int = 0
    max_domains: int = 0
    wall_time: float = 0.0
    timing: dict = field(default_factory=lambda: {"bounding": 0.0, "lp": 0.0, "branching": 0.0, "other": 0.0})
    trace: list = field(default_factory=list)  # (iteration, f_lb, f_ub, |P|)
    infeasible_leaves: list = field(default_factory=list)
    events: list = field(default_factory=list)


@dataclass
class Verdict:
    status: Status
    f_lb: float
    f_ub: float
    witness: np.ndarray | None = None
    witness_value: float | None = None
    stats: Stats = field(default_factory=Stats)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]


# ---------------------------------------------------------------- branching

def babsr_scores(net: Network, domain: SubDomain, ibounds: IntermediateBounds | None = None) -> list[np.ndarray]:
    """``|lambda| * u(-l)/(u-l)`` per neuron; zero where the neuron is not unstable FREE."""
    ib = domain.ibounds if ibounds is None else ibounds
    masks = ib.unstable(domain.splits)
    scores = []
    for k, m in enumerate(masks):
        l, u = ib.lower[k], ib.upper[k]
        lam = domain.lambdas[k] if k < len(domain.lambdas) else np.ones_like(l)
        s = np.zeros_like(l)
        with np.errstate(invalid="ignore", divide="ignore"):
            s[m] = np.abs(lam[m]) * u[m] * (-l[m]) / (u[m] - l[m])
        scores.append(s)
    return scores


def choose_neuron(net: Network, domain: SubDomain) -> tuple[int, int]:
    """Highest score, then shallower layer, then smaller index."""
    masks = domain.free_unstable()
    scores = babsr_scores(net, domain)
    best, best_key = None, None
    for k, (m, s) in enumerate(zip(masks, scores)):
        for j in np.flatnonzero(m):
            key = (-s[j], k, j)
            if best_key is None or key < best_key:
                best, best_key = (k, int(j)), key
    if best is None:
        raise VerifierError(f"domain {domain.id} has no unstable FREE neuron to split")
    return best


def batch_pick_out(P: DomainSet, n: int, net: Network) -> list[tuple[SubDomain, tuple[int, int]]]:
    """Remove the ``min(n, |P|)`` worst domains and pick a split neuron for each."""
    picked = []
    for d in P.ordered():
        if len(picked) == n:
            break
        if d.exhausted:
            continue
        P.remove(d.id)
        picked.append((d, choose_neuron(net, d)))
    return picked


def batch_split(picked, next_id) -> list[tuple[SubDomain, int]]:
    """Children as ``(parent, new splits, new id)``: POS child first, then NEG."""
    out = []
    for d, (k, j) in picked:
        if d.splits.get(k, j) != FREE:
            raise VerifierError(f"neuron ({k},{j}) already split in domain {d.id}")
        for state in (POS, NEG):
            out.append((d, d.splits.with_split(k, j, state), next(next_id)))
    return out


# ---------------------------------------------------------------- verifier

class _Run:
    def __init__(self, net: Network, lower, upper, cfg: VerifierConfig):
        self.net = net
        self.lo = np.asarray(lower, dtype=np.float64)
        self.hi = np.asarray(upper, dtype=np.float64)
        self.cfg = cfg
        self.stats = Stats()
        self.P = DomainSet()
        self.stuck = DomainSet()  # exhausted domains nobody could resolve
        self.archive: dict[int, SubDomain] = {}
        self.children: dict[int, list[int]] = {}
        self.resolved_min = np.inf  # lower bounds of leaves dropped as verified
        self.ids = itertools.count()
        self.witness = None
        self._lock = threading.Lock()
        self.t0 = time.perf_counter()

    # -- helpers
    def _tick(self, phase, t):
        now = time.perf_counter()
        self.stats.timing[phase] += now - t
        return now

    def _event(self, kind, d, **kw):
        if self.cfg.record_events:
            self.stats.events.append({"event": kind, "id": d.id, "parent": d.parent_id, "depth": d.depth,
                                      "f_lb": d.f_lb, **kw})

    def confirm(self, x) -> bool:
        """Accept ``x`` as a counterexample only if it lies in the box and evaluates < 0."""
        if x is None or self.witness is not None:
            return self.witness is not None
        x = np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)
        v = float(forward(self.net, x)[0])
        if v < 0:
            with self._lock:
                if self.witness is None:
                    self.witness = (x, v)
            return True
        return False

    def probe(self, r: BoundResult) -> bool:
        return r.f_lb < 0 and self.confirm(r.x_star)

    def bound(self, items) -> list[BoundResult]:
        """``items``: ``(splits, alpha, parent_ibounds)`` tuples."""
        cfg = self.cfg
        if cfg.disable_alpha_opt:
            return batch_output_bounds(self.net, items, self.lo, self.hi, threads=cfg.thread_count)
        res = batch_optimize_alpha(self.net, items, self.lo, self.hi, cfg.node_optimizer, threads=cfg.thread_count,
                                   probe=self.probe)
        return [r.bounds for r in res]

    def make(self, parent: SubDomain | None, splits, r: BoundResult, dom_id) -> SubDomain:
        d = SubDomain(dom_id, None if parent is None else parent.id, splits, r.f_lb, r.f_ub, r.alpha,
                      r.ibounds, 0 if parent is None else parent.depth + 1, x_star=r.x_star, lambdas=r.lambdas)
        self.archive[d.id] = d
        if parent is not None:
            self.children.setdefault(parent.id, []).append(d.id)
        return d

    def run_lp(self, d: SubDomain):
        t = time.perf_counter()
        out = lp_bound(self.net, d.splits, d.ibounds, self.lo, self.hi)
        self.stats.lp_calls += 1
        d.lp_checked = True
        self._tick("lp", t)
        if out.status is LPStatus.OPTIMAL:
            self.confirm(input_point(out, self.net))
        return out

    def lp_resolves(self, d: SubDomain) -> bool:
        """LP-check ``d``; True if it is proved (value >= 0) or infeasible."""
        out = self.run_lp(d)
        if out.status is LPStatus.INFEASIBLE:
            self.stats.lp_infeasible += 1
            self.stats.infeasible_leaves.append(d.splits.to_json())
            self._event("lp_infeasible", d)
            return True
        if out.status is LPStatus.OPTIMAL:
            if out.value >= 0:
                self.stats.lp_proved += 1
                self.resolved_min = min(self.resolved_min, out.value)
                self._event("lp_proved", d, lp=out.value)
                return True
            d.f_lb = max(d.f_lb, out.value)
        return False

    def descendants(self, dom_id):
        stack = list(self.children.get(dom_id, []))
        while stack:
            c = stack.pop()
            yield c
            stack.extend(self.children.get(c, []))

    def backtrack(self, d: SubDomain):
        """After ``d`` is resolved by LP, try its parent and prune the parent's subtree."""
        if d.parent_id is None:
            return
        parent = self.archive[d.parent_id]
        if parent.lp_checked:
            return
        if self.lp_resolves(parent):
            for c in self.descendants(parent.id):
                if self.P.remove(c) is not None or self.stuck.remove(c) is not None:
                    self.stats.backtrack_prunes += 1

    def settle(self, d: SubDomain):
        """Route a freshly bounded domain: verified, counterexample, LP leaf, or back into P."""
        st = self.stats
        if d.f_lb == np.inf:  # empty by bounds
            st.empty_by_bounds += 1
            self._event("empty", d)
            return
        if d.f_lb >= 0:
            st.verified_by_bounds += 1
            self.resolved_min = min(self.resolved_min, d.f_lb)
            self._event("verified", d)
            return
        if self.confirm(d.x_star):
            return
        if d.exhausted:
            if self.cfg.disable_lp_fallback:
                self.stuck.add(d)
                return
            if self.lp_resolves(d):
                self.backtrack(d)
                return
            if self.witness is not None:
                return
            # an LP on a fully split domain is exact; a negative value without a
            # confirmed witness only happens at round-off level
            self.stuck.add(d)
            return
        if self.cfg.lp_every_node and not self.cfg.disable_lp_fallback:
            if self.lp_resolves(d):
                self.backtrack(d)
                return
            if self.witness is not None:
                return
        self.P.add(d)

    def lp_fallback(self, recent: list[int]):
        """LP-check the most recent children still unverified, backtracking on success."""
        for dom_id in recent:
            d = self.P.get(dom_id)
            if d is None or d.lp_checked:
                continue
            if self.lp_resolves(d):
                self.P.remove(d.id)
                self.backtrack(d)
            if self.witness is not None:
                return

    def global_lb(self) -> float:
        """Lower bound over the whole box: open domains plus leaves already resolved."""
        return min(self.P.lower_bound(), self.stuck.lower_bound(), self.resolved_min)

    def record(self, it):
        self.stats.trace.append((it, self.global_lb(), min(self.P.upper_bound(), self.stuck.upper_bound()),
                                 len(self.P)))
        self.stats.max_domains = max(self.stats.max_domains, len(self.P))

    def finish(self, status, f_lb=None, f_ub=None) -> Verdict:
        st = self.stats
        st.wall_time = time.perf_counter() - self.t0
        st.timing["other"] = max(0.0, st.wall_time - sum(v for k, v in st.timing.items() if k != "other"))
        if f_lb is None:
            f_lb = self.global_lb()
        if f_ub is None:
            f_ub = min(self.P.upper_bound(), self.stuck.upper_bound())
        w = self.witness
        return Verdict(status, float(f_lb), float(f_ub), None if w is None else w[0], None if w is None else w[1], st)

    def falsified(self) -> Verdict:
        return self.finish(Status.FALSIFIED, f_lb=min(self.global_lb(), self.witness[1]), f_ub=self.witness[1])

    def verified(self) -> Verdict:
        return self.finish(Status.VERIFIED, f_lb=self.resolved_min, f_ub=np.nan)

    def timed_out(self) -> bool:
        return time.perf_counter() - self.t0 > self.cfg.timeout

    # -- main loop
    def go(self) -> Verdict:
        cfg = self.cfg
        net = self.net
        t = time.perf_counter()
        root_splits = SplitAssignment.free(net)
        if cfg.disable_alpha_opt:
            r = batch_output_bounds(net, [(root_splits, None)], self.lo, self.hi)[0]
        else:
            r = batch_optimize_alpha(net, [(root_splits, None)], self.lo, self.hi, cfg.init_optimizer,
                                     probe=self.probe)[0].bounds
        t = self._tick("bounding", t)
        root = self.make(None, root_splits, r, next(self.ids))
        self.confirm((self.lo + self.hi) / 2)
        if self.witness is not None:
            return self.falsified()
        self.settle(root)
        self.record(0)
        it = 0
        while True:
            if self.witness is not None:
                return self.falsified()
            if len(self.P) == 0:
                if len(self.stuck) == 0:
                    return self.verified()
                return self.finish(Status.INCOMPLETE_MODE_EXHAUSTED)
            if self.timed_out():
                return self.finish(Status.TIMEOUT)
            it += 1
            t = time.perf_counter()
            picked = batch_pick_out(self.P, cfg.effective_batch, net)
            kids = batch_split(picked, self.ids)
            self.stats.branches += len(picked)
            t = self._tick("branching", t)
            results = self.bound([(s, p.alpha, p.ibounds) for p, s, _ in kids])
            t = self._tick("bounding", t)
            lp_before = self.stats.timing["lp"]
            new = []
            for (p, s, cid), r in zip(kids, results):
                d = self.make(p, s, r, cid)
                new.append(d.id)
                self.settle(d)
                if self.witness is not None:
                    break
            if self.witness is None and not cfg.disable_lp_fallback and len(self.P) > cfg.lp_threshold:
                self.lp_fallback(new[-2 * cfg.effective_batch:])
            self._tick("branching", t)
            self.stats.timing["branching"] -= self.stats.timing["lp"] - lp_before
            self.record(it)


def verify(net: Network, prop: PropertySpec, cfg: VerifierConfig | None = None) -> Verdict:
    """Decide ``c.f(x) + d >= 0`` on the property's box.

    The property is merged into the last layer first, so bounds, LPs and
    witnesses all refer to the scalar margin.
    """
    cfg = VerifierConfig() if cfg is None else cfg
    cfg.validate()
    prop.check_against(net)
    g = merge_property(net, prop)
    return _Run(g, prop.lower, prop.upper, cfg).go()
