"""Projected gradient ascent on the LiRPA lower bound over the ReLU slopes."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Var
from .lirpa import (AlphaParams, BoundResult, IntermediateBounds, SplitAssignment, _box,
                    _propagate, _stack_frozen, _stack_inputs, _unpack)
from .model import Network


@dataclass(frozen=True)
class OptimizerConfig:
    iterations: int = 100
    step_size: float = 1.0
    decay: float = 0.98
    patience: int = 5
    early_stop_verified: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


INITIAL_CONFIG = OptimizerConfig(iterations=100)
NODE_CONFIG = OptimizerConfig(iterations=10)


@dataclass
class GradResult:
    value: float
    grad: np.ndarray  # aligned with AlphaParams.flat(masks)
    masks: list[np.ndarray]
    dense: list[np.ndarray] = field(default_factory=list)


@dataclass
class OptResult:
    alpha: AlphaParams
    f_lb: float
    ibounds: IntermediateBounds
    trace: list[float]
    bounds: BoundResult  # full result at the best iterate

    def __iter__(self):
        return iter((self.alpha, self.f_lb, self.ibounds, self.trace))


def _filled_alpha(net, domains, lo, hi, parent, frozen, states, alpha):
    """Resolve heuristic (NaN) slopes layer by layer before differentiating."""
    if not any(np.isnan(a).any() for a in alpha):
        return alpha
    out = _propagate(net, states, alpha, lo, hi, parent=parent, frozen=frozen,
                     need_upper=False, record_lambda=False, B=len(domains))
    return [np.array(a) for a in out["alpha"]]


def _value_and_grad(net, states, alpha, lo, hi, parent, frozen, B):
    leaves = [Var(a) for a in alpha]
    out = _propagate(net, states, leaves, lo, hi, parent=parent, frozen=frozen, B=B)
    f_lb = out["f_lb"]
    if isinstance(f_lb, Var):
        f_lb.backward()
    grads = [np.zeros_like(a) if v.grad is None else v.grad for a, v in zip(alpha, leaves)]
    return out, grads


def grad_lower_bound(net: Network, splits: SplitAssignment, alpha: AlphaParams | None, lower, upper,
                     parent: IntermediateBounds | None = None,
                     frozen: IntermediateBounds | None = None) -> GradResult:
    """``f_lb`` and its total derivative w.r.t. the slopes of unstable FREE neurons.

    The derivative includes the path through every intermediate bound that
    depends on earlier-layer slopes (unless ``frozen`` fixes those bounds).
    """
    lo, hi = _box(lower, upper)
    domains = [(splits, alpha, parent)]
    states, a, par = _stack_inputs(net, domains)
    fro = _stack_frozen(net, [frozen] if frozen is not None else None)
    a = _filled_alpha(net, domains, lo, hi, par, fro, states, a)
    out, grads = _value_and_grad(net, states, a, lo, hi, par, fro, 1)
    res = _unpack(net, out, lo, hi)[0]
    masks = res.ibounds.unstable(splits)
    dense = [g[0] for g in grads]
    flat = np.concatenate([g[m] for g, m in zip(dense, masks)]) if masks else np.zeros(0)
    return GradResult(res.f_lb, flat, masks, dense)


def _optimize_batch(net: Network, domains, lo, hi, cfg: OptimizerConfig, frozen=None, probe=None) -> list[OptResult]:
    B = len(domains)
    states, alpha, parent = _stack_inputs(net, domains)
    fro = _stack_frozen(net, frozen)

    best = np.full(B, -np.inf)
    best_res: list[BoundResult | None] = [None] * B
    traces: list[list[float]] = [[] for _ in range(B)]
    active = np.ones(B, dtype=bool)
    stale = np.zeros(B, dtype=int)

    def record(out):
        results = _unpack(net, out, lo, hi)
        for b in np.flatnonzero(active):
            r = results[b]
            traces[b].append(r.f_lb)
            if best_res[b] is None or r.f_lb > best[b]:
                best[b], best_res[b] = r.f_lb, r
                stale[b] = 0
            else:
                stale[b] += 1
            if probe is not None and probe(r):
                active[b] = False  # caller has what it needs (e.g. a counterexample)
            elif r.empty or r.ibounds.num_unstable(domains[b][0]) == 0:
                active[b] = False  # slopes have no effect
            elif cfg.early_stop_verified and best[b] > 0:
                active[b] = False
            elif stale[b] >= cfg.patience:
                active[b] = False

    # iteration 0 without a gradient tape; also resolves heuristic (NaN) slopes
    out = _propagate(net, states, alpha, lo, hi, parent=parent, frozen=fro, B=B)
    alpha = [np.array(a) for a in out["alpha"]]
    record(out)
    step = cfg.step_size
    pending = False
    for it in range(cfg.iterations):
        if not active.any():
            break
        out, grads = _value_and_grad(net, states, alpha, lo, hi, parent, fro, B)
        if pending:
            record(out)
            pending = False
            if not active.any():
                break
        for k in range(len(alpha)):
            upd = np.clip(alpha[k] + step * grads[k], 0.0, 1.0)
            alpha[k] = np.where(active[:, None], upd, alpha[k])
        step *= cfg.decay
        pending = True
    if pending and active.any():
        record(_propagate(net, states, alpha, lo, hi, parent=parent, frozen=fro, B=B))

    return [
        OptResult(alpha=r.alpha, f_lb=r.f_lb, ibounds=r.ibounds, trace=traces[b], bounds=r)
        for b, r in enumerate(best_res)
    ]


def optimize_alpha(net: Network, splits: SplitAssignment, alpha0: AlphaParams | None, lower, upper,
                   cfg: OptimizerConfig = INITIAL_CONFIG, parent: IntermediateBounds | None = None,
                   frozen: IntermediateBounds | None = None) -> OptResult:
    """Maximise ``f_lb`` over slopes in ``[0, 1]``; returns the best iterate seen."""
    return batch_optimize_alpha(net, [(splits, alpha0, parent)], lower, upper, cfg,
                                frozen=[frozen] if frozen is not None else None)[0]


def batch_optimize_alpha(net: Network, domains, lower, upper, cfg: OptimizerConfig = NODE_CONFIG,
                         threads: int = 1, frozen: Sequence[IntermediateBounds] | None = None,
                         probe=None) -> list[OptResult]:
    """``optimize_alpha`` for every ``(splits, alpha0[, parent])`` in ``domains``, batched.

    Each domain keeps its own early-stopping state, so results do not depend
    on which other domains share the batch.  ``probe(result)`` is called on
    every iterate; returning True stops that domain.
    """
    if not domains:
        raise ValueError("empty domain list")
    lo, hi = _box(lower, upper)
    domains = [tuple(d) + (None,) * (3 - len(d)) for d in domains]
    if threads <= 1 or len(domains) < 2:
        return _optimize_batch(net, domains, lo, hi, cfg, frozen, probe)
    cuts = np.linspace(0, len(domains), min(threads, len(domains)) + 1).astype(int)
    jobs = [(domains[a:b], None if frozen is None else list(frozen[a:b])) for a, b in zip(cuts[:-1], cuts[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda j: _optimize_batch(net, j[0], lo, hi, cfg, j[1], probe), jobs))
    return [r for p in parts for r in p]
