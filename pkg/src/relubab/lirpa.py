"""Backward linear-relaxation bound propagation (CROWN-style) with ReLU splits.

Hidden layers are indexed from 0: hidden layer ``k`` is the output of affine
layer ``k`` followed by ReLU.  All batched routines treat the leading axis as
the sub-domain index; every row is computed independently of the others, so a
batch gives exactly the numbers the same domains give one at a time.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .model import Network

FREE, POS, NEG = 0, 1, -1
_STATE_NAMES = {FREE: "FREE", POS: "POS", NEG: "NEG"}


class BoundsError(ValueError):
    pass


@dataclass(frozen=True)
class SplitAssignment:
    """Per hidden neuron split state, one tuple per hidden layer."""

    states: tuple[tuple[int, ...], ...]

    @classmethod
    def free(cls, net: Network) -> "SplitAssignment":
        return cls(tuple((FREE,) * n for n in net.hidden_sizes))

    @classmethod
    def from_lists(cls, states) -> "SplitAssignment":
        return cls(tuple(tuple(int(s) for s in layer) for layer in states))

    def get(self, layer: int, index: int) -> int:
        return self.states[layer][index]

    def with_split(self, layer: int, index: int, state: int) -> "SplitAssignment":
        if state not in (POS, NEG):
            raise ValueError(f"split state must be POS or NEG, got {state}")
        row = list(self.states[layer])
        row[index] = state
        return SplitAssignment(self.states[:layer] + (tuple(row),) + self.states[layer + 1:])

    def arrays(self) -> list[np.ndarray]:
        return [np.array(s, dtype=np.int8) for s in self.states]

    @property
    def num_split(self) -> int:
        return sum(s != FREE for layer in self.states for s in layer)

    def items(self) -> Iterator[tuple[int, int, int]]:
        for i, layer in enumerate(self.states):
            for j, s in enumerate(layer):
                if s != FREE:
                    yield i, j, s

    def to_json(self) -> list[list[str]]:
        return [[_STATE_NAMES[s] for s in layer] for layer in self.states]

    def __str__(self):
        parts = [f"h{i}[{j}]{'>=0' if s == POS else '<=0'}" for i, j, s in self.items()]
        return "{" + ", ".join(parts) + "}"


@dataclass
class IntermediateBounds:
    """Pre-activation bounds of every hidden layer for one sub-domain."""

    lower: list[np.ndarray]
    upper: list[np.ndarray]
    empty: bool = False

    def unstable(self, splits: SplitAssignment | None = None) -> list[np.ndarray]:
        masks = [(l < 0) & (u > 0) for l, u in zip(self.lower, self.upper)]
        if splits is not None:
            masks = [m & (s == FREE) for m, s in zip(masks, splits.arrays())]
        return masks

    def num_unstable(self, splits: SplitAssignment | None = None) -> int:
        return int(sum(m.sum() for m in self.unstable(splits)))

    def copy(self) -> "IntermediateBounds":
        return IntermediateBounds([l.copy() for l in self.lower], [u.copy() for u in self.upper], self.empty)


@dataclass
class AlphaParams:
    """Lower-relaxation slopes, stored densely for every hidden neuron.

    Only entries of unstable FREE neurons influence the bounds; the flat view
    exposes exactly those.
    """

    slopes: list[np.ndarray]

    def __post_init__(self):
        self.slopes = [np.asarray(a, dtype=np.float64) for a in self.slopes]
        for a in self.slopes:
            if np.any(a < 0) or np.any(a > 1):
                raise BoundsError("alpha entries must lie in [0, 1]")

    @classmethod
    def heuristic(cls, ibounds: IntermediateBounds) -> "AlphaParams":
        return cls([_heuristic_alpha(l, u) for l, u in zip(ibounds.lower, ibounds.upper)])

    @classmethod
    def constant(cls, net: Network, value: float) -> "AlphaParams":
        return cls([np.full(n, float(value)) for n in net.hidden_sizes])

    def flat(self, masks: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([a[m] for a, m in zip(self.slopes, masks)]) if masks else np.zeros(0)

    def with_flat(self, masks: Sequence[np.ndarray], vec) -> "AlphaParams":
        out, k = [], 0
        for a, m in zip(self.slopes, masks):
            a = a.copy()
            n = int(m.sum())
            a[m] = vec[k:k + n]
            k += n
            out.append(a)
        return AlphaParams(out)

    def get(self, layer: int, index: int) -> float:
        return float(self.slopes[layer][index])

    def copy(self) -> "AlphaParams":
        return AlphaParams([a.copy() for a in self.slopes])


@dataclass
class LinearBounds:
    """``A_low x + b_low <= h(x) <= A_up x + b_up`` for the target neurons."""

    A_low: np.ndarray
    b_low: np.ndarray
    A_up: np.ndarray
    b_up: np.ndarray


@dataclass
class BoundResult:
    f_lb: float
    f_ub: float
    ibounds: IntermediateBounds
    alpha: AlphaParams
    empty: bool
    A_low: np.ndarray  # coefficients of the output lower bound w.r.t. the input
    x_star: np.ndarray  # box point minimising the linear lower bound
    lambdas: list[np.ndarray] = field(default_factory=list)

    def __iter__(self):
        return iter((self.f_lb, self.f_ub, self.ibounds))


# ---------------------------------------------------------------- scalar relaxation

def relu_relaxation(l: float, u: float, alpha: float, state: int = FREE) -> tuple[float, float, float, float]:
    """Return ``(a_low, b_low, a_up, b_up)`` with ``a_low h + b_low <= relu(h) <= a_up h + b_up``."""
    if l > u:
        raise BoundsError(f"invalid bounds: l={l} > u={u}")
    if state == NEG or u <= 0:
        return 0.0, 0.0, 0.0, 0.0
    if state == POS or l >= 0:
        return 1.0, 0.0, 1.0, 0.0
    if not 0.0 <= alpha <= 1.0:
        raise BoundsError(f"alpha={alpha} outside [0, 1]")
    return float(alpha), 0.0, u / (u - l), -u * l / (u - l)


def _heuristic_alpha(l, u):
    return (np.asarray(u) >= np.abs(np.asarray(l))).astype(np.float64)


# ---------------------------------------------------------------- batched core

def _relax(l, u, alpha):
    """Per-neuron relaxation coefficients; ``l``, ``u`` already split-clamped."""
    lv, uv = ad.value(l), ad.value(u)
    inactive = uv <= 0
    active = ~inactive & (lv >= 0)
    unstable = ~inactive & ~active
    act = active.astype(np.float64)
    denom = ad.where(unstable, u - l, 1.0)
    slope_up = ad.where(unstable, u / denom, act)
    icpt_up = ad.where(unstable, -(u * l) / denom, 0.0)
    slope_low = ad.where(unstable, alpha, act)
    return slope_low, slope_up, icpt_up


def _expand(x):
    B, n = x.shape
    return x.reshape(B, 1, n)


def _backward(net: Network, target: int, relax, B: int, lower=True, upper=True,
              relax_upper=None, record_lambda=False):
    """Propagate identity at affine layer ``target`` back to the input."""
    W, b = net.layers[target].weight, net.layers[target].bias
    A0 = np.broadcast_to(W, (B,) + W.shape)
    b0 = np.broadcast_to(b, (B, b.shape[0]))
    A_l, c_l = (A0, b0) if lower else (None, None)
    A_u, c_u = (A0, b0) if upper else (None, None)
    relax_upper = relax if relax_upper is None else relax_upper
    lambdas = [None] * target
    for k in range(target - 1, -1, -1):
        if A_l is not None:
            if record_lambda:
                lambdas[k] = np.array(ad.value(A_l)[:, 0, :])
            sl, su, iu = relax[k]
            Av = ad.value(A_l)
            pos = ad.where(Av > 0, A_l, 0.0)
            neg = ad.where(Av < 0, A_l, 0.0)
            c_l = c_l + ad.sum(neg * _expand(iu), axis=-1)
            A_l = pos * _expand(sl) + neg * _expand(su)
        if A_u is not None:
            sl, su, iu = relax_upper[k]
            Av = ad.value(A_u)
            pos = ad.where(Av > 0, A_u, 0.0)
            neg = ad.where(Av < 0, A_u, 0.0)
            c_u = c_u + ad.sum(pos * _expand(iu), axis=-1)
            A_u = pos * _expand(su) + neg * _expand(sl)
        layer = net.layers[k]
        if A_l is not None:
            c_l = c_l + A_l @ layer.bias
            A_l = A_l @ layer.weight
        if A_u is not None:
            c_u = c_u + A_u @ layer.bias
            A_u = A_u @ layer.weight
    return A_l, c_l, A_u, c_u, lambdas


def _concretize_lower(A, c, lo, hi):
    Av = ad.value(A)
    return ad.sum(ad.where(Av > 0, A, 0.0) * lo[..., None, :], axis=-1) + \
        ad.sum(ad.where(Av < 0, A, 0.0) * hi[..., None, :], axis=-1) + c


def _concretize_upper(A, c, lo, hi):
    Av = ad.value(A)
    return ad.sum(ad.where(Av > 0, A, 0.0) * hi[..., None, :], axis=-1) + \
        ad.sum(ad.where(Av < 0, A, 0.0) * lo[..., None, :], axis=-1) + c


def _empty_rows(lv, uv):
    return np.any(lv > uv + 1e-9 * (1.0 + np.abs(lv) + np.abs(uv)), axis=1)


def _propagate(net: Network, states, alpha, lo, hi, parent=None, frozen=None,
               need_upper=True, record_lambda=True, B=None):
    """Full bound pipeline for a batch of sub-domains.

    ``states[k]``: int array (B, n_k).  ``alpha[k]``: array or Var (B, n_k);
    NaN entries are filled with the heuristic slope once layer ``k``'s bounds
    are known.  ``parent``/``frozen``: optional per-layer ``(l, u)`` arrays of
    shape (B, n_k); parent bounds are intersected with freshly computed ones,
    frozen bounds replace them.
    """
    H = len(net.layers) - 1
    if B is None:
        B = states[0].shape[0]
    lows, ups, relax, relax_h, alpha_used = [], [], [], [], []
    empty = np.zeros(B, dtype=bool)
    for t in range(H):
        if frozen is not None:
            l, u = np.array(frozen[t][0], dtype=np.float64), np.array(frozen[t][1], dtype=np.float64)
        else:
            A_l, c_l, A_u, c_u, _ = _backward(net, t, relax, B)
            l = _concretize_lower(A_l, c_l, lo, hi)
            u = _concretize_upper(A_u, c_u, lo, hi)
            if parent is not None:
                l = ad.maximum(l, parent[t][0])
                u = ad.minimum(u, parent[t][1])
        s = states[t]
        l = ad.where(s == POS, ad.maximum(l, 0.0), l)
        u = ad.where(s == NEG, ad.minimum(u, 0.0), u)
        lv, uv = ad.value(l), ad.value(u)
        empty |= _empty_rows(lv, uv)
        a = alpha[t]
        heur = _heuristic_alpha(lv, uv)
        if isinstance(a, Var):
            a_t = a
        else:
            a = np.asarray(a, dtype=np.float64)
            a_t = np.where(np.isnan(a), heur, a)
        alpha_used.append(a_t)
        lows.append(l)
        ups.append(u)
        relax.append(_relax(l, u, a_t))
        relax_h.append(_relax(lv, uv, heur) if need_upper else None)
    A_l, c_l, A_u, c_u, lambdas = _backward(
        net, H, relax, B, upper=need_upper, relax_upper=relax_h, record_lambda=record_lambda
    )
    f_lb = _concretize_lower(A_l, c_l, lo, hi)
    f_ub = _concretize_upper(A_u, c_u, lo, hi) if need_upper else None
    f_lb = ad.where(empty[:, None], np.inf, f_lb)
    if f_ub is not None:
        f_ub = np.where(empty[:, None], -np.inf, f_ub)
    return {
        "f_lb": f_lb,
        "f_ub": f_ub,
        "lower": lows,
        "upper": ups,
        "alpha": alpha_used,
        "empty": empty,
        "A_low": ad.value(A_l),
        "lambdas": lambdas,
    }


def _stack_inputs(net: Network, domains):
    """Turn ``[(splits, alpha, parent), ...]`` into batched arrays."""
    H = len(net.layers) - 1
    sizes = net.hidden_sizes
    states = [np.stack([d[0].arrays()[k] for d in domains]) for k in range(H)]
    alpha = []
    for k in range(H):
        rows = []
        for d in domains:
            a = d[1]
            rows.append(np.full(sizes[k], np.nan) if a is None else a.slopes[k])
        alpha.append(np.stack(rows) if rows else np.zeros((0, sizes[k])))
    parent = None
    if any(d[2] is not None for d in domains):
        parent = []
        for k in range(H):
            pl = np.stack([np.full(sizes[k], -np.inf) if d[2] is None else d[2].lower[k] for d in domains])
            pu = np.stack([np.full(sizes[k], np.inf) if d[2] is None else d[2].upper[k] for d in domains])
            parent.append((pl, pu))
    return states, alpha, parent


def _stack_frozen(net: Network, frozen):
    if frozen is None:
        return None
    H = len(net.layers) - 1
    return [(np.stack([f.lower[k] for f in frozen]), np.stack([f.upper[k] for f in frozen])) for k in range(H)]


def _unpack(net: Network, out, lo, hi) -> list[BoundResult]:
    f_lb = ad.value(out["f_lb"])
    f_ub = out["f_ub"]
    results = []
    H = len(net.layers) - 1
    for b in range(f_lb.shape[0]):
        ib = IntermediateBounds(
            [np.array(ad.value(out["lower"][k])[b]) for k in range(H)],
            [np.array(ad.value(out["upper"][k])[b]) for k in range(H)],
            bool(out["empty"][b]),
        )
        A = out["A_low"][b]
        x_star = np.where(A[0] > 0, lo, hi) if A.shape[0] == 1 else None
        results.append(BoundResult(
            f_lb=float(f_lb[b, 0]) if f_lb.shape[1] == 1 else f_lb[b],
            f_ub=(float(f_ub[b, 0]) if f_ub.shape[1] == 1 else f_ub[b]) if f_ub is not None else np.nan,
            ibounds=ib,
            alpha=AlphaParams([np.array(ad.value(out["alpha"][k])[b]) for k in range(H)]),
            empty=bool(out["empty"][b]),
            A_low=np.array(A),
            x_star=x_star,
            lambdas=[lam[b] for lam in out["lambdas"]] if out["lambdas"] and out["lambdas"][0] is not None else [],
        ))
    return results


def _box(lower, upper):
    lo = np.asarray(lower, dtype=np.float64).reshape(-1)
    hi = np.asarray(upper, dtype=np.float64).reshape(-1)
    if lo.shape != hi.shape:
        raise BoundsError("box lower/upper length mismatch")
    if np.any(lo > hi):
        raise BoundsError("box lower > upper")
    return lo, hi


# ---------------------------------------------------------------- public API

def backward_bounds(net: Network, splits: SplitAssignment, ibounds: IntermediateBounds,
                    alpha: AlphaParams | None, target_layer: int) -> LinearBounds:
    """Linear bounds of affine layer ``target_layer``'s output in terms of the input."""
    if not 0 <= target_layer < len(net.layers):
        raise BoundsError(f"target layer {target_layer} out of range")
    if len(ibounds.lower) < target_layer or len(ibounds.upper) < target_layer:
        raise BoundsError(f"missing intermediate bounds for hidden layer {len(ibounds.lower)}")
    relax = []
    st = splits.arrays()
    for k in range(target_layer):
        l = np.asarray(ibounds.lower[k], dtype=np.float64)[None]
        u = np.asarray(ibounds.upper[k], dtype=np.float64)[None]
        l = np.where(st[k] == POS, np.maximum(l, 0.0), l)
        u = np.where(st[k] == NEG, np.minimum(u, 0.0), u)
        a = _heuristic_alpha(l, u) if alpha is None else alpha.slopes[k][None]
        relax.append(_relax(l, u, a))
    A_l, c_l, A_u, c_u, _ = _backward(net, target_layer, relax, 1)
    return LinearBounds(np.array(A_l[0]), np.array(c_l[0]), np.array(A_u[0]), np.array(c_u[0]))


def concretize(lb: LinearBounds, lower, upper) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimum of the lower function and maximum of the upper function over a box."""
    lo, hi = _box(lower, upper)
    if lb.A_low.shape[-1] != lo.shape[0] or lb.A_up.shape[-1] != lo.shape[0]:
        raise BoundsError(f"box has {lo.shape[0]} dims, bounds have {lb.A_low.shape[-1]}")
    low = _concretize_lower(np.asarray(lb.A_low)[None], np.asarray(lb.b_low)[None], lo, hi)[0]
    up = _concretize_upper(np.asarray(lb.A_up)[None], np.asarray(lb.b_up)[None], lo, hi)[0]
    return low, up


def compute_intermediate_bounds(net: Network, splits: SplitAssignment, alpha: AlphaParams | None,
                                lower, upper, parent: IntermediateBounds | None = None) -> IntermediateBounds:
    return compute_output_bounds(net, splits, alpha, lower, upper, parent=parent).ibounds


def compute_output_bounds(net: Network, splits: SplitAssignment, alpha: AlphaParams | None,
                          lower, upper, parent: IntermediateBounds | None = None,
                          frozen: IntermediateBounds | None = None) -> BoundResult:
    """Sound ``f_lb <= f <= f_ub`` over the sub-domain; ``(+inf, -inf)`` if provably empty.

    ``alpha=None`` uses the heuristic slope (1 if ``u >= |l|`` else 0).
    """
    return batch_output_bounds(net, [(splits, alpha, parent)], lower, upper,
                               frozen=[frozen] if frozen is not None else None)[0]


def batch_output_bounds(net: Network, domains, lower, upper, threads: int = 1,
                        frozen: Sequence[IntermediateBounds] | None = None) -> list[BoundResult]:
    """Bound many sub-domains in one batched pass.

    ``domains`` holds ``(splits, alpha)`` or ``(splits, alpha, parent_ibounds)``
    tuples.  With ``threads > 1`` the batch is cut into contiguous chunks that
    run concurrently; results come back in input order.
    """
    if not domains:
        raise BoundsError("empty domain list")
    lo, hi = _box(lower, upper)
    if lo.shape[0] != net.input_dim:
        raise BoundsError(f"box has {lo.shape[0]} dims, network input has {net.input_dim}")
    domains = [tuple(d) + (None,) * (3 - len(d)) for d in domains]

    def run(chunk, fro):
        states, alpha, parent = _stack_inputs(net, chunk)
        out = _propagate(net, states, alpha, lo, hi, parent=parent, frozen=_stack_frozen(net, fro), B=len(chunk))
        return _unpack(net, out, lo, hi)

    if threads <= 1 or len(domains) < 2:
        return run(domains, frozen)
    bounds = np.linspace(0, len(domains), min(threads, len(domains)) + 1).astype(int)
    chunks = [(domains[a:b], None if frozen is None else list(frozen[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: run(*c), chunks))
    return [r for part in parts for r in part]
