"""Ground truth for small networks by activation-pattern enumeration.

Each activation pattern fixes the network to an affine map; its region is a
polyhedron cut out of the input box by the sign constraints.  Regions are
explored depth-first in neuron order and a prefix is abandoned as soon as its
constraints admit no input.  The constraints are composed directly from the
weights; nothing here goes through bound propagation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Network, PropertySpec, forward, load_network, load_property, merge_property, save_network, save_property
from .simplex import LPProblem, LPStatus, solve_lp

MAX_NEURONS = 20
MARGIN_TOL = 1e-8


class OracleBudgetError(RuntimeError):
    """The network has too many hidden neurons to enumerate."""


def _region_lp(d: int, lo, hi, rows, objective=None) -> LPProblem:
    p = LPProblem()
    for i in range(d):
        p.add_var(f"x{i}", lo[i], hi[i])
    t = None
    if objective is None:
        t = p.add_var("t", 0.0, 1.0)
    for coeffs, rhs, strict in rows:
        r = {i: coeffs[i] for i in range(d)}
        if strict and t is not None:
            r[t] = 1.0
        p.add_row(r, "<=", rhs)
    if objective is None:
        p.objective = {t: -1.0}
    else:
        p.objective = {i: objective[i] for i in range(d)}
    return p


def _strict_point(d, lo, hi, rows):
    """A point strictly inside the region's open constraints, and its margin."""
    out = solve_lp(_region_lp(d, lo, hi, rows))
    if out.status is not LPStatus.OPTIMAL or -out.value <= MARGIN_TOL:
        return None, 0.0
    return out.x[:d], -out.value


def iter_regions(net: Network, lower, upper):
    """Yield ``(pattern, M, c, x_feasible)`` for each nonempty activation region.

    ``pattern`` is a tuple of 0/1 per hidden neuron (layer-major); on the
    region the scalar-or-vector output equals ``M x + c``.
    """
    n_hidden = net.num_hidden
    if n_hidden > MAX_NEURONS:
        raise OracleBudgetError(f"{n_hidden} hidden neurons exceeds the enumeration budget of {MAX_NEURONS}")
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    d = net.input_dim
    layers = net.layers
    x0, t0 = _strict_point(d, lo, hi, [])
    if x0 is None:
        x0, t0 = (lo + hi) / 2, 1.0

    def rec(k, j, M, c, gate, rows, pattern, xf, tf):
        if k == len(layers) - 1:
            yield pattern, M, c, xf
            return
        n = layers[k].out_dim
        if j == n:
            D = np.asarray(gate)
            Mn = layers[k + 1].weight @ (D[:, None] * M)
            cn = layers[k + 1].weight @ (D * c) + layers[k + 1].bias
            yield from rec(k + 1, 0, Mn, cn, [], rows, pattern, xf, tf)
            return
        val = M[j] @ xf + c[j]
        for sign in (1, 0):
            if sign == 1:
                new_row = (-M[j], c[j], False)  # h >= 0
                cheap = val >= 0
                t_new = tf
            else:
                new_row = (M[j], -c[j], True)  # h < 0
                cheap = val < -MARGIN_TOL and tf > MARGIN_TOL
                t_new = min(tf, -val)
            nrows = rows + [new_row]
            if cheap:
                xn, tn = xf, t_new
            else:
                xn, tn = _strict_point(d, lo, hi, nrows)
                if xn is None:
                    continue
            yield from rec(k, j + 1, M, c, gate + [sign], nrows, pattern + (sign,), xn, tn)

    if len(layers) == 1:
        yield (), layers[0].weight.copy(), layers[0].bias.copy(), x0
        return
    W0, b0 = layers[0].weight.astype(np.float64), layers[0].bias.astype(np.float64)
    yield from rec(0, 0, W0, b0, [], [], (), x0, t0)


def pattern_region_rows(net: Network, pattern) -> tuple[list, np.ndarray, np.ndarray]:
    """Sign constraints ``(coeffs, rhs, strict)`` of a full pattern, plus its affine output map."""
    layers = net.layers
    M, c = layers[0].weight.astype(np.float64), layers[0].bias.astype(np.float64)
    rows, pos = [], 0
    for k in range(len(layers) - 1):
        n = layers[k].out_dim
        s = np.asarray(pattern[pos:pos + n], dtype=np.float64)
        pos += n
        for j in range(n):
            rows.append((-M[j], c[j], False) if s[j] else (M[j], -c[j], True))
        M = layers[k + 1].weight @ (s[:, None] * M)
        c = layers[k + 1].weight @ (s * c) + layers[k + 1].bias
    return rows, M, c


def exact_min(net: Network, lower, upper) -> tuple[float, np.ndarray]:
    """Exact minimum of a scalar-output network over a box, with a minimiser."""
    if net.output_dim != 1:
        raise ValueError("exact_min needs a scalar-output network")
    if net.num_hidden > MAX_NEURONS:
        raise OracleBudgetError(f"{net.num_hidden} hidden neurons exceeds the enumeration budget of {MAX_NEURONS}")
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    d = net.input_dim
    best, arg = np.inf, None
    for pattern, M, c, _ in iter_regions(net, lo, hi):
        rows, _, _ = pattern_region_rows(net, pattern)
        closed = [(a, r, False) for a, r, _ in rows]
        out = solve_lp(_region_lp(d, lo, hi, closed, objective=M[0]))
        if out.status is not LPStatus.OPTIMAL:
            continue
        v = out.value + c[0]
        if v < best:
            best, arg = v, out.x[:d]
    return float(best), np.asarray(arg)


@dataclass
class OracleVerdict:
    safe: bool
    min_value: float
    witness: np.ndarray | None = None

    @property
    def label(self) -> str:
        return "SAFE" if self.safe else "UNSAFE"


def exact_verify(net: Network, prop: PropertySpec) -> OracleVerdict:
    prop.check_against(net)
    g = merge_property(net, prop)
    m, x = exact_min(g, prop.lower, prop.upper)
    if m >= 0:
        return OracleVerdict(True, m)
    return OracleVerdict(False, m, x)


# ---------------------------------------------------------------- random corpus

@dataclass(frozen=True)
class InstanceSpec:
    input_dim: tuple[int, int] = (1, 3)
    hidden_layers: tuple[int, int] = (1, 3)
    width: tuple[int, int] = (2, 6)
    max_hidden: int = 12
    output_dim: tuple[int, int] = (2, 3)
    boundary_gap: float = 0.1  # final eps = (1 -/+ gap) * boundary eps
    bisection_steps: int = 7


@dataclass
class Instance:
    index: int
    net: Network
    prop: PropertySpec
    verdict: OracleVerdict
    epsilon: float
    boundary_epsilon: float
    meta: dict = field(default_factory=dict)


def random_network(rng: np.random.Generator, sizes: list[int]) -> Network:
    """Weights ~ U[-1, 1] / sqrt(fan_in); small uniform biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-1, 1, (fan_out, fan_in)) * s)
        biases.append(rng.uniform(-0.5, 0.5, fan_out) * s)
    return Network.from_weights(weights, biases)


def _draw_sizes(rng, spec: InstanceSpec) -> list[int]:
    d = int(rng.integers(spec.input_dim[0], spec.input_dim[1] + 1))
    n_layers = int(rng.integers(spec.hidden_layers[0], spec.hidden_layers[1] + 1))
    widths = []
    budget = spec.max_hidden
    for i in range(n_layers):
        left = n_layers - i - 1
        hi = min(spec.width[1], budget - left * spec.width[0])
        if hi < spec.width[0]:
            break
        w = int(rng.integers(spec.width[0], hi + 1))
        widths.append(w)
        budget -= w
    out = int(rng.integers(spec.output_dim[0], spec.output_dim[1] + 1))
    return [d] + widths + [out]


def make_instance(seed: int, index: int, spec: InstanceSpec = InstanceSpec(), want_safe: bool | None = None) -> Instance:
    """Deterministic instance ``index`` of corpus ``seed``.

    The property is a margin property (top class minus runner-up at the
    center) and the radius is bisected to the safe/unsafe boundary, then
    moved inside (safe) or outside (unsafe) by ``boundary_gap``.
    """
    rng = np.random.default_rng([seed, index])
    if want_safe is None:
        want_safe = index % 2 == 0
    for _attempt in range(50):
        sizes = _draw_sizes(rng, spec)
        net = random_network(rng, sizes)
        x0 = rng.uniform(-1, 1, sizes[0])
        y = forward(net, x0)
        order = np.argsort(-y, kind="stable")
        if y[order[0]] - y[order[1]] < 1e-3:
            continue
        cvec = np.zeros(len(y))
        cvec[order[0]], cvec[order[1]] = 1.0, -1.0

        def margin(eps):
            p = PropertySpec.linf_ball(x0, eps, cvec)
            return exact_min(merge_property(net, p), p.lower, p.upper)[0]

        a, b = 0.0, 0.25
        while margin(b) >= 0 and b < 64:
            a, b = b, b * 2
        if margin(b) >= 0:
            continue
        for _ in range(spec.bisection_steps):
            mid = 0.5 * (a + b)
            if margin(mid) >= 0:
                a = mid
            else:
                b = mid
        boundary = 0.5 * (a + b)
        eps = boundary * (1 - spec.boundary_gap if want_safe else 1 + spec.boundary_gap)
        prop = PropertySpec.linf_ball(x0, eps, cvec)
        verdict = exact_verify(net, prop)
        if abs(verdict.min_value) < 1e-6:
            continue
        return Instance(index, net, prop, verdict, eps, boundary, {"sizes": sizes, "seed": seed})
    raise RuntimeError(f"could not draw a usable instance for seed={seed}, index={index}")


def gen_instances(seed: int, count: int, spec: InstanceSpec = InstanceSpec()) -> list[Instance]:
    return [make_instance(seed, i, spec) for i in range(count)]


def write_corpus(instances: list[Instance], directory, seed: int | None = None) -> Path:
    """Write nets/properties in the model JSON formats plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for inst in instances:
        net_file = f"net_{inst.index:04d}.json"
        prop_file = f"prop_{inst.index:04d}.json"
        save_network(inst.net, directory / net_file)
        save_property(inst.prop, directory / prop_file)
        entries.append({
            "index": inst.index,
            "net": net_file,
            "prop": prop_file,
            "oracle": inst.verdict.label,
            "exact_min": inst.verdict.min_value,
            "epsilon": inst.epsilon,
            "boundary_epsilon": inst.boundary_epsilon,
            "hidden": inst.net.num_hidden,
        })
    manifest = {"seed": seed, "count": len(entries), "instances": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_corpus(manifest_path) -> list[dict]:
    """Entries of a manifest with ``net``/``prop`` loaded as objects."""
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    out = []
    for e in data["instances"]:
        e = dict(e)
        e["net_path"] = str(manifest_path.parent / e["net"])
        e["prop_path"] = str(manifest_path.parent / e["prop"])
        e["net_obj"] = load_network(e["net_path"])
        e["prop_obj"] = load_property(e["prop_path"])
        out.append(e)
    return out
