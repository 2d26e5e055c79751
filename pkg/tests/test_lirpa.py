import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relubab.lirpa import (FREE, NEG, POS, AlphaParams, BoundsError, IntermediateBounds, LinearBounds,
                           SplitAssignment, backward_bounds, batch_output_bounds, compute_intermediate_bounds,
                           compute_output_bounds, concretize, relu_relaxation)
from relubab.model import Network, forward
from relubab.oracle import exact_min

from conftest import rand_box, rand_net

LEAVES = [((POS, POS), 0.0, 0.0), ((NEG, NEG), 0.0, 0.0), ((NEG, POS), -1.0, 1.0), ((POS, NEG), -1.0, 1.0)]


def test_relaxation_cases():
    assert relu_relaxation(-1, 1, 0.3) == pytest.approx((0.3, 0.0, 0.5, 0.5))
    assert relu_relaxation(0.2, 3, 0.7) == (1.0, 0.0, 1.0, 0.0)
    assert relu_relaxation(-1, 1, 0.7, NEG) == (0.0, 0.0, 0.0, 0.0)
    assert relu_relaxation(-1, 1, 0.7, POS) == (1.0, 0.0, 1.0, 0.0)
    assert relu_relaxation(-2, -1, 0.7) == (0.0, 0.0, 0.0, 0.0)
    with pytest.raises(BoundsError):
        relu_relaxation(1, -1, 0.5)


def test_split_assignment_hashable():
    s = SplitAssignment.from_lists([[0, 0], [0]])
    t = s.with_split(0, 1, NEG)
    assert s != t and hash(t) == hash(SplitAssignment.from_lists([[0, -1], [0]]))
    assert t.num_split == 1 and list(t.items()) == [(0, 1, NEG)]
    assert t.to_json() == [["FREE", "NEG"], ["FREE"]]
    with pytest.raises(ValueError):
        s.with_split(0, 0, FREE)


def test_alpha_params_range_and_flat():
    with pytest.raises(BoundsError):
        AlphaParams([np.array([1.5])])
    a = AlphaParams([np.array([0.1, 0.2, 0.3])])
    m = [np.array([True, False, True])]
    assert a.flat(m).tolist() == [0.1, 0.3]
    assert a.with_flat(m, [0.9, 0.8]).slopes[0].tolist() == [0.9, 0.2, 0.8]


def test_linear_net_backward_is_weight():
    W, b = np.array([[1.0, -2.0]]), np.array([0.5])
    net = Network.from_weights([W], [b])
    lb = backward_bounds(net, SplitAssignment.free(net), IntermediateBounds([], []), None, 0)
    assert np.array_equal(lb.A_low, W) and np.array_equal(lb.A_up, W)
    assert np.array_equal(lb.b_low, b) and np.array_equal(lb.b_up, b)
    r = compute_output_bounds(net, SplitAssignment.free(net), None, [-1, -1], [1, 1])
    assert (r.f_lb, r.f_ub) == (-2.5, 3.5)


def test_fully_split_backward_is_gated_product():
    rng = np.random.default_rng(4)
    net = rand_net(rng, [3, 4, 3, 1])
    states = [[POS, NEG, POS, POS], [NEG, POS, POS]]
    s = SplitAssignment.from_lists(states)
    ib = compute_intermediate_bounds(net, s, None, -np.ones(3), np.ones(3))
    lb = backward_bounds(net, s, ib, None, 2)
    D1, D2 = np.diag([1.0, 0, 1, 1]), np.diag([0.0, 1, 1])
    W = net.layers
    expect = W[2].weight @ D2 @ W[1].weight @ D1 @ W[0].weight
    assert np.allclose(lb.A_low, expect) and np.allclose(lb.A_up, expect)


def test_one_unstable_neuron_hand_chain():
    # h = x on [-1, 1], f = 2*relu(h) - 1; lower slope alpha, upper 0.5x + 0.5
    net = Network.from_weights([[[1.0]], [[2.0]]], [[0.0], [-1.0]])
    ib = IntermediateBounds([np.array([-1.0])], [np.array([1.0])])
    lb = backward_bounds(net, SplitAssignment.free(net), ib, AlphaParams([np.array([0.25])]), 1)
    assert lb.A_low.tolist() == [[0.5]] and lb.b_low.tolist() == [-1.0]
    assert lb.A_up.tolist() == [[1.0]] and lb.b_up.tolist() == [0.0]
    net2 = Network.from_weights([[[1.0]], [[-2.0]]])
    lb2 = backward_bounds(net2, SplitAssignment.free(net2), ib, AlphaParams([np.array([0.25])]), 1)
    assert lb2.A_low.tolist() == [[-1.0]] and lb2.b_low.tolist() == [-1.0]  # upper relaxation, scaled by -2


def test_concretize_examples():
    lb = LinearBounds(np.array([[1.0, -1.0]]), np.zeros(1), np.array([[1.0, -1.0]]), np.zeros(1))
    lo, up = concretize(lb, [-1, -1], [1, 1])
    assert (lo[0], up[0]) == (-2.0, 2.0)
    const = LinearBounds(np.zeros((1, 3)), np.array([4.0]), np.zeros((1, 3)), np.array([4.0]))
    assert concretize(const, np.zeros(3), np.ones(3)) == (4.0, 4.0)
    with pytest.raises(BoundsError):
        concretize(lb, [0], [1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8))
def test_concretize_matches_vertices(seed, d):
    rng = np.random.default_rng(seed)
    A, b = rng.normal(size=(2, d)), rng.normal(size=2)
    lo, hi = rand_box(rng, d)
    lv, uv = concretize(LinearBounds(A, b, A, b), lo, hi)
    V = np.array(list(itertools.product(*zip(lo, hi))))
    vals = V @ A.T + b
    assert np.allclose(lv, vals.min(0), atol=1e-12) and np.allclose(uv, vals.max(0), atol=1e-12)


def test_first_layer_is_interval_arithmetic():
    rng = np.random.default_rng(5)
    net = rand_net(rng, [3, 4, 1])
    x0, eps = rng.uniform(-1, 1, 3), 0.3
    ib = compute_intermediate_bounds(net, SplitAssignment.free(net), None, x0 - eps, x0 + eps)
    W, b = net.layers[0].weight, net.layers[0].bias
    assert np.allclose(ib.lower[0], W @ x0 - eps * np.abs(W).sum(1) + b, atol=1e-12)
    assert np.allclose(ib.upper[0], W @ x0 + eps * np.abs(W).sum(1) + b, atol=1e-12)


def test_twin_relu_intermediate_bounds(twin_relu):
    net, _ = twin_relu
    ib = compute_intermediate_bounds(net, SplitAssignment.free(net), None, [-1], [1])
    assert ib.lower[0].tolist() == [-1, -1] and ib.upper[0].tolist() == [1, 1]
    ib = compute_intermediate_bounds(net, SplitAssignment.from_lists([[NEG, POS]]), None, [-1], [1])
    assert ib.upper[0][0] == 0 and ib.lower[0][1] == 0


@pytest.mark.parametrize("states,lo,hi", LEAVES)
def test_twin_relu_leaf_bounds(twin_relu, states, lo, hi):
    net, _ = twin_relu
    r = compute_output_bounds(net, SplitAssignment.from_lists([states]), None, [-1], [1])
    assert (r.f_lb, r.f_ub) == (lo, hi)


def test_twin_relu_leaves_batched(twin_relu):
    net, _ = twin_relu
    doms = [(SplitAssignment.from_lists([s]), None) for s, _, _ in LEAVES]
    res = batch_output_bounds(net, doms, [-1], [1])
    assert [(r.f_lb, r.f_ub) for r in res] == [(lo, hi) for _, lo, hi in LEAVES]


def test_empty_by_bounds():
    # h = x on [0.5, 1] can never be <= 0
    net = Network.from_weights([[[1.0]], [[1.0]]])
    r = compute_output_bounds(net, SplitAssignment.from_lists([[NEG]]), None, [0.5], [1.0])
    assert r.empty and r.f_lb == np.inf and r.f_ub == -np.inf


def _random_domains(rng, net, k):
    out = []
    for _ in range(k):
        states = [rng.choice([FREE, FREE, POS, NEG], n) for n in net.hidden_sizes]
        alpha = AlphaParams([rng.uniform(0, 1, n) for n in net.hidden_sizes]) if rng.random() < 0.5 else None
        out.append((SplitAssignment.from_lists(states), alpha))
    return out


def test_batch_equals_serial_bitwise():
    rng = np.random.default_rng(6)
    net = rand_net(rng, [3, 6, 5, 1])
    lo, hi = rand_box(rng, 3)
    doms = _random_domains(rng, net, 24)
    batch = batch_output_bounds(net, doms, lo, hi)
    threaded = batch_output_bounds(net, doms, lo, hi, threads=4)
    for (s, a), r, t in zip(doms, batch, threaded):
        one = compute_output_bounds(net, s, a, lo, hi)
        assert (one.f_lb, one.f_ub) == (r.f_lb, r.f_ub)
        assert (one.f_lb, one.f_ub) == (t.f_lb, t.f_ub)
        for k in range(2):
            assert np.array_equal(one.ibounds.lower[k], r.ibounds.lower[k])


def _split_mask(net, X, splits):
    """Rows of X that satisfy every split sign."""
    z, ok = X, np.ones(len(X), bool)
    for k, layer in enumerate(net.layers[:-1]):
        h = z @ layer.weight.T + layer.bias
        s = np.array(splits.states[k])
        ok &= np.all((s != POS) | (h >= 0), axis=1) & np.all((s != NEG) | (h <= 0), axis=1)
        z = np.maximum(h, 0)
    return ok


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_split_soundness(seed):
    rng = np.random.default_rng(seed)
    net = rand_net(rng, [2, 5, 4, 1])
    lo, hi = rand_box(rng, 2)
    X = rng.uniform(lo, hi, (4000, 2))
    for s, a in _random_domains(rng, net, 6):
        r = compute_output_bounds(net, s, a, lo, hi)
        ok = _split_mask(net, X, s)
        if r.empty:
            assert not ok.any()
            continue
        y = forward(net, X[ok])[:, 0]
        if len(y):
            assert y.min() >= r.f_lb - 1e-9 and y.max() <= r.f_ub + 1e-9


def test_fully_split_matches_oracle_region():
    rng = np.random.default_rng(8)
    net = rand_net(rng, [2, 3, 2, 1])
    lo, hi = -np.ones(2), np.ones(2)
    from relubab.oracle import iter_regions
    from relubab.lp import lp_bound
    for pattern, M, c, _ in iter_regions(net, lo, hi):
        states = [[POS if p else NEG for p in pattern[:3]], [POS if p else NEG for p in pattern[3:]]]
        s = SplitAssignment.from_lists(states)
        r = compute_output_bounds(net, s, None, lo, hi)
        # exact linear function on the region: LiRPA uses the affine restriction over the whole box
        A = M[0]
        assert r.f_lb == pytest.approx(np.minimum(A * lo, A * hi).sum() + c[0], abs=1e-9) or r.empty
        out = lp_bound(net, s, r.ibounds, lo, hi)
        assert out.optimal
        assert out.value >= r.f_lb - 1e-9


def test_bounds_errors():
    net = Network.from_weights([[[1.0]], [[1.0]]])
    with pytest.raises(BoundsError):
        backward_bounds(net, SplitAssignment.free(net), IntermediateBounds([], []), None, 1)
    with pytest.raises(BoundsError):
        compute_output_bounds(net, SplitAssignment.free(net), None, [0, 0], [1, 1])
    with pytest.raises(BoundsError):
        batch_output_bounds(net, [], [0], [1])
