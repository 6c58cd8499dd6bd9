import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import net_loops
from htmpc.htnn import (
    HtnnSpec, Layer, build_max_affine, build_scalar_minmax, build_vector_minmax, clog2, compose,
    pad_to_depth, parallel, propagate_intervals, r_bound_check, r_of, scalar_bounds, zeta_of,
)
from htmpc.minmax import (
    AffineTerm, BoxDomain, MinMaxVector, eval_scalar, eval_vector, random_minmax,
    random_minmax_vector,
)

BOX2 = BoxDomain([-1.0, -1.0], [1.0, 1.0])


def eta(v, lo, hi):
    return min(hi, max(v, lo))


def test_r_values():
    assert r_of(1) == 0
    assert r_of(2) == 2
    assert r_of(3) == 5
    assert r_of(4) == 4 + r_of(2) == 6


def test_r_bound_small_cases():
    assert r_of(2) < 6 and r_of(3) < 10
    assert all(r_bound_check(p) for p in range(2, 1025))


def test_pairing_identity():
    u1, u2 = 0.3, -0.5
    assert eta(u2 - u1, 0.0, 2.0 - 0.0) + eta(u1, 0.0, 1.0) == pytest.approx(max(u1, u2))


def test_single_term_network():
    net, rep = build_max_affine([AffineTerm([2.0, 1.0], -0.5)], BOX2)
    assert net.zeta == 1 and net.r == 0
    x = np.array([0.3, 0.4])
    assert net(x)[0] == pytest.approx(0.5)


def test_max_of_four_terms(rng):
    C, d = rng.standard_normal((4, 2)), rng.standard_normal(4)
    net, rep = build_max_affine((C, d), BOX2)
    xs = BOX2.sample(10_000, rng)
    err = np.abs(net(xs)[:, 0] - (xs @ C.T + d).max(axis=1)).max()
    assert err <= 1e-9
    assert (net.zeta, net.r, net.width) == (3, 6, 4)
    assert rep.ok()


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 17), seed=st.integers(0, 10_000))
def test_max_affine_sizes_and_values(m, seed):
    r = np.random.default_rng(seed)
    C, d = r.standard_normal((m, 3)), r.standard_normal(m)
    X = BoxDomain([-2.0, 0.0, -1.0], [1.0, 0.5, 3.0])
    net, rep = build_max_affine((C, d), X)
    assert net.zeta == zeta_of(m) == clog2(m) + 1
    assert net.r == r_of(m)
    xs = X.sample(500, r)
    np.testing.assert_allclose(net(xs)[:, 0], (xs @ C.T + d).max(axis=1), atol=1e-9)
    # values at the vertices exercise the enclosure edges
    vs = X.vertices()
    np.testing.assert_allclose(net(vs)[:, 0], (vs @ C.T + d).max(axis=1), atol=1e-9)


def test_forward_matches_loop_evaluator_exactly(rng):
    # dyadic weights and inputs keep every product and sum exact, so the
    # comparison is independent of summation order
    layers = []
    n_in = 3
    for width in (5, 4, 2):
        W = rng.integers(-8, 9, (width, n_in)) / 4.0
        b = rng.integers(-8, 9, width) / 8.0
        layers.append(Layer(W, b, np.full(width, -2.0), np.full(width, 1.5)))
        n_in = width
    layers.append(Layer.identity_acts(rng.integers(-4, 5, (2, n_in)) / 2.0, [0.25, -0.5]))
    net = HtnnSpec(layers)
    ref = [(L.W, L.b, L.lo, L.hi) for L in layers]
    for x in rng.integers(-16, 17, (50, 3)) / 8.0:
        np.testing.assert_array_equal(net(x), net_loops(ref, x))


def test_forward_matches_loop_evaluator_float(rng):
    f = random_minmax(2, 5, 3, 1)
    net, _ = build_scalar_minmax(f, BOX2)
    layers = [(L.W, L.b, L.lo, L.hi) for L in net.layers]
    for x in BOX2.sample(20, rng):
        np.testing.assert_allclose(net(x), net_loops(layers, x), rtol=0, atol=1e-14)


def test_compose_with_identity():
    net, _ = build_max_affine([AffineTerm([1.0, 0.0], 0.0), AffineTerm([0.0, 1.0], 0.0)], BOX2)
    ident = HtnnSpec([Layer.identity_acts(np.eye(1), np.zeros(1))])
    out = compose(ident, net)
    assert out.zeta == net.zeta
    xs = BOX2.sample(100, np.random.default_rng(0))
    np.testing.assert_array_equal(out(xs), net(xs))


def test_compose_random_pairs(rng):
    for seed in range(5):
        inner = build_vector_minmax(random_minmax_vector(2, 2, 4, 2, seed), BOX2)[0]
        box = BoxDomain(inner.output_lo - 1e-9, inner.output_hi + 1e-9)
        outer = build_scalar_minmax(random_minmax(2, 3, 2, seed + 100), box)[0]
        c = compose(outer, inner)
        assert c.zeta == outer.zeta + inner.zeta - 1
        assert c.width <= max(outer.width, inner.width, inner.output_dim)
        xs = BOX2.sample(1000, rng)
        np.testing.assert_allclose(c(xs), outer(inner(xs)), atol=1e-12)


def test_compose_after_hardtanh_output_adds_junction():
    inner = HtnnSpec([Layer(np.eye(2), np.zeros(2), [-1, -1], [1, 1])])
    outer = HtnnSpec([Layer.identity_acts(np.ones((1, 2)), np.zeros(1))])
    c = compose(outer, inner)
    assert c.zeta == 2 and c.size_report.notes
    np.testing.assert_allclose(c(np.array([3.0, 0.5])), [1.5])


def test_parallel_equal_depths():
    a = build_max_affine((np.eye(2), np.zeros(2)), BOX2)[0]
    b = build_max_affine((-np.eye(2), np.zeros(2)), BOX2)[0]
    p = parallel([a, b])
    assert p.zeta == a.zeta and p.r == a.r + b.r
    xs = BOX2.sample(200, np.random.default_rng(2))
    np.testing.assert_array_equal(p(xs), np.hstack([a(xs), b(xs)]))


def test_parallel_pads_shallow_branch(rng):
    a = build_max_affine((rng.standard_normal((2, 2)), rng.standard_normal(2)), BOX2)[0]
    b = build_max_affine((rng.standard_normal((7, 2)), rng.standard_normal(7)), BOX2)[0]
    assert (a.zeta, b.zeta) == (2, 4)
    p = parallel([a, b])
    assert p.zeta == 4
    assert p.r == a.r + b.r + 2 * 1
    assert p.width <= max(a.width, 2) + max(b.width, 2)
    xs = BOX2.sample(1000, rng)
    np.testing.assert_allclose(p(xs), np.hstack([a(xs), b(xs)]), atol=1e-12)


def test_parallel_needs_intervals():
    n = HtnnSpec([Layer.identity_acts(np.ones((1, 2)), [0.0])])
    deep = build_max_affine((np.eye(2), np.zeros(2)), BOX2)[0]
    with pytest.raises(ValueError):
        parallel([n, deep])


def test_pad_preserves_function(rng):
    net = build_max_affine((rng.standard_normal((3, 2)), rng.standard_normal(3)), BOX2)[0]
    deeper = pad_to_depth(net, net.zeta + 3)
    xs = BOX2.sample(300, rng)
    np.testing.assert_allclose(deeper(xs), net(xs), atol=1e-12)
    with pytest.raises(ValueError):
        pad_to_depth(net, 1)


def test_size_bound_example():
    assert scalar_bounds(3, 2) == (4, 6, 34)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000), n_x=st.integers(1, 3), m=st.integers(1, 6),
       l=st.integers(1, 4))
def test_scalar_minmax_exact(seed, n_x, m, l):  # noqa: E741
    f = random_minmax(n_x, m, l, seed)
    r = np.random.default_rng(seed)
    X = BoxDomain(-r.uniform(0.5, 3, n_x), r.uniform(0.5, 3, n_x))
    net, rep = build_scalar_minmax(f, X)
    xs = X.sample(2000, r)
    assert np.abs(net(xs)[:, 0] - eval_scalar(f, xs)).max() <= 1e-9
    assert rep.ok(), rep.to_dict()


def test_single_group_min_degenerate():
    f = random_minmax(2, 4, 1, 3)
    net, rep = build_scalar_minmax(f, BOX2)
    assert net.zeta == zeta_of(len(f.groups[0]))
    assert any("single group" in n for n in rep.notes)


def test_vector_single_output_identical():
    f = random_minmax(2, 4, 3, 8)
    a = build_scalar_minmax(f, BOX2)[0]
    b = build_vector_minmax(MinMaxVector([f]), BOX2)[0]
    assert a.to_dict() == b.to_dict()


def test_vector_two_identical_outputs():
    f = random_minmax(2, 4, 3, 8)
    a = build_scalar_minmax(f, BOX2)[0]
    b, rep = build_vector_minmax(MinMaxVector([f, f]), BOX2)
    assert b.zeta == a.zeta and b.r == 2 * a.r
    assert rep.ok()


def test_vector_exact(rng):
    f = random_minmax_vector(3, 3, 5, 3, seed=4)
    X = BoxDomain([-1, -2, -3], [2, 1, 0.5])
    net, rep = build_vector_minmax(f, X)
    xs = X.sample(10_000, rng)
    assert np.abs(net(xs) - eval_vector(f, xs)).max() <= 1e-9
    assert rep.ok() and len(rep.children) == 3


def test_interval_propagation_encloses(rng):
    f = random_minmax_vector(2, 2, 5, 3, seed=6)
    net, _ = build_vector_minmax(f, BOX2)
    ivs = propagate_intervals(net, BOX2.x_lo, BOX2.x_hi)
    y = net(BOX2.sample(5000, rng))
    lo, hi = ivs[-1][2], ivs[-1][3]
    assert np.all(y >= lo - 1e-12) and np.all(y <= hi + 1e-12)
    assert np.all(net.output_lo <= y.min(axis=0) + 1e-12)
    assert np.all(net.output_hi >= y.max(axis=0) - 1e-12)


def test_serialization_round_trip(tmp_path):
    f = random_minmax_vector(2, 2, 4, 2, seed=1)
    net, _ = build_vector_minmax(f, BOX2)
    p = tmp_path / "net.json"
    net.save(p)
    back = HtnnSpec.load(p)
    xs = BOX2.sample(100, np.random.default_rng(0))
    np.testing.assert_array_equal(back(xs), net(xs))
    assert back.size_report.to_dict() == net.size_report.to_dict()


def test_layer_validation():
    with pytest.raises(ValueError):
        Layer(np.eye(2), np.zeros(2), [0.0, -np.inf], [1.0, 1.0])
    with pytest.raises(ValueError):
        Layer(np.eye(2), np.zeros(2), [1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        HtnnSpec([Layer.identity_acts(np.eye(2), [0, 0]), Layer.identity_acts(np.eye(3), [0] * 3)])
