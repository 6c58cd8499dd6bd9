import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_mpc
from htmpc.box_qp import BoxQp, apgd, pgd
from htmpc.mpc_core import LtiSystem, MpcProblem, condense, prediction_matrices
from htmpc.nn_runtime import forward, lipschitz_cert
from htmpc.unfolded import (
    UnfoldedParams, assemble_structured, forward_unfolded, init_from_mpc, init_structured,
    load_params, power_stack, to_htnn, triangular_masks,
)


def apgd_iterate(qp, x0, k, beta=None):
    rep = apgd(BoxQp.from_condensed(qp, x0), tol=-1.0, max_iter=k, beta=beta, record=True)
    return rep.iterates[k]


def test_scalar_single_step_by_hand():
    sys = LtiSystem([[1.0]], [[1.0]])
    mpc = MpcProblem(Q=[[1.0]], R=[[1.0]], P=[[1.0]], N=2, u_lo=[-1.0], u_hi=[1.0])
    qp = condense(sys, mpc)
    p = init_from_mpc(qp, depth=2, alpha=0.25, beta=0.0)
    # u1 = clip(-(1/4) [4, 2]) from u0 = 0 at x0 = 2
    np.testing.assert_allclose(p(np.array([2.0])), [-1.0, -0.5])
    p = init_from_mpc(qp, depth=3, alpha=0.25, beta=0.0)
    # u2 = clip(u1 - 1/4 (H u1 + q)) = clip([-1, -0.5] - 1/4 [-3.5 + 4, -2 + 2])
    np.testing.assert_allclose(p(np.array([2.0])), [-1.0, -0.5])


def test_zero_state_gives_zero():
    sys, mpc = random_mpc(np.random.default_rng(3))
    p = init_from_mpc(condense(sys, mpc), depth=6)
    np.testing.assert_array_equal(p(np.zeros(sys.n_x)), np.zeros(p.nu))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), depth=st.integers(2, 25))
def test_oracle_init_reproduces_apgd(seed, depth):
    r = np.random.default_rng(seed)
    sys, mpc = random_mpc(r)
    qp = condense(sys, mpc)
    p = init_from_mpc(qp, depth)
    x0 = r.standard_normal(sys.n_x) * 2
    np.testing.assert_allclose(p(x0), apgd_iterate(qp, x0, depth - 1), rtol=0, atol=1e-12)


def test_beta_zero_is_pgd_bitwise(rng):
    sys, mpc = random_mpc(rng, n_x=4, n_u=2, N=4)
    qp = condense(sys, mpc)
    p = init_from_mpc(qp, 8, beta=0.0)
    x0 = rng.standard_normal(4)
    ref = pgd(BoxQp.from_condensed(qp, x0), tol=-1.0, max_iter=7, record=True).iterates[7]
    np.testing.assert_array_equal(p(x0), ref)


def test_depth_three_is_two_pgd_steps(rng):
    sys, mpc = random_mpc(rng)
    qp = condense(sys, mpc)
    x0 = rng.standard_normal(sys.n_x)
    ref = pgd(BoxQp.from_condensed(qp, x0), tol=-1.0, max_iter=2, record=True).iterates[2]
    np.testing.assert_array_equal(init_from_mpc(qp, 3, beta=0.0)(x0), ref)


def test_batch_forward_matches_single(rng):
    sys, mpc = random_mpc(rng)
    p = init_from_mpc(condense(sys, mpc), 5)
    X = rng.standard_normal((6, sys.n_x))
    np.testing.assert_allclose(forward_unfolded(p, X), np.array([p(x) for x in X]), atol=1e-14)


def test_output_inside_box(rng):
    sys, mpc = random_mpc(rng)
    p = init_from_mpc(condense(sys, mpc), 4)
    for k, v in p.arrays.items():
        v += rng.standard_normal(v.shape)
    U = forward_unfolded(p, rng.standard_normal((50, sys.n_x)) * 10)
    assert np.all(U >= p.lo) and np.all(U <= p.hi)


def test_structured_equals_dense(rng):
    for _ in range(5):
        sys, mpc = random_mpc(rng, identity_R=True)
        qp = condense(sys, mpc)
        dense = init_from_mpc(qp, 6, N=mpc.N)
        x0 = rng.standard_normal(sys.n_x)
        for ss in (False, True):
            s = init_structured(sys, mpc, 6, super_structured=ss)
            np.testing.assert_allclose(s(x0), dense(x0), atol=1e-10)


def test_structured_requires_identity_R(rng):
    sys, mpc = random_mpc(rng, n_u=2)
    with pytest.raises(ValueError, match="R = I"):
        init_structured(sys, mpc, 3)


def test_alpha_one_beta_zero_first_layer(rng):
    sys, mpc = random_mpc(rng, identity_R=True)
    p = init_structured(sys, mpc, 3, alpha=1.0, beta=0.0)
    mats = assemble_structured(p)
    Q11, Q12 = p.arrays["Q11"][0], p.arrays["Q12"][0]
    np.testing.assert_allclose(mats[0].W2, -Q11 @ Q12, atol=1e-12)
    np.testing.assert_allclose(mats[1].W2, -Q11 @ Q12, atol=1e-12)
    np.testing.assert_array_equal(mats[1].W1, 0.0)


def test_power_stack_is_prediction_matrix(rng):
    sys, _ = random_mpc(rng, n_x=3)
    _, A_N = prediction_matrices(sys, 4)
    np.testing.assert_allclose(power_stack(sys.A, 4), A_N, atol=1e-14)


def test_masks_pattern_and_idempotence(rng):
    sys, mpc = random_mpc(rng, n_x=2, n_u=1, N=3, identity_R=True)
    A_blk, _ = prediction_matrices(sys, 3)
    m11, m12 = triangular_masks(3, 2, 1)
    assert np.all(A_blk[m12 == 0] == 0)
    p = init_structured(sys, mpc, 4, super_structured=True)
    p.arrays["Q11"] += 1.0
    p.apply_masks()
    once = p.arrays["Q11"].copy()
    p.apply_masks()
    np.testing.assert_array_equal(p.arrays["Q11"], once)
    assert np.all(p.arrays["Q11"][:, m11 == 0] == 0)


def test_mask_guard(rng):
    sys, mpc = random_mpc(rng, n_x=2, n_u=1, N=3, identity_R=True)
    p = init_structured(sys, mpc, 3, super_structured=True)
    p.arrays["Q12"][0, 0, 2] = 1.0
    with pytest.raises(AssertionError):
        assemble_structured(p)


def test_project_restores_invariants(rng):
    sys, mpc = random_mpc(rng, identity_R=True)
    p = init_structured(sys, mpc, 4, super_structured=True)
    p.arrays["alpha"][:] = -1.0
    p.arrays["beta"][:] = -0.5
    p.project()
    assert np.all(p.arrays["alpha"] > 0) and np.all(p.arrays["beta"] == 0)


def test_round_trip(tmp_path, rng):
    sys, mpc = random_mpc(rng, identity_R=True)
    for p in (init_from_mpc(condense(sys, mpc), 4),
              init_structured(sys, mpc, 4), init_structured(sys, mpc, 2, super_structured=True)):
        path = tmp_path / f"{p.variant}.json"
        p.save(path)
        q = load_params(path)
        x0 = rng.standard_normal(sys.n_x)
        np.testing.assert_array_equal(q(x0), p(x0))


def test_shape_validation(rng):
    sys, mpc = random_mpc(rng)
    p = init_from_mpc(condense(sys, mpc), 3)
    arrays = {k: v.copy() for k, v in p.arrays.items()}
    arrays["Q2"] = arrays["Q2"][:, :, :0]
    with pytest.raises(ValueError):
        UnfoldedParams("dense", 3, p.n_x, p.nu, p.N, p.lo, p.hi, p.u0, arrays)
    with pytest.raises(ValueError):
        UnfoldedParams("sparse", 3, p.n_x, p.nu, p.N, p.lo, p.hi, p.u0, p.arrays)


def test_flattened_network_is_equivalent(rng):
    sys, mpc = random_mpc(rng, identity_R=True)
    for p in (init_from_mpc(condense(sys, mpc), 5), init_structured(sys, mpc, 4, True)):
        net = to_htnn(p)
        assert net.zeta == p.depth
        X = rng.standard_normal((100, sys.n_x))
        np.testing.assert_allclose(forward(net, X), forward_unfolded(p, X), atol=1e-12)
        L = lipschitz_cert(net).L
        E = rng.standard_normal((100, sys.n_x)) * 1e-3
        q = np.linalg.norm(forward_unfolded(p, X + E) - forward_unfolded(p, X), axis=1)
        assert np.all(q <= L * np.linalg.norm(E, axis=1) * (1 + 1e-12))


def test_nonzero_start(rng):
    sys, mpc = random_mpc(rng)
    qp = condense(sys, mpc)
    u0 = np.clip(rng.standard_normal(qp.nu), qp.lo, qp.hi)
    p = init_from_mpc(qp, 5, u0=u0)
    x0 = rng.standard_normal(sys.n_x)
    rep = apgd(BoxQp.from_condensed(qp, x0), u0=u0, tol=-1.0, max_iter=4, record=True)
    np.testing.assert_allclose(p(x0), rep.iterates[4], atol=1e-12)
