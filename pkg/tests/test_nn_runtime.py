import numpy as np
import pytest

from htmpc.htnn import HtnnSpec, Layer, build_vector_minmax
from htmpc.minmax import BoxDomain, random_minmax_vector
from htmpc.nn_runtime import (
    NonFiniteActivation, difference_quotients, forward, lipschitz_cert, perturbation_check,
    spectral_norm,
)


def random_net(rng, sizes=(3, 6, 5, 2)):
    layers = []
    for k in range(len(sizes) - 1):
        W = rng.standard_normal((sizes[k + 1], sizes[k]))
        b = rng.standard_normal(sizes[k + 1])
        if k < len(sizes) - 2:
            layers.append(Layer(W, b, -np.ones(sizes[k + 1]), np.ones(sizes[k + 1])))
        else:
            layers.append(Layer.identity_acts(W, b))
    return HtnnSpec(layers)


def test_identity_network():
    net = HtnnSpec([Layer.identity_acts(np.eye(3), np.zeros(3))])
    x = np.array([1.5, -2.0, 7.0])
    np.testing.assert_array_equal(forward(net, x), x)
    assert lipschitz_cert(net).L == pytest.approx(1.0)


def test_single_hardtanh_neuron():
    net = HtnnSpec([Layer([[1.0]], [0.0], [-1.0], [1.0])])
    assert forward(net, np.array([5.0]))[0] == 1.0


def test_scaled_identity_bound():
    net = HtnnSpec([Layer.identity_acts(3 * np.eye(4), np.zeros(4))])
    assert lipschitz_cert(net).L == pytest.approx(3.0, rel=1e-12)


def test_hidden_values_and_batch(rng):
    net = random_net(rng)
    X = rng.standard_normal((10, 3))
    out, pre = forward(net, X, return_hidden=True)
    assert len(pre) == 3 and out.shape == (10, 2)
    np.testing.assert_allclose(out, np.array([forward(net, x) for x in X]), atol=1e-15)


def test_non_finite_reports_layer():
    net = HtnnSpec([Layer.identity_acts([[1e308]], [0.0]),
                    Layer.identity_acts([[1e308]], [0.0])])
    with pytest.raises(NonFiniteActivation, match="layer 2"):
        forward(net, np.array([1.0]))


def test_wrong_input_length(rng):
    with pytest.raises(ValueError):
        forward(random_net(rng), np.zeros(4))


def test_spectral_norm_matches_svd(rng):
    for shape in ((5, 3), (2, 7), (10, 10), (1, 4)):
        W = rng.standard_normal(shape)
        assert spectral_norm(W) == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-8)
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_spectral_norm_repeated_top_singular_value():
    W = np.diag([2.0, 2.0, 1.0])
    assert spectral_norm(W) == pytest.approx(2.0, rel=1e-10)


def test_certificate_dominates_sampled_quotients(rng):
    net = random_net(rng)
    L = lipschitz_cert(net).L
    xs = rng.standard_normal((10_000, 3))
    eps = rng.standard_normal((10_000, 3)) * 10 ** rng.uniform(-6, 0, (10_000, 1))
    assert difference_quotients(net, xs, eps).max() <= L


def test_perturbation_trivial_cases(rng):
    net = random_net(rng)
    assert perturbation_check(net, np.zeros(3), np.zeros((5, 3)), lipschitz_cert(net).L)
    zero = HtnnSpec([Layer.identity_acts(np.zeros((2, 3)), np.ones(2))])
    assert perturbation_check(zero, rng.standard_normal(3), rng.standard_normal((5, 3)), 0.0)


def test_perturbation_on_exact_mpc_net(rng):
    X = BoxDomain([-1, -1], [1, 1])
    net, _ = build_vector_minmax(random_minmax_vector(2, 2, 5, 3, seed=2), X)
    L = lipschitz_cert(net).L
    assert perturbation_check(net, np.array([0.1, -0.3]), rng.standard_normal((1000, 2)) * 0.1, L)


def test_perturbation_detects_violation():
    net = HtnnSpec([Layer.identity_acts([[2.0]], [0.0])])
    assert not perturbation_check(net, np.array([0.0]), np.array([[1.0]]), 1.0)
