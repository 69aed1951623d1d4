from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfckq.errors import ConfigurationError, ContractError
from mfckq.geometry import EpsilonNet, LiftedPair, build_epsilon_net, dist_lifted
from mfckq.kernels import (
    ActionGridRegression,
    KernelSpec,
    is_separable,
    raw_affinity,
    regress,
    weights,
)

from conftest import random_pair


def state_only_net(states, epsilon):
    """Hand-placed state points with the single trivial action (|U| = 1)."""
    states = np.asarray(states, dtype=float)
    nx = states.shape[1]
    return EpsilonNet(
        epsilon=epsilon,
        step=float("nan"),
        grid="custom",
        states=states,
        actions=np.ones((1, nx, 1)),
        action_parts=np.zeros((1, nx), dtype=np.int64),
        row_grids=[np.ones((1, 1))] * nx,
        support_mask=np.ones((nx, 1), dtype=bool),
        analytic_radius=float("nan"),
    )


def brute_weights(net, c, spec):
    """Independent recomputation by scanning every net point."""
    d = np.array([dist_lifted(p, c) for p in net.points()])
    if spec.family == "knn":
        idx = np.argsort(d, kind="stable")[: spec.k]
        w = np.zeros(len(net))
        w[idx] = 1 / spec.k
        return w
    eps = spec.radius(net)
    phi = np.zeros(len(net))
    for i, di in enumerate(d):
        if di < eps - 1e-12:
            if spec.family == "triangular":
                phi[i] = eps - di
            elif spec.family == "gaussian":
                phi[i] = np.exp(-((eps - di) ** 2)) / np.sqrt(2 * np.pi)
            else:
                phi[i] = 1.0
    if phi.sum() == 0:
        phi[int(np.argmin(d))] = 1.0
    return phi / phi.sum()


def dense(wv, n):
    out = np.zeros(n)
    out[wv.indices] = wv.weights
    return out


def test_raw_affinity_examples():
    assert raw_affinity(KernelSpec("triangular"), 0.0, 0.1) == pytest.approx(0.1)
    assert raw_affinity(KernelSpec("constant"), 0.2, 0.1) == 0
    assert raw_affinity(KernelSpec("gaussian"), 0.1, 0.1) == pytest.approx(0.3989, abs=1e-4)
    assert raw_affinity(KernelSpec("triangular"), 0.3, 0.1) == 0


def test_kernel_spec_validation():
    with pytest.raises(ConfigurationError):
        KernelSpec("epanechnikov")
    with pytest.raises(ConfigurationError):
        KernelSpec(bandwidth=0.0)
    with pytest.raises(ConfigurationError):
        KernelSpec("knn", k=0)
    assert KernelSpec.parse("3-nn") == KernelSpec("knn", k=3)
    assert KernelSpec.parse("1-NN").label == "1-nn"
    with pytest.raises(ConfigurationError):
        KernelSpec.parse("x-nn")


def test_constant_kernel_two_neighbours():
    net = state_only_net([[0.5, 0.5], [0.55, 0.45], [1.0, 0.0]], epsilon=0.2)
    c = LiftedPair(np.array([0.52, 0.48]), np.ones((2, 1)))
    wv = weights(net, c, KernelSpec("constant"))
    assert wv.as_dict() == pytest.approx({0: 0.5, 1: 0.5})


def test_triangular_weights_two_thirds():
    # l1 distances 0.02 and 0.06 from the query; phi = 0.08 and 0.04
    net = state_only_net([[0.51, 0.49], [0.47, 0.53], [0.9, 0.1]], epsilon=0.1)
    c = LiftedPair(np.array([0.5, 0.5]), np.ones((2, 1)))
    wv = weights(net, c, KernelSpec("triangular"))
    assert wv.as_dict() == pytest.approx({0: 2 / 3, 1: 1 / 3}, abs=1e-12)
    q = np.array([3.0, 0.0, 100.0])
    assert regress(q, c, net, KernelSpec("triangular")) == pytest.approx(2.0, abs=1e-12)


def test_query_at_isolated_net_point(coarse_net):
    spec = KernelSpec("triangular")
    for i in (0, 100, len(coarse_net) - 1):
        wv = weights(coarse_net, coarse_net.point(i), spec)
        assert wv.as_dict() == {i: 1.0}


def test_fallback_to_nearest():
    net = state_only_net([[1.0, 0.0], [0.0, 1.0]], epsilon=0.1)
    c = LiftedPair(np.array([0.7, 0.3]), np.ones((2, 1)))
    assert weights(net, c, KernelSpec("triangular")).as_dict() == {0: 1.0}


def test_regress_constant_table(coarse_net):
    rng = np.random.default_rng(0)
    q = np.full(len(coarse_net), -3.25)
    for fam in ("triangular", "gaussian", "constant"):
        c = LiftedPair(*random_pair(rng, coarse_net.support_mask))
        assert regress(q, c, coarse_net, KernelSpec(fam)) == pytest.approx(-3.25, abs=1e-12)


def test_regress_missing_entries(coarse_net):
    with pytest.raises(ContractError):
        regress(np.zeros(3), coarse_net.point(0), coarse_net, KernelSpec())


@pytest.mark.parametrize("spec", [
    KernelSpec("triangular"),
    KernelSpec("gaussian", bandwidth=0.8),
    KernelSpec("constant", bandwidth=0.7),
    KernelSpec("knn", k=3),
])
def test_weights_match_brute_force(coarse_net, spec):
    rng = np.random.default_rng(5)
    q = rng.normal(size=len(coarse_net))
    for _ in range(25):
        c = LiftedPair(*random_pair(rng, coarse_net.support_mask))
        w = dense(weights(coarse_net, c, spec), len(coarse_net))
        expect = brute_weights(coarse_net, c, spec)
        if spec.family == "knn":
            # ties may be broken differently; compare the regressed value's distances instead
            d = np.array([dist_lifted(p, c) for p in coarse_net.points()])
            np.testing.assert_allclose(np.sort(d[w > 0]), np.sort(d)[:3], atol=1e-12)
        else:
            np.testing.assert_allclose(w, expect, atol=1e-12)
            assert regress(q, c, coarse_net, spec) == pytest.approx(float(expect @ q), abs=1e-10)


def test_l2_metric_weights(small_net):
    spec = KernelSpec("triangular", metric="l2", bandwidth=0.6)
    rng = np.random.default_rng(4)
    for _ in range(10):
        c = LiftedPair(*random_pair(rng, small_net.support_mask))
        wv = weights(small_net, c, spec)
        assert wv.weights.sum() == pytest.approx(1.0, abs=1e-12)
        d = np.array([np.sqrt(((p.mu - c.mu) ** 2).sum() + ((p.h - c.h) ** 2).sum()) for p in small_net.points()])
        if (d < 0.6 - 1e-12).any():
            assert np.all(d[wv.indices] < 0.6)


@given(st.integers(0, 10**6), st.floats(-50, 50), st.sampled_from(["triangular", "gaussian", "constant", "2-nn"]))
def test_shift_equivariance(coarse_net, seed, kappa, family):
    rng = np.random.default_rng(seed)
    spec = KernelSpec.parse(family)
    q = rng.normal(size=len(coarse_net)) * 10
    c = LiftedPair(*random_pair(rng, coarse_net.support_mask))
    assert regress(q + kappa, c, coarse_net, spec) == pytest.approx(regress(q, c, coarse_net, spec) + kappa, abs=1e-12)


@given(st.integers(0, 10**6), st.sampled_from(["triangular", "gaussian", "constant"]),
       st.floats(0.2, 2.0))
def test_weight_axioms(coarse_net, seed, family, bw):
    rng = np.random.default_rng(seed)
    spec = KernelSpec(family, bandwidth=bw)
    c = LiftedPair(*random_pair(rng, coarse_net.support_mask))
    wv = weights(coarse_net, c, spec)
    assert np.all(wv.weights >= 0)
    assert abs(wv.weights.sum() - 1) <= 1e-12
    d = coarse_net.distances(c)[wv.indices]
    if len(wv.indices) > 1 or d[0] < bw:
        assert np.all(d < bw)


# action-grid regression ------------------------------------------------------

@pytest.mark.parametrize("spec,mode", [
    (KernelSpec("triangular"), "separable"),
    (KernelSpec("knn", k=1), "separable"),
    (KernelSpec("knn", k=3), "knn"),
    (KernelSpec("gaussian", bandwidth=0.9), "general"),
    (KernelSpec("constant", metric="l2", bandwidth=0.8), "general"),
])
def test_action_grid_matches_pointwise(coarse_net, spec, mode):
    rng = np.random.default_rng(9)
    mus = rng.dirichlet(np.ones(3), size=6)
    mus[0] = coarse_net.states[3]
    op = ActionGridRegression(coarse_net, spec, mus)
    assert op.mode == mode
    q = rng.normal(size=len(coarse_net))
    vals = op.values(q)
    for m, mu in enumerate(mus):
        for k in range(coarse_net.n_actions_net):
            c = LiftedPair(mu, coarse_net.actions[k])
            assert vals[m, k] == pytest.approx(regress(q, c, coarse_net, spec), abs=1e-10)
    best, arg = op.maxima(q)
    np.testing.assert_allclose(best, vals.max(axis=1))
    np.testing.assert_array_equal(arg, vals.argmax(axis=1))


def test_knn_ties_prefer_lower_index():
    net = build_epsilon_net(2, 1, 1.0, certify_samples=0)   # states (0,1), (0.5,0.5), (1,0)
    c = LiftedPair(np.array([0.75, 0.25]), np.ones((2, 1)))
    wv = weights(net, c, KernelSpec("knn", k=1))
    assert wv.indices.tolist() == [1]


def test_separability(coarse_net):
    assert is_separable(coarse_net, KernelSpec("triangular"))
    assert not is_separable(coarse_net, KernelSpec("triangular", bandwidth=0.9))
    assert not is_separable(coarse_net, KernelSpec("knn", k=3))


@pytest.fixture(scope="module")
def certified_net():
    mask = np.tril(np.ones((3, 3), dtype=bool))
    net = build_epsilon_net(3, 3, 0.5, mask, grid="covering", certify_samples=5000)
    assert net.certified
    return net


def test_non_expansive(certified_net):
    rng = np.random.default_rng(8)
    for fam in ("triangular", "gaussian", "constant", "3-nn"):
        spec = KernelSpec.parse(fam)
        for _ in range(20):
            q1, q2 = rng.normal(size=(2, len(certified_net))) * 5
            c = LiftedPair(*random_pair(rng, certified_net.support_mask))
            lhs = abs(regress(q1, c, certified_net, spec) - regress(q2, c, certified_net, spec))
            assert lhs <= np.max(np.abs(q1 - q2)) + 1e-12


def perturb(rng, mu, h, size):
    """Nearby pair: mix with a random point of the same masked simplices."""
    mu2, h2 = random_pair(rng, h > -1)
    h2 = np.where(h > 0, h2, 0)
    h2 /= h2.sum(axis=1, keepdims=True)
    return (1 - size) * mu + size * mu2, (1 - size) * h + size * h2


def test_triangular_weights_lipschitz(certified_net):
    net, spec = certified_net, KernelSpec("triangular")
    rng = np.random.default_rng(12)
    ratios = []
    for _ in range(300):
        mu, h = random_pair(rng, net.support_mask)
        mu2, h2 = perturb(rng, mu, h, 1e-3)
        a, b = LiftedPair(mu, h), LiftedPair(mu2, h2)
        d = dist_lifted(a, b)
        if d == 0:
            continue
        diff = np.max(np.abs(dense(weights(net, a, spec), len(net)) - dense(weights(net, b, spec), len(net))))
        ratios.append(diff / d)
    # phi is 1-Lipschitz and the normaliser stays away from zero on a certified net
    assert max(ratios) < 1e3
    assert np.median(ratios) < 50


def test_gaussian_weights_lipschitz_on_fixed_support(certified_net):
    # gaussian affinity is positive at the bandwidth edge, so weights jump when
    # a point enters or leaves the support; away from such crossings they are smooth
    net, spec = certified_net, KernelSpec("gaussian")
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(300):
        mu, h = random_pair(rng, net.support_mask)
        mu2, h2 = perturb(rng, mu, h, 1e-4)
        a, b = LiftedPair(mu, h), LiftedPair(mu2, h2)
        wa, wb = weights(net, a, spec), weights(net, b, spec)
        if wa.indices.tolist() != wb.indices.tolist():
            continue
        worst = max(worst, np.max(np.abs(wa.weights - wb.weights)) / dist_lifted(a, b))
    assert worst < 10


def test_knn_weights_uniform(certified_net):
    rng = np.random.default_rng(14)
    c = LiftedPair(*random_pair(rng, certified_net.support_mask))
    assert weights(certified_net, c, KernelSpec("knn", k=1)).weights.tolist() == [1.0]
    np.testing.assert_allclose(weights(certified_net, c, KernelSpec("knn", k=4)).weights, 0.25)
