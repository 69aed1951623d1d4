from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfckq.env import CongestionEnv, CongestionParams, congestion_flow
from mfckq.errors import ContractError
from mfckq.geometry import build_epsilon_net
from mfckq.kernels import KernelSpec
from mfckq.nagent import (
    GapRow,
    apply_mfc_policy,
    discounted_returns,
    empirical_state_dist,
    evaluate_c1,
    evaluate_c2,
    loglog_slope,
    meanfield_gap,
    meanfield_rollout,
    nagent_step,
    rollout,
)
from mfckq.solver import QTable, SolverConfig, exact_store, extract_policy, make_net, solve_fixed_point


def fixed(h):
    h = np.asarray(h, dtype=float)
    return lambda mu: h


SEND_NONE = np.eye(3)[[0, 0, 0]]
SEND_MAX = np.eye(3)[[0, 1, 2]]
SEND_ONE = np.eye(3)[[0, 1, 1]]


@pytest.fixture(scope="module")
def learned(cenv):
    cfg = SolverConfig(epsilon=0.5)
    net = make_net(cenv, cfg)
    return extract_policy(solve_fixed_point(exact_store(cenv, net), net, cfg))


def test_empirical_state_dist():
    np.testing.assert_array_equal(empirical_state_dist([0, 0, 1, 1], 2), [0.5, 0.5])
    np.testing.assert_array_equal(empirical_state_dist([0] * 7, 3), [1, 0, 0])
    rng = np.random.default_rng(0)
    joint = rng.integers(0, 4, 333)
    manual = [sum(1 for v in joint if v == x) / 333 for x in range(4)]
    np.testing.assert_allclose(empirical_state_dist(joint, 4), manual)
    with pytest.raises(ContractError):
        empirical_state_dist([0, 3], 3)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=200))
def test_histogram_integral(joint):
    mu = empirical_state_dist(joint, 5)
    counts = mu * len(joint)
    np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)
    assert abs(mu.sum() - 1) < 1e-12


def test_idle_step_keeps_joint(params):
    joint = np.array([1, 2, 2, 1, 1])
    nxt, r = nagent_step(params, joint, SEND_NONE, np.random.default_rng(0))
    np.testing.assert_array_equal(nxt, joint)
    L = joint.mean()
    np.testing.assert_allclose(r, -params.b * L**2)


def test_single_agent_holds(params):
    nxt, _ = nagent_step(params, np.array([1]), SEND_NONE, np.random.default_rng(1))
    assert nxt.tolist() == [1]


def test_mask_violation(params):
    with pytest.raises(ContractError):
        nagent_step(params, np.array([0, 1]), np.full((3, 3), 1 / 3), np.random.default_rng(0))


def test_no_loss_under_capacity():
    params = CongestionParams(c=10.0)
    joint = np.array([2] * 50)
    nxt, r = nagent_step(params, joint, SEND_MAX, np.random.default_rng(3))
    # every agent empties its queue and refills uniformly
    assert set(nxt.tolist()) <= {0, 1, 2}
    np.testing.assert_allclose(r, 30 * 2 - 10 * 4)


def test_step_frequencies_within_bands(params):
    """Single seeded steps from a fixed joint state against the mean-field flow."""
    n = 3000
    mu = np.array([0.2, 0.3, 0.5])
    joint = np.repeat(np.arange(3), (mu * n).astype(int))
    h = np.array([[1, 0, 0], [0.4, 0.6, 0], [0.2, 0.3, 0.5]])
    phi = congestion_flow(params, mu, h)
    sigma = np.sqrt(phi * (1 - phi) / n)
    hits = 0
    trials = 400
    for s in range(trials):
        nxt, _ = nagent_step(params, joint, h, np.random.default_rng(s))
        hits += bool(np.all(np.abs(empirical_state_dist(nxt, 3) - phi) <= 3 * sigma))
    assert hits / trials >= 0.95


def test_rollout_discounting(params):
    rng = np.random.default_rng(0)
    res = rollout(fixed(SEND_ONE), params, rng.integers(0, 3, 40), 6, 0.7, rng, keep_path=True)
    assert res.discounted == pytest.approx(sum(0.7**t * r for t, r in enumerate(res.rewards)))
    assert res.mus.shape == (6, 3)


def test_zero_reward_environment():
    params = CongestionParams(a=0.0, b=0.0, d=0.0)
    est = evaluate_c1(fixed(SEND_MAX), params, 10, 4, 5, 0.5, seed=1, repeats=3)
    assert est.mean == 0.0 and est.ci_low == 0.0 and est.ci_high == 0.0


def test_gamma_zero_keeps_first_round(params):
    long = discounted_returns([fixed(SEND_ONE)], params, 20, 6, 8, 0.0, seed=3)
    short = discounted_returns([fixed(SEND_ONE)], params, 20, 6, 1, 0.9, seed=3)
    np.testing.assert_allclose(long, short)


def test_c1_interval_and_threads(params, learned):
    a = evaluate_c1(learned, params, 15, 6, 10, 0.5, seed=2, repeats=4)
    b = evaluate_c1(learned, params, 15, 6, 10, 0.5, seed=2, repeats=4, threads=3)
    assert a.ci_low <= a.mean <= a.ci_high
    assert a.mean == b.mean
    np.testing.assert_array_equal(a.per_repeat, b.per_repeat)


def test_c2_identical_policies_exactly_zero(params, learned):
    est = evaluate_c2(learned, learned, params, 12, 5, 10, 0.5, seed=4, repeats=3)
    assert est.mean == 0.0
    assert np.all(est.per_repeat == 0.0)


def test_c2_rigged_better_policy():
    # only throughput is rewarded, so sending everything beats holding back
    params = CongestionParams(b=0.0, d=0.0, c=10.0)
    est = evaluate_c2(fixed(SEND_MAX), fixed(SEND_ONE), params, 20, 5, 6, 0.5, seed=0, repeats=3)
    assert est.mean > 0
    swapped = evaluate_c2(fixed(SEND_ONE), fixed(SEND_MAX), params, 20, 5, 6, 0.5, seed=0, repeats=3)
    assert swapped.mean < 0


def test_c2_division_guard():
    params = CongestionParams(a=0.0, b=0.0, d=0.0)
    est = evaluate_c2(fixed(SEND_MAX), fixed(SEND_ONE), params, 5, 4, 3, 0.5, seed=0, repeats=2)
    assert est.excluded == 8
    assert np.isnan(est.mean)


def test_apply_policy(learned):
    single_net = build_epsilon_net(3, 1, 0.5, certify_samples=0)
    only = extract_policy(QTable(np.zeros(len(single_net)), single_net, KernelSpec(), 0.5))
    np.testing.assert_array_equal(apply_mfc_policy(only, [0, 1, 2], 3), np.ones((3, 1)))
    a = apply_mfc_policy(learned, [0, 1, 1, 2, 2, 2], 3)
    b = apply_mfc_policy(learned, [2, 2, 1, 0, 2, 1], 3)
    np.testing.assert_array_equal(a, b)
    mu = empirical_state_dist([0, 1, 1, 2, 2, 2], 3)
    np.testing.assert_array_equal(a, learned.net.actions[learned.action_index(mu)])


def test_gap_zero_for_deterministic_population(params):
    # nobody sends and nobody is empty: the population never moves
    rows = meanfield_gap(fixed(SEND_NONE), params, [5, 50], 10, 0.5, seeds=[0, 1], rollouts=3,
                         mu0=np.array([0.0, 1.0, 0.0]))
    assert all(r.gap == pytest.approx(0.0, abs=1e-12) for r in rows)
    env = CongestionEnv(params)
    v = meanfield_rollout(fixed(SEND_NONE), env, [0, 1, 0], 10, 0.5).discounted
    assert rows[0].meanfield_value == pytest.approx(v)
    assert rows[0].tail_bound == pytest.approx(0.5**10 * 400)


def test_loglog_slope_recovers_power():
    rows = [GapRow(n, s, 0.0, 0.0, 3.0 * n**-0.5, 0.0) for n in (10, 20, 40, 80) for s in range(3)]
    slope, med = loglog_slope(rows)
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert med[10] == pytest.approx(3.0 / np.sqrt(10))
