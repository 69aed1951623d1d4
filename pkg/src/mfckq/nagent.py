"""Finite-population congestion simulator and policy evaluation.

Every rollout owns an independent random stream derived from
``SeedSequence([seed, repeat, rollout])``, and each step draws the same number
of variates whatever the policy does, so two policies evaluated with the same
seed see common random numbers.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .env import CongestionEnv, CongestionParams, _check_mask, loss_probability
from .errors import ContractError

Policy = Callable[[np.ndarray], np.ndarray]

DIVISION_GUARD = 1e-9


def empirical_state_dist(joint, num_states: int) -> np.ndarray:
    joint = np.asarray(joint)
    if joint.size == 0 or joint.min() < 0 or joint.max() >= num_states:
        raise ContractError("joint state entries must lie in 0..num_states-1")
    return np.bincount(joint, minlength=num_states) / joint.size


def nagent_step(params: CongestionParams, joint, h, rng: np.random.Generator):
    """Advance every agent one round; returns ``(next_joint, per_agent_rewards)``.

    Each agent draws its rate from ``h(x)``; with the realised mean rate F each
    sent packet is lost independently with probability ``(F - c) / F``; lost
    packets stay queued; agents left with an empty queue refill uniformly.
    Per-agent reward is ``a * delivered - b * L**2 - d * lost`` with L the
    population mean queue length (the link's queueing latency).
    """
    h = _check_mask(params, h)
    joint = np.asarray(joint, dtype=np.int64)
    n = joint.size
    u_draw = rng.random(n)
    loss_draw = rng.random(n)
    refill = rng.integers(0, params.num_states, n)

    cdf = np.cumsum(h[joint], axis=1)
    cdf[:, -1] = 1.0
    u = (cdf <= u_draw[:, None]).sum(axis=1)
    if np.any(u > joint):
        raise ContractError("sampled action overshoots the queue")

    F = u.mean()
    p = loss_probability(params, F)
    lost = (loss_draw < p) & (u > 0)
    sent = np.where(lost, 0, u)
    post = joint - sent
    latency = joint.mean()
    rewards = params.a * sent - params.b * latency**2 - params.d * (u - sent)
    post = np.where(post == 0, refill, post)
    return post, rewards


@dataclass
class RolloutResult:
    rewards: np.ndarray          # mean agent reward per round, rounds 1..T0
    discounted: float            # sum over rounds t = 1..T0 of gamma**(t-1) * rewards[t-1]
    mus: np.ndarray | None = None


def _discount(rewards: np.ndarray, gamma: float) -> float:
    # the first round is undiscounted, as in the value function being approximated
    weights = gamma ** np.arange(len(rewards), dtype=float)
    return float(np.dot(weights, rewards))


def rollout(policy: Policy, params: CongestionParams, joint0, horizon: int, gamma: float,
            rng: np.random.Generator, keep_path: bool = False) -> RolloutResult:
    joint = np.asarray(joint0, dtype=np.int64)
    rewards = np.empty(horizon)
    path = [] if keep_path else None
    for t in range(horizon):
        mu = empirical_state_dist(joint, params.num_states)
        if keep_path:
            path.append(mu)
        joint, r = nagent_step(params, joint, policy(mu), rng)
        rewards[t] = r.mean()
    return RolloutResult(rewards, _discount(rewards, gamma), np.array(path) if keep_path else None)


def meanfield_rollout(policy: Policy, env: CongestionEnv, mu0, horizon: int, gamma: float) -> RolloutResult:
    """Deterministic mean-field counterpart of :func:`rollout`."""
    mu = np.asarray(mu0, dtype=float)
    rewards = np.empty(horizon)
    path = []
    for t in range(horizon):
        path.append(mu)
        tr = env.step(mu, policy(mu))
        rewards[t] = tr.reward
        mu = tr.next_mu
    return RolloutResult(rewards, _discount(rewards, gamma), np.array(path))


def apply_mfc_policy(policy: Policy, joint, num_states: int) -> np.ndarray:
    return policy(empirical_state_dist(joint, num_states))


def _rollout_rng(seed: int, repeat: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, repeat, k]))


def _initial_joint(rng, n: int, num_states: int, mu0=None) -> np.ndarray:
    if mu0 is None:
        return rng.integers(0, num_states, n)
    return rng.choice(num_states, size=n, p=np.asarray(mu0, dtype=float))


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def discounted_returns(policies: Sequence[Policy], params: CongestionParams, n_agents: int, rollouts: int,
                       horizon: int, gamma: float, seed: int, repeat: int = 0, threads: int = 1,
                       mu0=None) -> np.ndarray:
    """``(len(policies), rollouts)`` discounted returns on shared initial states and streams."""

    def one(k):
        row = []
        for pol in policies:
            rng = _rollout_rng(seed, repeat, k)
            joint0 = _initial_joint(rng, n_agents, params.num_states, mu0)
            row.append(rollout(pol, params, joint0, horizon, gamma, rng).discounted)
        return row

    return np.array(_map(one, range(rollouts), threads)).T.reshape(len(policies), rollouts)


@dataclass
class Estimate:
    mean: float
    ci_low: float
    ci_high: float
    per_repeat: np.ndarray = field(repr=False)
    excluded: int = 0


def _summarise(per_repeat: np.ndarray, level: float = 0.95, excluded: int = 0) -> Estimate:
    m = float(np.mean(per_repeat))
    if len(per_repeat) < 2:
        return Estimate(m, float("nan"), float("nan"), per_repeat, excluded)
    half = stats.t.ppf(0.5 + level / 2, len(per_repeat) - 1) * np.std(per_repeat, ddof=1) / np.sqrt(len(per_repeat))
    return Estimate(m, m - half, m + half, per_repeat, excluded)


def evaluate_c1(policy: Policy, params: CongestionParams, n_agents: int, rollouts: int, horizon: int,
                gamma: float, seed: int = 0, repeats: int = 20, threads: int = 1) -> Estimate:
    """Average discounted N-agent reward over uniformly random initial joint states."""
    per = np.array([
        discounted_returns([policy], params, n_agents, rollouts, horizon, gamma, seed, r, threads)[0].mean()
        for r in range(repeats)
    ])
    return _summarise(per)


def evaluate_c2(policy1: Policy, policy2: Policy, params: CongestionParams, n_agents: int, rollouts: int,
                horizon: int, gamma: float, seed: int = 0, repeats: int = 20, threads: int = 1) -> Estimate:
    """Mean relative improvement (R1 - R2) / R1 under common random numbers.

    Rollouts with ``|R1| < 1e-9`` are dropped and counted in ``excluded``.
    """
    per, excluded = [], 0
    for r in range(repeats):
        R = discounted_returns([policy1, policy2], params, n_agents, rollouts, horizon, gamma, seed, r, threads)
        ok = np.abs(R[0]) >= DIVISION_GUARD
        excluded += int((~ok).sum())
        per.append(float(np.mean((R[0, ok] - R[1, ok]) / R[0, ok])) if ok.any() else float("nan"))
    return _summarise(np.array(per), excluded=excluded)


@dataclass
class GapRow:
    n_agents: int
    seed: int
    nagent_value: float
    meanfield_value: float
    gap: float
    tail_bound: float


def meanfield_gap(policy: Policy, params: CongestionParams, n_list: Sequence[int], horizon: int, gamma: float,
                  seeds: Sequence[int], rollouts: int = 20, mu0=None, threads: int = 1) -> list[GapRow]:
    """|u_N - v| per (N, seed): N-agent Monte-Carlo value vs deterministic mean-field value.

    Agents start i.i.d. from ``mu0`` (uniform by default); the mean-field run
    starts at ``mu0`` itself.  ``tail_bound`` is ``gamma**T0 * V_max``, the
    truncation error of both values.
    """
    env = CongestionEnv(params)
    nx = params.num_states
    mu0 = np.full(nx, 1.0 / nx) if mu0 is None else np.asarray(mu0, dtype=float)
    v = meanfield_rollout(policy, env, mu0, horizon, gamma).discounted
    tail = gamma**horizon * params.reward_bound / (1 - gamma) if gamma < 1 else float("inf")
    rows = []
    for n in n_list:
        for s in seeds:
            R = discounted_returns([policy], params, n, rollouts, horizon, gamma, s, repeat=n,
                                   threads=threads, mu0=mu0)[0]
            u = float(R.mean())
            rows.append(GapRow(n, s, u, v, abs(u - v), tail))
    return rows


def loglog_slope(rows: Sequence[GapRow]) -> tuple[float, dict]:
    """Least-squares slope of log(median gap) against log N."""
    by_n: dict[int, list] = {}
    for r in rows:
        by_n.setdefault(r.n_agents, []).append(r.gap)
    ns = np.array(sorted(by_n))
    med = np.array([np.median(by_n[n]) for n in ns])
    slope = np.polyfit(np.log(ns), np.log(med), 1)[0]
    return float(slope), dict(zip(ns.tolist(), med.tolist()))
