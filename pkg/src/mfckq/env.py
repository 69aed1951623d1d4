"""Mean-field environments: aggregated dynamics and rewards, and the congestion benchmark.

An environment exposes the deterministic simulator ``step(mu, h) -> (mu', r)``
plus a batched ``step_batch`` used to tabulate exact data on a whole net.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .geometry import SIMPLEX_ATOL, as_policy, as_state_dist

# ---------------------------------------------------------------------------
# Generic agent models
# ---------------------------------------------------------------------------


class AgentModel:
    """Per-agent transition kernel and reward of a representative agent.

    Subclasses implement ``transition`` and ``reward``; both may depend on the
    population state distribution ``mu`` and action distribution ``nu``.
    """

    num_states: int
    num_actions: int
    reward_bound: float = float("inf")
    lipschitz_transition: float | None = None
    lipschitz_reward: float | None = None
    support_mask: np.ndarray | None = None

    def transition(self, x: int, mu: np.ndarray, u: int, nu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, x: int, mu: np.ndarray, u: int, nu: np.ndarray) -> float:
        raise NotImplementedError


class TabularModel(AgentModel):
    """Model given by callables; handy for small hand-built examples."""

    def __init__(self, num_states, num_actions, transition, reward, reward_bound=float("inf"), support_mask=None):
        self.num_states = num_states
        self.num_actions = num_actions
        self._transition = transition
        self._reward = reward
        self.reward_bound = reward_bound
        self.support_mask = support_mask

    def transition(self, x, mu, u, nu):
        return np.asarray(self._transition(x, mu, u, nu), dtype=float)

    def reward(self, x, mu, u, nu):
        return float(self._reward(x, mu, u, nu))


@dataclass(frozen=True)
class MfcTransition:
    next_mu: np.ndarray
    reward: float


def _check_pair(mu, h, num_states, num_actions, mask=None):
    mu = as_state_dist(mu, num_states)
    h = as_policy(h, mask)
    if h.shape != (num_states, num_actions):
        raise DimensionError(f"policy shape {h.shape} != ({num_states}, {num_actions})")
    return mu, h


def action_dist(mu, h) -> np.ndarray:
    """Population action distribution ``nu(u) = sum_x h(x)(u) mu(x)``."""
    mu = np.asarray(mu, dtype=float)
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] != mu.shape[0]:
        raise DimensionError(f"mu has {mu.shape[0]} states, policy has shape {h.shape}")
    return mu @ h


def aggregate_flow(model: AgentModel, mu, h) -> np.ndarray:
    mu, h = _check_pair(mu, h, model.num_states, model.num_actions)
    nu = action_dist(mu, h)
    out = np.zeros(model.num_states)
    for x in range(model.num_states):
        if mu[x] == 0:
            continue
        for u in range(model.num_actions):
            w = mu[x] * h[x, u]
            if w == 0:
                continue
            p = np.asarray(model.transition(x, mu, u, nu), dtype=float)
            if p.shape != (model.num_states,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ContractError(f"model transition at (x={x}, u={u}) is not a distribution: {p}")
            out += w * p
    return out


def aggregate_reward(model: AgentModel, mu, h) -> float:
    mu, h = _check_pair(mu, h, model.num_states, model.num_actions)
    nu = action_dist(mu, h)
    total = 0.0
    for x in range(model.num_states):
        for u in range(model.num_actions):
            w = mu[x] * h[x, u]
            if w:
                total += w * model.reward(x, mu, u, nu)
    return float(total)


class MeanFieldEnv:
    """Deterministic MFC simulator interface."""

    num_states: int
    num_actions: int
    support_mask: np.ndarray
    reward_bound: float

    def step(self, mu, h) -> MfcTransition:
        raise NotImplementedError

    def step_batch(self, mus, hs) -> tuple[np.ndarray, np.ndarray]:
        nxt = np.empty_like(np.asarray(mus, dtype=float))
        rew = np.empty(len(mus))
        for b, (mu, h) in enumerate(zip(mus, hs)):
            t = self.step(mu, h)
            nxt[b] = t.next_mu
            rew[b] = t.reward
        return nxt, rew


class ModelEnv(MeanFieldEnv):
    """Mean-field simulator aggregating an arbitrary :class:`AgentModel`."""

    def __init__(self, model: AgentModel):
        self.model = model
        self.num_states = model.num_states
        self.num_actions = model.num_actions
        mask = model.support_mask
        self.support_mask = (
            np.ones((self.num_states, self.num_actions), dtype=bool) if mask is None else np.asarray(mask, bool)
        )
        self.reward_bound = float(model.reward_bound)

    def step(self, mu, h) -> MfcTransition:
        return MfcTransition(aggregate_flow(self.model, mu, h), aggregate_reward(self.model, mu, h))


def mfc_simulate(env: MeanFieldEnv, mu, h) -> MfcTransition:
    return env.step(mu, h)


# ---------------------------------------------------------------------------
# Congestion control benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CongestionParams:
    """Senders sharing one link; states are queue lengths, actions sending rates."""

    num_states: int = 3
    num_actions: int = 3
    a: float = 30.0
    b: float = 10.0
    d: float = 50.0
    c: float = 0.4

    def __post_init__(self):
        if self.num_states < 1 or self.num_actions < 1:
            raise ConfigurationError("state and action counts must be positive")
        for name in ("a", "b", "d", "c"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and nonnegative, got {v}")
        if not self.c > 0:
            raise ConfigurationError("bandwidth c must be positive")

    @property
    def support_mask(self) -> np.ndarray:
        """Sending more than the current queue is not allowed."""
        x = np.arange(self.num_states)[:, None]
        u = np.arange(self.num_actions)[None, :]
        return u <= x

    @property
    def reward_bound(self) -> float:
        umax = min(self.num_actions, self.num_states) - 1
        return self.a * umax + self.b * (self.num_states - 1) ** 2 + self.d * umax

    def to_dict(self) -> dict:
        return asdict(self)


def _check_mask(params: CongestionParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape[-2:] != (params.num_states, params.num_actions):
        raise DimensionError(f"policy shape {h.shape} does not match the environment")
    if np.any(h[..., ~params.support_mask] > 0):
        raise ContractError("policy sends more packets than the queue holds")
    return h


def mean_send_rate(params: CongestionParams, mu, h) -> float:
    h = _check_mask(params, h)
    return float(np.asarray(mu, dtype=float) @ h @ np.arange(params.num_actions))


def loss_probability(params: CongestionParams, F):
    F = np.asarray(F, dtype=float)
    over = F > params.c
    safe = np.where(over, F, 1.0)
    p = np.where(over, (F - params.c) / safe, 0.0)
    return float(p) if p.ndim == 0 else p


def _flow_batch(params: CongestionParams, mus: np.ndarray, hs: np.ndarray, p: np.ndarray) -> np.ndarray:
    nx, nu = params.num_states, params.num_actions
    tilde = mus * p[:, None]
    keep = 1.0 - p
    for x in range(nx):
        for u in range(min(nu, x + 1)):
            tilde[:, x - u] += mus[:, x] * hs[:, x, u] * keep
    refill = tilde[:, 0] / nx
    nxt = tilde + refill[:, None]
    nxt[:, 0] = refill
    return nxt


def _reward_batch(params: CongestionParams, mus, F, p) -> np.ndarray:
    latency = mus @ np.arange(params.num_states)
    return params.a * F * (1.0 - p) - params.b * latency**2 - params.d * F * p


def congestion_flow(params: CongestionParams, mu, h) -> np.ndarray:
    """Queue dynamics: send, lost packets stay queued, empty queues refill uniformly."""
    mu = as_state_dist(mu, params.num_states)
    h = _check_mask(params, as_policy(h))
    F = mean_send_rate(params, mu, h)
    p = np.array([loss_probability(params, F)])
    return _flow_batch(params, mu[None], h[None], p)[0]


def congestion_reward(params: CongestionParams, mu, h) -> float:
    """a * throughput - b * latency**2 - d * loss at population level.

    throughput = F (1 - p), loss = F p, latency = mean queue length.
    """
    mu = as_state_dist(mu, params.num_states)
    h = _check_mask(params, as_policy(h))
    F = mean_send_rate(params, mu, h)
    p = loss_probability(params, F)
    return float(_reward_batch(params, mu[None], np.array([F]), np.array([p]))[0])


class CongestionModel(AgentModel):
    """Per-agent view of the congestion dynamics, for aggregation cross-checks."""

    def __init__(self, params: CongestionParams):
        self.params = params
        self.num_states = params.num_states
        self.num_actions = params.num_actions
        self.support_mask = params.support_mask
        self.reward_bound = params.reward_bound

    def _loss(self, nu):
        F = float(np.asarray(nu) @ np.arange(self.num_actions))
        return loss_probability(self.params, F)

    def transition(self, x, mu, u, nu):
        if u > x:
            raise ContractError("overshoot")
        p = self._loss(nu) if u > 0 else 0.0
        post = np.zeros(self.num_states)
        post[x - u] += 1.0 - p
        post[x] += p
        out = post.copy()
        out[0] = 0.0
        out += post[0] / self.num_states
        return out

    def reward(self, x, mu, u, nu):
        p = self._loss(nu)
        latency = float(np.asarray(mu) @ np.arange(self.num_states))
        prm = self.params
        return prm.a * u * (1 - p) - prm.b * latency**2 - prm.d * u * p


class CongestionEnv(MeanFieldEnv):
    def __init__(self, params: CongestionParams | None = None):
        self.params = params or CongestionParams()
        self.num_states = self.params.num_states
        self.num_actions = self.params.num_actions
        self.support_mask = self.params.support_mask
        self.reward_bound = self.params.reward_bound

    def step(self, mu, h) -> MfcTransition:
        mu = as_state_dist(mu, self.num_states)
        h = _check_mask(self.params, as_policy(h))
        nxt, rew = self.step_batch(mu[None], h[None])
        return MfcTransition(nxt[0], float(rew[0]))

    def step_batch(self, mus, hs):
        mus = np.asarray(mus, dtype=float)
        hs = _check_mask(self.params, hs)
        F = np.einsum("bx,bxu,u->b", mus, hs, np.arange(self.num_actions, dtype=float))
        p = np.atleast_1d(loss_probability(self.params, F))
        return _flow_batch(self.params, mus, hs, p), _reward_batch(self.params, mus, F, p)


def is_distribution(p, atol: float = SIMPLEX_ATOL) -> bool:
    p = np.asarray(p)
    return bool(np.all(p >= 0) and abs(p.sum() - 1.0) <= atol)
