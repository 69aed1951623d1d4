"""Kernel-based Q-learning for mean-field control.

Two phases: an exploration run fills per-cell running averages of the reward
and of the next state distribution, then the approximated Bellman operator

    q'(c_i) = r_hat(c_i) + gamma * max_{h in H_eps} (Gamma_K q)(Phi_hat(c_i), h)

is iterated from zero to its fixed point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .env import MeanFieldEnv
from .errors import ConfigurationError, ContractError, ConvergenceError, CoverageError
from .geometry import (
    DEFAULT_MAX_POINTS,
    EpsilonNet,
    LiftedPair,
    as_state_dist,
    build_epsilon_net,
    inside,
    neighbors_within,
)
from .kernels import ActionGridRegression, KernelSpec, is_separable, regress, separable_state_weights

log = logging.getLogger(__name__)

CONTRACTION_SLACK = 1e-10
EXPLORE_MODES = ("trajectory", "anchors")


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 0.5
    epsilon: float = 0.25
    explore_epsilon: float = 1.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    fp_tolerance: float = 1e-6
    max_fp_iters: int = 500
    max_explore_steps: int = 2_000_000
    rng_seed: int = 0
    explore_mode: str = "trajectory"
    restart_prob: float = 0.3
    record_current_state: bool = False   # store mu_t, not the successor, as the observed transition
    grid: str = "spacing"
    max_net_points: int = DEFAULT_MAX_POINTS

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0 < self.explore_epsilon <= 1:
            raise ConfigurationError("explore_epsilon must lie in (0, 1]")
        if not self.fp_tolerance > 0:
            raise ConfigurationError("fp_tolerance must be positive")
        if self.max_fp_iters < 1 or self.max_explore_steps < 1:
            raise ConfigurationError("iteration caps must be positive")
        if self.explore_mode not in EXPLORE_MODES:
            raise ConfigurationError(f"explore_mode must be one of {EXPLORE_MODES}")
        if not 0 <= self.restart_prob <= 1:
            raise ConfigurationError("restart_prob must lie in [0, 1]")


def make_net(env: MeanFieldEnv, cfg: SolverConfig, epsilon: float | None = None) -> EpsilonNet:
    return build_epsilon_net(
        env.num_states,
        env.num_actions,
        cfg.epsilon if epsilon is None else epsilon,
        env.support_mask,
        grid=cfg.grid,
        max_points=cfg.max_net_points,
    )


@dataclass(eq=False)
class SampleStore:
    counts: np.ndarray        # (N,) visits per cell
    r_hat: np.ndarray         # (N,) running-average reward
    phi_hat: np.ndarray       # (N, |X|) running-average next distribution
    steps: int = 0
    covering_step: int | None = None

    @classmethod
    def empty(cls, n: int, num_states: int) -> "SampleStore":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros((n, num_states)))

    @property
    def covered(self) -> bool:
        return bool(np.all(self.counts > 0))

    def unvisited(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 0)

    def record(self, cells: np.ndarray, reward: float, observed: np.ndarray) -> int:
        """Running-average update of ``cells``; returns how many were first visits."""
        n = self.counts[cells] + 1
        self.counts[cells] = n
        keep = ((n - 1) / n)
        self.r_hat[cells] = keep * self.r_hat[cells] + reward / n
        self.phi_hat[cells] = keep[:, None] * self.phi_hat[cells] + observed[None, :] / n[:, None]
        return int(np.sum(n == 1))


@dataclass(eq=False)
class QTable:
    values: np.ndarray
    net: EpsilonNet
    kernel: KernelSpec
    gamma: float
    deltas: list = field(default_factory=list)

    @property
    def sweeps(self) -> int:
        return len(self.deltas)

    def contraction_ok(self, slack: float = CONTRACTION_SLACK) -> bool:
        d = self.deltas
        return all(d[i + 1] <= self.gamma * d[i] + slack for i in range(len(d) - 1))

    def shifted(self, kappa: float) -> "QTable":
        return replace(self, values=self.values + kappa)


def _cells_near(net: EpsilonNet, mu: np.ndarray, k: int, radius: float) -> np.ndarray:
    if net.actions_separated and radius <= net.epsilon:
        js = np.flatnonzero(inside(net.state_distances(mu), radius))
        return js * net.n_actions_net + k
    return neighbors_within(net, LiftedPair(mu, net.actions[k]), radius)


class GreedyPolicy:
    """Stationary policy mu -> argmax over the action net of the regressed table."""

    def __init__(self, table: QTable, kernel: KernelSpec | None = None):
        self.table = table
        self.net = table.net
        self.kernel = kernel or table.kernel
        self._separable = is_separable(self.net, self.kernel)
        self._grid_values = table.values.reshape(self.net.n_states_net, self.net.n_actions_net)
        self._cached = lru_cache(maxsize=65_536)(self._scores_from_bytes)

    def _scores_from_bytes(self, key: bytes) -> np.ndarray:
        mu = np.frombuffer(key, dtype=float)
        if self._separable:
            w = separable_state_weights(self.net, self.kernel, mu)[0]
            nz = np.flatnonzero(w)
            return w[nz] @ self._grid_values[nz]
        return ActionGridRegression(self.net, self.kernel, mu[None]).values(self.table.values)[0]

    def scores(self, mu) -> np.ndarray:
        mu = np.ascontiguousarray(mu, dtype=float)
        return self._cached(mu.tobytes())

    def action_index(self, mu) -> int:
        return int(np.argmax(self.scores(mu)))

    def value(self, mu) -> float:
        return float(np.max(self.scores(mu)))

    def __call__(self, mu) -> np.ndarray:
        return self.net.actions[self.action_index(mu)]


def greedy_or_uniform_action(q, mu, net: EpsilonNet, cfg: SolverConfig, rng: np.random.Generator, policy=None) -> int:
    """Index into the action net: uniform with probability explore_epsilon, else greedy.

    Both random draws are always consumed so runs with different
    explore_epsilon share their random stream step by step.
    """
    H = net.n_actions_net
    if H == 0:
        raise ConfigurationError("empty action net")
    coin = rng.random()
    pick = int(rng.integers(H))
    if q is None or coin < cfg.explore_epsilon:
        return pick
    if policy is None:
        policy = GreedyPolicy(q, cfg.kernel)
    return policy.action_index(mu)


def _collect_anchors(env: MeanFieldEnv, net: EpsilonNet, cfg: SolverConfig, chunk: int = 100_000) -> SampleStore:
    n = len(net)
    store = SampleStore.empty(n, net.num_states)
    rewards = np.empty(n)
    observed = np.empty((n, net.num_states))
    H = net.n_actions_net
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(lo + chunk, n))
        j, k = net.split(idx)
        mus = net.states[j]
        nxt, rew = env.step_batch(mus, net.actions[k])
        rewards[idx] = rew
        observed[idx] = mus if cfg.record_current_state else nxt
    if net.actions_separated:
        # cell (j, k) averages the anchors (j', k) whose states lie within epsilon
        near = inside(np.abs(net.states[:, None] - net.states[None]).sum(axis=2), net.epsilon).astype(float)
        cnt = near.sum(axis=1)
        store.counts[:] = np.repeat(cnt.astype(np.int64), H)
        store.r_hat[:] = ((near @ rewards.reshape(-1, H)) / cnt[:, None]).ravel()
        obs = observed.reshape(net.n_states_net, H, net.num_states)
        store.phi_hat[:] = (np.einsum("ab,bkx->akx", near, obs) / cnt[:, None, None]).reshape(n, -1)
    else:
        for i in range(n):
            cells = neighbors_within(net, net.point(i), net.epsilon)
            store.record(cells, rewards[i], observed[i])
    store.steps = n
    store.covering_step = n
    return store


def explore_and_collect(
    env: MeanFieldEnv,
    net: EpsilonNet,
    cfg: SolverConfig,
    initial_mu=None,
    q: QTable | None = None,
    rng: np.random.Generator | None = None,
) -> SampleStore:
    """Fill per-cell sample averages until every net cell has been visited.

    ``trajectory`` mode follows one explore_epsilon-greedy path of the
    simulator, restarting from a uniformly random distribution with probability
    ``restart_prob`` after each step.  ``anchors`` mode queries the simulator
    once at every net point.
    """
    if (env.num_states, env.num_actions) != (net.num_states, net.num_actions):
        raise ContractError("net dimensions do not match the environment")
    if cfg.explore_mode == "anchors":
        return _collect_anchors(env, net, cfg)

    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    nx = env.num_states
    mu = np.full(nx, 1.0 / nx) if initial_mu is None else as_state_dist(initial_mu, nx).copy()
    store = SampleStore.empty(len(net), nx)
    policy = GreedyPolicy(q, cfg.kernel) if q is not None else None
    remaining = len(net)
    for t in range(cfg.max_explore_steps):
        k = greedy_or_uniform_action(q, mu, net, cfg, rng, policy)
        nxt, rew = env.step_batch(mu[None], net.actions[k][None])
        nxt = nxt[0]
        cells = _cells_near(net, mu, k, net.epsilon)
        remaining -= store.record(cells, float(rew[0]), mu if cfg.record_current_state else nxt)
        if remaining == 0:
            store.steps = store.covering_step = t + 1
            return store
        if rng.random() < cfg.restart_prob:
            mu = rng.dirichlet(np.ones(nx))
        else:
            mu = nxt
    store.steps = cfg.max_explore_steps
    missing = store.unvisited()
    raise CoverageError(
        f"{len(missing)} of {len(net)} cells unvisited after {cfg.max_explore_steps} steps", missing
    )


def exact_store(env: MeanFieldEnv, net: EpsilonNet, chunk: int = 100_000) -> SampleStore:
    """Exact reward and next distribution at every net point."""
    n = len(net)
    store = SampleStore.empty(n, net.num_states)
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(lo + chunk, n))
        j, k = net.split(idx)
        nxt, rew = env.step_batch(net.states[j], net.actions[k])
        store.r_hat[idx] = rew
        store.phi_hat[idx] = nxt
    store.counts[:] = 1
    store.steps = store.covering_step = n
    return store


def _as_values(q) -> np.ndarray:
    return q.values if isinstance(q, QTable) else np.asarray(q, dtype=float)


def bellman_sweep(q, store: SampleStore, net: EpsilonNet, cfg: SolverConfig, operator=None) -> QTable:
    """One application of the approximated Bellman operator."""
    if not store.covered:
        raise ContractError(f"{len(store.unvisited())} cells have no samples")
    if operator is None:
        operator = ActionGridRegression(net, cfg.kernel, store.phi_hat)
    best, _ = operator.maxima(_as_values(q))
    deltas = list(q.deltas) if isinstance(q, QTable) else []
    return QTable(store.r_hat + cfg.gamma * best, net, cfg.kernel, cfg.gamma, deltas)


def solve_fixed_point(store: SampleStore, net: EpsilonNet, cfg: SolverConfig, operator=None) -> QTable:
    """Iterate the Bellman operator from zero until the sup-norm step is below tolerance."""
    if not store.covered:
        raise ContractError(f"{len(store.unvisited())} cells have no samples")
    if operator is None:
        operator = ActionGridRegression(net, cfg.kernel, store.phi_hat)
    q = np.zeros(len(net))
    deltas = []
    for _ in range(cfg.max_fp_iters):
        best, _ = operator.maxima(q)
        nxt = store.r_hat + cfg.gamma * best
        delta = float(np.max(np.abs(nxt - q)))
        deltas.append(delta)
        q = nxt
        if delta < cfg.fp_tolerance:
            table = QTable(q, net, cfg.kernel, cfg.gamma, deltas)
            if not table.contraction_ok():
                log.warning("sup-norm steps violate the contraction bound: %s", deltas)
            return table
    raise ConvergenceError(f"no convergence within {cfg.max_fp_iters} sweeps (last step {deltas[-1]:.3e})", deltas)


def q_at(q: QTable, c: LiftedPair, cfg: SolverConfig | None = None) -> float:
    kernel = cfg.kernel if cfg is not None else q.kernel
    return regress(q.values, c, q.net, kernel)


def extract_policy(q: QTable, cfg: SolverConfig | None = None) -> GreedyPolicy:
    return GreedyPolicy(q, cfg.kernel if cfg is not None else None)


def oracle_value_iteration(env: MeanFieldEnv, fine_epsilon: float, cfg: SolverConfig) -> QTable:
    """Fixed point of the approximated operator on a fine net with exact data."""
    fine_cfg = replace(cfg, epsilon=fine_epsilon)
    net = make_net(env, fine_cfg)
    return solve_fixed_point(exact_store(env, net), net, fine_cfg)


def solve(env: MeanFieldEnv, cfg: SolverConfig, initial_mu=None, net: EpsilonNet | None = None):
    """Exploration followed by the fixed-point phase; returns ``(table, store)``."""
    net = net if net is not None else make_net(env, cfg)
    store = explore_and_collect(env, net, cfg, initial_mu)
    return solve_fixed_point(store, net, cfg), store


@dataclass
class CoveringStats:
    seeds: list
    steps: list           # covering step per seed, None on failure
    failures: list

    def _ok(self) -> np.ndarray:
        return np.array([s for s in self.steps if s is not None], dtype=float)

    @property
    def mean(self) -> float:
        ok = self._ok()
        return float(ok.mean()) if ok.size else float("nan")

    @property
    def median(self) -> float:
        ok = self._ok()
        return float(np.median(ok)) if ok.size else float("nan")

    @property
    def max(self) -> float:
        ok = self._ok()
        return float(ok.max()) if ok.size else float("nan")

    def quantile(self, p: float) -> float:
        ok = self._ok()
        return float(np.quantile(ok, p)) if ok.size else float("nan")


def measure_covering_time(
    env: MeanFieldEnv,
    net: EpsilonNet,
    cfg: SolverConfig,
    num_seeds: int,
    initial_mu=None,
    q: QTable | None = None,
) -> CoveringStats:
    """First full-coverage step of trajectory exploration, one run per seed.

    Seed ``s`` draws from ``SeedSequence([cfg.rng_seed, s])``, so runs at
    different explore_epsilon values are paired.
    """
    run_cfg = replace(cfg, explore_mode="trajectory")
    seeds, steps, failures = [], [], []
    for s in range(num_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, s]))
        seeds.append(s)
        try:
            store = explore_and_collect(env, net, run_cfg, initial_mu, q=q, rng=rng)
            steps.append(store.covering_step)
        except CoverageError as exc:
            steps.append(None)
            failures.append((s, len(exc.unvisited)))
    return CoveringStats(seeds, steps, failures)
