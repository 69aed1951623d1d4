"""Simplex points, the lifted space P(X) x H and uniform epsilon-nets over it.

A lifted pair ``c = (mu, h)`` holds a state distribution ``mu`` (shape ``(|X|,)``)
and a local policy ``h`` (shape ``(|X|, |U|)``, one action distribution per
state).  Distances:

* states:   l1 norm
* policies: max over states of the row-wise l1 norm
* lifted:   the sum of the two

Nets are products of a uniform grid on P(X) with one uniform grid per state on
the (possibly masked) action simplex, so most queries factor into a state part
and an action part.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from math import comb

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, ResourceError

SIMPLEX_ATOL = 1e-12
# Points at distance radius - EDGE_TOL or more count as outside an open ball.
# Keeps grid points sitting exactly on a ball boundary out of it despite rounding.
EDGE_TOL = 1e-12

DEFAULT_MAX_POINTS = 2_000_000


def inside(d, radius):
    """Open-ball membership test used by every neighbourhood query."""
    return np.asarray(d) < radius - EDGE_TOL


def as_state_dist(probs, size: int | None = None) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1:
        raise DimensionError(f"distribution must be 1-D, got shape {p.shape}")
    if size is not None and p.shape[0] != size:
        raise DimensionError(f"expected {size} entries, got {p.shape[0]}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_ATOL:
        raise ContractError(f"not a probability vector: {p}")
    return p


# Action distributions obey the same invariants.
as_action_dist = as_state_dist


def as_policy(rows, support_mask=None) -> np.ndarray:
    h = np.asarray(rows, dtype=float)
    if h.ndim != 2:
        raise DimensionError(f"local policy must be 2-D, got shape {h.shape}")
    if np.any(h < 0) or np.any(np.abs(h.sum(axis=1) - 1.0) > SIMPLEX_ATOL):
        raise ContractError("every policy row must be a probability vector")
    if support_mask is not None:
        mask = np.asarray(support_mask, dtype=bool)
        if mask.shape != h.shape:
            raise DimensionError(f"mask shape {mask.shape} != policy shape {h.shape}")
        if np.any(h[~mask] != 0):
            raise ContractError("policy puts mass on a disallowed action")
    return h


@dataclass(frozen=True, eq=False)
class LiftedPair:
    """A point ``(mu, h)`` of the lifted space."""

    mu: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        h = np.asarray(self.h, dtype=float)
        if mu.ndim != 1 or h.ndim != 2 or h.shape[0] != mu.shape[0]:
            raise DimensionError(f"incompatible shapes mu {mu.shape}, h {h.shape}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "h", h)

    def validate(self, support_mask=None) -> "LiftedPair":
        as_state_dist(self.mu)
        as_policy(self.h, support_mask)
        return self


def dist_state(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def dist_policy(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"policy shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum(axis=1).max())


def dist_lifted(a: LiftedPair, b: LiftedPair) -> float:
    return dist_state(a.mu, b.mu) + dist_policy(a.h, b.h)


def _compositions(total: int, parts: int) -> list[tuple[int, ...]]:
    if parts == 1:
        return [(total,)]
    out = []
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            out.append((first,) + rest)
    return out


def _resolution(step: float) -> int:
    if not 0 < step <= 1:
        raise ConfigurationError(f"step must lie in (0, 1], got {step}")
    m = round(1.0 / step)
    if abs(m * step - 1.0) > 1e-9:
        raise ConfigurationError(f"1/step must be an integer, got step={step}")
    return m


def simplex_grid_counts(dim: int, m: int) -> np.ndarray:
    """Integer numerators of the grid of resolution ``m``, lexicographic order."""
    if dim < 1:
        raise ConfigurationError("dim must be positive")
    return np.array(_compositions(m, dim), dtype=np.int64).reshape(-1, dim)


def build_simplex_grid(dim: int, step: float) -> np.ndarray:
    """All points of the ``dim``-simplex whose coordinates are multiples of ``step``."""
    m = _resolution(step)
    return simplex_grid_counts(dim, m) / m


def simplex_grid_size(dim: int, m: int) -> int:
    return comb(m + dim - 1, dim - 1)


def covering_constant(dim: int) -> float:
    """Worst-case l1 distance, in grid steps, from the ``dim``-simplex to its uniform grid.

    Largest-remainder rounding is l1-optimal; with fractional parts all equal to
    k/dim it moves every coordinate, which gives 2 k (dim - k) / dim, maximised
    at k = dim // 2.
    """
    lo, hi = dim // 2, dim - dim // 2
    return 2.0 * lo * hi / dim


def default_support_mask(num_states: int, num_actions: int) -> np.ndarray:
    return np.ones((num_states, num_actions), dtype=bool)


@dataclass(eq=False)
class EpsilonNet:
    """Product grid on P(X) x H with index ``i = state_index * num_actions_net + action_index``."""

    epsilon: float
    step: float
    grid: str
    states: np.ndarray          # (S, |X|)
    actions: np.ndarray         # (H, |X|, |U|)
    action_parts: np.ndarray    # (H, |X|) per-state row index into row_grids[x]
    row_grids: list             # row_grids[x]: (G_x, |U|) grid of allowed rows at state x
    support_mask: np.ndarray
    analytic_radius: float
    covering_radius: float = float("nan")
    certify_samples: int = 0
    _state_index: dict = field(default_factory=dict, repr=False)

    @property
    def num_states(self) -> int:
        return self.states.shape[1]

    @property
    def num_actions(self) -> int:
        return self.actions.shape[2]

    @property
    def n_states_net(self) -> int:
        return self.states.shape[0]

    @property
    def n_actions_net(self) -> int:
        return self.actions.shape[0]

    def __len__(self) -> int:
        return self.n_states_net * self.n_actions_net

    @property
    def certified(self) -> bool:
        return bool(self.covering_radius < self.epsilon)

    def split(self, i):
        return np.divmod(i, self.n_actions_net)

    def mu(self, i) -> np.ndarray:
        return self.states[self.split(i)[0]]

    def h(self, i) -> np.ndarray:
        return self.actions[self.split(i)[1]]

    def point(self, i: int) -> LiftedPair:
        j, k = self.split(int(i))
        return LiftedPair(self.states[j], self.actions[k])

    def points(self):
        for i in range(len(self)):
            yield self.point(i)

    @cached_property
    def row_distances(self) -> list:
        """Pairwise l1 distances between the allowed rows at each state."""
        return [np.abs(g[:, None, :] - g[None, :, :]).sum(axis=2) for g in self.row_grids]

    @cached_property
    def min_action_gap(self) -> float:
        gaps = []
        for d in self.row_distances:
            if d.shape[0] > 1:
                gaps.append(d[~np.eye(d.shape[0], dtype=bool)].min())
        return float(min(gaps)) if gaps else float("inf")

    @property
    def actions_separated(self) -> bool:
        """True when distinct action-net members are never strictly within epsilon."""
        return not bool(inside(self.min_action_gap, self.epsilon))

    def action_distance_matrix(self) -> np.ndarray:
        """Full ``(H, H)`` policy-distance matrix, built row-grid by row-grid."""
        out = np.zeros((self.n_actions_net, self.n_actions_net))
        for x, d in enumerate(self.row_distances):
            idx = self.action_parts[:, x]
            np.maximum(out, d[idx[:, None], idx[None, :]], out=out)
        return out

    def state_distances(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape[-1] != self.num_states:
            raise DimensionError(f"state distribution has {mu.shape[-1]} entries, net has {self.num_states}")
        return np.abs(self.states - mu[..., None, :]).sum(axis=-1)

    def action_distances(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if h.shape != (self.num_states, self.num_actions):
            raise DimensionError(f"policy shape {h.shape} does not match net")
        return np.abs(self.actions - h).sum(axis=2).max(axis=1)

    def action_index(self, h) -> int | None:
        """Index of ``h`` in the action net, or None if it is not a member."""
        d = self.action_distances(h)
        k = int(np.argmin(d))
        return k if d[k] <= SIMPLEX_ATOL else None

    def state_index(self, mu) -> int | None:
        d = self.state_distances(mu)
        j = int(np.argmin(d))
        return j if d[j] <= SIMPLEX_ATOL else None

    def distances(self, c: LiftedPair) -> np.ndarray:
        """d_C from ``c`` to every net point, in index order."""
        ds = self.state_distances(c.mu)
        dh = self.action_distances(c.h)
        return (ds[:, None] + dh[None, :]).ravel()


def _row_grid(mask_row: np.ndarray, m: int) -> np.ndarray:
    allowed = np.flatnonzero(mask_row)
    counts = simplex_grid_counts(len(allowed), m)
    rows = np.zeros((counts.shape[0], mask_row.shape[0]))
    rows[:, allowed] = counts / m
    return rows


def _choose_resolution(epsilon: float, grid: str, state_dim: int, row_dims: list[int]) -> int:
    if grid == "spacing":
        # adjacent grid points sit 2/m apart in the lifted metric
        return max(1, int(np.ceil(2.0 / epsilon - 1e-9)))
    if grid == "covering":
        const = covering_constant(state_dim) + max(covering_constant(n) for n in row_dims)
        if const == 0:
            return 1
        return int(np.floor(const / epsilon)) + 1
    raise ConfigurationError(f"unknown grid rule {grid!r}")


def sample_lifted(num: int, support_mask: np.ndarray, rng: np.random.Generator):
    """Uniform (flat Dirichlet) samples of mu and of every masked policy row."""
    nx, nu = support_mask.shape
    mus = rng.dirichlet(np.ones(nx), size=num)
    hs = np.zeros((num, nx, nu))
    for x in range(nx):
        allowed = np.flatnonzero(support_mask[x])
        hs[:, x, allowed] = rng.dirichlet(np.ones(len(allowed)), size=num)
    return mus, hs


def measure_covering_radius(net: EpsilonNet, mus: np.ndarray, hs: np.ndarray, chunk: int = 512) -> float:
    """Largest distance from the sampled points to the net.

    d_C is a sum of a state term and an action term over a product grid, so the
    minimum over the net is the sum of the two separate minima.
    """
    worst = 0.0
    for lo in range(0, len(mus), chunk):
        ds = np.abs(mus[lo:lo + chunk, None, :] - net.states[None]).sum(axis=2).min(axis=1)
        dh = np.abs(hs[lo:lo + chunk, None] - net.actions[None]).sum(axis=3).max(axis=2).min(axis=1)
        worst = max(worst, float((ds + dh).max()))
    return worst


def build_epsilon_net(
    num_states: int,
    num_actions: int,
    epsilon: float,
    support_mask=None,
    *,
    grid: str = "spacing",
    max_points: int = DEFAULT_MAX_POINTS,
    certify_samples: int = 10_000,
    seed: int = 0,
) -> EpsilonNet:
    """Uniform product net on P(X) x H.

    ``grid="spacing"`` puts adjacent net points exactly ``epsilon`` apart in d_C
    (step ``epsilon / 2``).  ``grid="covering"`` picks the largest step ``1/m``
    whose analytic covering radius is below ``epsilon``.  Either way the
    covering radius is then measured on ``certify_samples`` uniform points.
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    if support_mask is None:
        support_mask = default_support_mask(num_states, num_actions)
    support_mask = np.asarray(support_mask, dtype=bool)
    if support_mask.shape != (num_states, num_actions):
        raise DimensionError(f"mask shape {support_mask.shape} != ({num_states}, {num_actions})")
    if not support_mask.any(axis=1).all():
        raise ConfigurationError("every state needs at least one allowed action")

    row_dims = [int(r.sum()) for r in support_mask]
    m = _choose_resolution(epsilon, grid, num_states, row_dims)
    n_points = simplex_grid_size(num_states, m)
    for n in row_dims:
        n_points *= simplex_grid_size(n, m)
    if n_points > max_points:
        raise ResourceError(f"net would hold N_eps={n_points} points (cap {max_points}) at epsilon={epsilon}")

    states = simplex_grid_counts(num_states, m) / m
    row_grids = [_row_grid(support_mask[x], m) for x in range(num_states)]
    parts = np.array(list(itertools.product(*[range(len(g)) for g in row_grids])), dtype=np.int64)
    parts = parts.reshape(-1, num_states)
    actions = np.stack([row_grids[x][parts[:, x]] for x in range(num_states)], axis=1)

    step = 1.0 / m
    radius = step * (covering_constant(num_states) + max(covering_constant(n) for n in row_dims))
    net = EpsilonNet(
        epsilon=float(epsilon),
        step=step,
        grid=grid,
        states=states,
        actions=actions,
        action_parts=parts,
        row_grids=row_grids,
        support_mask=support_mask,
        analytic_radius=radius,
    )
    if certify_samples:
        rng = np.random.default_rng(seed)
        mus, hs = sample_lifted(certify_samples, support_mask, rng)
        net.covering_radius = measure_covering_radius(net, mus, hs)
        net.certify_samples = certify_samples
    return net


def neighbors_within(net: EpsilonNet, c: LiftedPair, radius: float) -> np.ndarray:
    """Indices ``i`` with ``d_C(c^i, c) < radius``, ascending.

    Both distance components are nonnegative, so only state rows and action
    rows that are individually inside the radius need to be combined.
    """
    if not radius > 0:
        raise ConfigurationError("radius must be positive")
    ds = net.state_distances(c.mu)
    dh = net.action_distances(c.h)
    js = np.flatnonzero(inside(ds, radius))
    ks = np.flatnonzero(inside(dh, radius))
    total = ds[js][:, None] + dh[ks][None, :]
    jj, kk = np.nonzero(inside(total, radius))
    return js[jj] * net.n_actions_net + ks[kk]


def nearest(net: EpsilonNet, c: LiftedPair, k: int) -> np.ndarray:
    """The ``k`` closest net indices, by increasing distance then index."""
    if not 1 <= k <= len(net):
        raise ValueError(f"k must lie in [1, {len(net)}], got {k}")
    d = net.distances(c)
    order = np.argsort(d, kind="stable")
    return order[:k]
