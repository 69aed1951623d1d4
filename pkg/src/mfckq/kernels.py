"""Kernel weights on an epsilon-net and the kernel regression operator.

``weights`` handles one arbitrary query.  ``ActionGridRegression`` evaluates
the regressed table at many state distributions paired with every member of
the action net at once; that is the only shape of query the Bellman operator
and greedy policies ever make.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ConfigurationError, ContractError
from .geometry import EpsilonNet, LiftedPair, inside, nearest, neighbors_within

FAMILIES = ("triangular", "gaussian", "constant", "knn")
METRICS = ("lifted", "l2")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class KernelSpec:
    family: str = "triangular"
    bandwidth: float | None = None  # None: use the net's epsilon
    k: int = 1
    metric: str = "lifted"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be positive")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.metric not in METRICS:
            raise ConfigurationError(f"unknown metric {self.metric!r}")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """``"triangular"``, ``"gaussian"``, ``"constant"`` or ``"<k>-nn"``."""
        name = text.strip().lower()
        if name.endswith("-nn") or name.endswith("nn"):
            digits = name.rstrip("n").rstrip("-")
            try:
                return cls(family="knn", k=int(digits))
            except ValueError as exc:
                raise ConfigurationError(f"bad k-NN kernel name {text!r}") from exc
        return cls(family=name)

    @property
    def label(self) -> str:
        return f"{self.k}-nn" if self.family == "knn" else self.family

    def radius(self, net: EpsilonNet) -> float:
        return float(self.bandwidth if self.bandwidth is not None else net.epsilon)


def raw_affinity(spec: KernelSpec, d, bandwidth: float | None = None):
    """Unnormalised affinity at distance ``d`` (closed support ``d <= eps``)."""
    eps = bandwidth if bandwidth is not None else spec.bandwidth
    d = np.asarray(d, dtype=float)
    if spec.family == "knn":
        return np.ones_like(d)
    if eps is None:
        raise ConfigurationError("bandwidth kernels need a bandwidth")
    support = d <= eps
    if spec.family == "triangular":
        val = np.abs(eps - d)
    elif spec.family == "gaussian":
        val = _INV_SQRT_2PI * np.exp(-((eps - d) ** 2))
    else:
        val = np.ones_like(d)
    out = np.where(support, val, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class WeightVector:
    indices: np.ndarray
    weights: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(w) for i, w in zip(self.indices, self.weights)}


def _l2_distances(net: EpsilonNet, c: LiftedPair) -> np.ndarray:
    ds2 = ((net.states - c.mu) ** 2).sum(axis=1)
    dh2 = ((net.actions - c.h) ** 2).sum(axis=(1, 2))
    return np.sqrt(ds2[:, None] + dh2[None, :]).ravel()


def weights(net: EpsilonNet, c: LiftedPair, spec: KernelSpec) -> WeightVector:
    """Normalised kernel weights of the query ``c`` over the net.

    Falls back to the single nearest net point when nothing inside the
    bandwidth carries positive affinity.
    """
    if len(net) == 0:
        raise ContractError("empty net")
    if spec.metric == "l2":
        d_all = _l2_distances(net, c)
        if spec.family == "knn":
            idx = np.argsort(d_all, kind="stable")[: spec.k]
            return WeightVector(idx, np.full(len(idx), 1.0 / len(idx)))
        eps = spec.radius(net)
        idx = np.flatnonzero(inside(d_all, eps))
        d = d_all[idx]
        nearest_idx = np.argsort(d_all, kind="stable")[:1]
    else:
        if spec.family == "knn":
            idx = nearest(net, c, spec.k)
            return WeightVector(idx, np.full(len(idx), 1.0 / len(idx)))
        eps = spec.radius(net)
        idx = neighbors_within(net, c, eps)
        j, k = net.split(idx)
        d = net.state_distances(c.mu)[j] + net.action_distances(c.h)[k]
        nearest_idx = None
    phi = raw_affinity(spec, d, eps)
    keep = phi > 0
    if not keep.any():
        if nearest_idx is None:
            nearest_idx = nearest(net, c, 1)
        return WeightVector(nearest_idx, np.ones(1))
    phi = phi[keep]
    return WeightVector(idx[keep], phi / phi.sum())


def regress(q, c: LiftedPair, net: EpsilonNet, spec: KernelSpec) -> float:
    """Kernel-regressed value of the net function ``q`` at ``c``."""
    q = np.asarray(q, dtype=float)
    if q.shape != (len(net),):
        raise ContractError(f"table has {q.size} entries, net has {len(net)}")
    wv = weights(net, c, spec)
    return float(np.dot(wv.weights, q[wv.indices]))


def is_separable(net: EpsilonNet, spec: KernelSpec) -> bool:
    """Whether queries at action-net members only see net points with the same action."""
    if spec.metric != "lifted":
        return False
    if spec.family == "knn":
        return spec.k == 1
    return net.actions_separated and spec.radius(net) <= net.epsilon


def separable_state_weights(net: EpsilonNet, spec: KernelSpec, mus) -> np.ndarray:
    """Dense ``(M, S)`` state-grid weights for separable queries ``(mu_m, h_k)``."""
    mus = np.atleast_2d(mus)
    ds = np.abs(mus[:, None, :] - net.states[None]).sum(axis=2)
    nearest_j = np.argmin(ds, axis=1)
    if spec.family == "knn":
        phi = np.zeros_like(ds)
    else:
        eps = spec.radius(net)
        phi = np.where(inside(ds, eps), raw_affinity(spec, ds, eps), 0.0)
    total = phi.sum(axis=1)
    empty = total <= 0
    phi[empty, nearest_j[empty]] = 1.0
    total[empty] = 1.0
    return phi / total[:, None]


class ActionGridRegression:
    """Regressed values at ``(mu_m, h_k)`` for given ``mu_m`` and every ``h_k`` in the action net.

    Three representations, picked at construction:

    * ``separable``: distinct action-net members are at least the bandwidth
      apart (or the kernel is 1-NN), so only net points sharing ``h_k``
      contribute and the weights depend on ``mu_m`` alone; stored as a sparse
      ``(M, S)`` matrix acting on the table reshaped to ``(S, H)``.
    * ``knn``: padded ``(M, H, k)`` index array with uniform weights.
    * ``general``: sparse ``(M * H, N)`` weight matrix.
    """

    def __init__(self, net: EpsilonNet, spec: KernelSpec, mus, chunk_elems: int = 4_000_000):
        self.net = net
        self.spec = spec
        self.mus = np.atleast_2d(np.asarray(mus, dtype=float))
        self.chunk = max(1, chunk_elems // max(1, net.n_actions_net))
        self.state_weights = None
        self.knn_index = None
        self.matrix = None
        if spec.metric == "l2":
            self.mode = "general"
            self._build_general()
        elif spec.family == "knn" and spec.k == 1:
            self.mode = "separable"
            self._build_separable()
        elif spec.family == "knn":
            self.mode = "knn"
            self._build_knn()
        elif is_separable(net, spec):
            self.mode = "separable"
            self._build_separable()
        else:
            self.mode = "general"
            self._build_general()

    def __len__(self) -> int:
        return self.mus.shape[0]

    def _build_separable(self) -> None:
        S = self.net.n_states_net
        rows, cols, vals = [], [], []
        step = max(1, 2_000_000 // max(1, S))
        for lo in range(0, len(self), step):
            w = separable_state_weights(self.net, self.spec, self.mus[lo:lo + step])
            r, cidx = np.nonzero(w)
            rows.append(r + lo)
            cols.append(cidx)
            vals.append(w[r, cidx])
        self.state_weights = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(self), S),
        )

    def _build_knn(self) -> None:
        net, kk = self.net, self.spec.k
        if kk > len(net):
            raise ValueError(f"k={kk} exceeds net size {len(net)}")
        H = net.n_actions_net
        dmat = net.action_distance_matrix()
        gap = net.min_action_gap
        out = np.empty((len(self), H, kk), dtype=np.int64)
        karange = np.arange(H)
        for m, mu in enumerate(self.mus):
            ds = net.state_distances(mu)
            order = np.argsort(ds, kind="stable")
            if kk > len(order):
                tau = np.inf
            else:
                tau = ds[order[kk - 1]]
            slack = tau - ds[order[0]]
            if kk <= len(order) and slack < gap - 1e-9:
                out[m] = order[None, :kk] * H + karange[:, None]
                continue
            cand_j = np.flatnonzero(ds <= tau + 1e-9)
            pk, pk2 = np.nonzero(dmat <= slack + 1e-9)
            total = ds[cand_j][None, :] + dmat[pk, pk2][:, None]
            keep = total <= tau + 1e-9
            pi, ji = np.nonzero(keep)
            krow = pk[pi]
            netidx = cand_j[ji] * H + pk2[pi]
            dist = total[pi, ji]
            order3 = np.lexsort((netidx, dist, krow))
            krow_s = krow[order3]
            starts = np.searchsorted(krow_s, karange)
            take = starts[:, None] + np.arange(kk)[None, :]
            out[m] = netidx[order3][take]
        self.knn_index = out

    def _build_general(self) -> None:
        net, spec = self.net, self.spec
        H = net.n_actions_net
        rows, cols, vals = [], [], []
        for m, mu in enumerate(self.mus):
            for k in range(H):
                wv = weights(net, LiftedPair(mu, net.actions[k]), spec)
                rows.append(np.full(len(wv.indices), m * H + k))
                cols.append(wv.indices)
                vals.append(wv.weights)
        self.matrix = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(self) * H, len(net)),
        )

    def values(self, q, lo: int = 0, hi: int | None = None) -> np.ndarray:
        """Regressed table at targets ``lo:hi``, shape ``(hi - lo, H)``."""
        net = self.net
        q = np.asarray(q, dtype=float)
        if q.shape != (len(net),):
            raise ContractError(f"table has {q.size} entries, net has {len(net)}")
        hi = len(self) if hi is None else hi
        H = net.n_actions_net
        if self.mode == "separable":
            return np.asarray(self.state_weights[lo:hi] @ q.reshape(net.n_states_net, H))
        if self.mode == "knn":
            return q[self.knn_index[lo:hi]].mean(axis=2)
        return np.asarray(self.matrix[lo * H:hi * H] @ q).reshape(hi - lo, H)

    def maxima(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Per target: max over the action net and its lowest maximising index."""
        best = np.empty(len(self))
        arg = np.empty(len(self), dtype=np.int64)
        for lo in range(0, len(self), self.chunk):
            hi = min(lo + self.chunk, len(self))
            vals = self.values(q, lo, hi)
            a = np.argmax(vals, axis=1)
            arg[lo:hi] = a
            best[lo:hi] = vals[np.arange(hi - lo), a]
        return best, arg
