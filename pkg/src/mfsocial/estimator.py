"""Cluster mean-field estimators.

Cluster ``q`` keeps an estimate of the whole stacked mean field.  Blocks of
neighbouring clusters are copied from what the communication channel delivers;
the others follow the closed-loop mean-field ODE, each block ``p`` driven by
cluster ``p``'s own closed-loop matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DerivedMatrices, SystemSpec
from .riccati import ClosedLoop


class EstimatorDivergenceError(RuntimeError):
    pass


class InformationPatternError(PermissionError):
    """A cluster tried to read data its information set does not contain."""


class MeanFieldChannel:
    """Delivers realized cluster mean fields to the clusters allowed to see them.

    ``values`` is (paths, K, n).  ``read(q, p)`` returns cluster ``p``'s mean
    field to cluster ``q`` and refuses if ``p`` is not a neighbour of ``q``.
    ``log`` records every successful read when auditing is on.
    """

    def __init__(self, values: np.ndarray, neighbors: tuple[tuple[int, ...], ...],
                 audit: bool = False):
        self._values = values
        self._neighbors = neighbors
        self.log: list[tuple[int, int]] | None = [] if audit else None

    def update(self, values: np.ndarray) -> None:
        self._values = values

    def read(self, q: int, p: int) -> np.ndarray:
        if p not in self._neighbors[q]:
            raise InformationPatternError(f"cluster {q} cannot observe cluster {p}")
        if self.log is not None:
            self.log.append((q, p))
        return self._values[:, p]


@dataclass
class ClusterEstimator:
    """Estimator held by cluster ``q``; ``state`` is (paths, nK)."""

    q: int
    observed: tuple[int, ...]
    unobserved: tuple[int, ...]
    n: int
    state: np.ndarray

    def blk(self, p: int) -> slice:
        return slice(p * self.n, (p + 1) * self.n)

    def step(self, closed: ClosedLoop, k: int, h: float, channel: MeanFieldChannel) -> np.ndarray:
        """Advance from node ``k`` to ``k + 1``; the channel must already carry
        the mean fields at ``k + 1``."""
        old = self.state
        new = np.empty_like(old)
        for p in self.unobserved:
            b = self.blk(p)
            drift = old[:, b] @ closed.Atilde[k, p].T + old @ closed.Gtilde[k, p].T
            new[:, b] = old[:, b] + h * drift
        for p in self.observed:
            new[:, self.blk(p)] = channel.read(self.q, p)
        if not np.all(np.isfinite(new)):
            raise EstimatorDivergenceError(f"estimator of cluster {self.q} diverged at step {k + 1}")
        self.state = new
        return new


def init_estimator(spec: SystemSpec, derived: DerivedMatrices, channel: MeanFieldChannel,
                   paths: int) -> list[ClusterEstimator]:
    """Initial estimates: observed blocks copied from the channel, the rest at
    the configured initial means."""
    n, K = spec.n, spec.K
    ests = []
    for q in range(K):
        obs = spec.topology.neighbors(q)
        unobs = tuple(p for p in range(K) if p not in obs)
        state = np.empty((paths, n * K))
        for p in unobs:
            state[:, p * n:(p + 1) * n] = spec.clusters[p].init_mean
        for p in obs:
            state[:, p * n:(p + 1) * n] = channel.read(q, p)
        ests.append(ClusterEstimator(q=q, observed=obs, unobserved=unobs, n=n, state=state))
    return ests


@dataclass(frozen=True, eq=False)
class EstimatorTrace:
    """``xbar[path, step, q]`` is cluster q's estimate (length nK).

    ``err_check`` is ``x_dist^K - xbar``; ``err_hat`` is ``x_cent^K - xbar`` and
    exists only when a centralized run on the same noise was supplied.
    """

    xbar: np.ndarray
    err_check: np.ndarray | None = None
    err_hat: np.ndarray | None = None


@dataclass(frozen=True)
class EstimationErrorStats:
    grid: np.ndarray
    ms_check: np.ndarray  # (steps+1, K) mean over paths of |xi_check^{K,q}|^2
    ms_hat: np.ndarray | None

    @property
    def sup_check(self) -> np.ndarray:
        return self.ms_check.max(axis=0)

    @property
    def sup_hat(self) -> np.ndarray | None:
        return None if self.ms_hat is None else self.ms_hat.max(axis=0)


def estimation_errors(dist_bundle, trace: EstimatorTrace, cent_bundle=None) -> EstimationErrorStats:
    """Path-averaged squared estimation errors per cluster and node."""
    xK = dist_bundle.xK
    paths, T1, K, n = xK.shape
    if trace.xbar.shape[:2] != (paths, T1):
        raise ValueError("grid mismatch between trajectories and estimator trace")
    xKv = xK.reshape(paths, T1, 1, K * n)
    ms_check = np.mean(np.sum((xKv - trace.xbar) ** 2, axis=-1), axis=0)
    ms_hat = None
    if cent_bundle is not None:
        cK = cent_bundle.xK
        if cK.shape != xK.shape:
            raise ValueError("grid mismatch between centralized and distributed runs")
        ms_hat = np.mean(np.sum((cK.reshape(paths, T1, 1, K * n) - trace.xbar) ** 2, axis=-1),
                         axis=0)
    return EstimationErrorStats(grid=dist_bundle.grid, ms_check=ms_check, ms_hat=ms_hat)
