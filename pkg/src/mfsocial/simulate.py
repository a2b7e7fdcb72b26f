"""Euler-Maruyama simulation of the N-agent system under three control regimes.

Noise is keyed, not streamed: every (seed, path, cluster, kind) pair owns its
own Philox stream, laid out agent-major, so agent ``j`` of cluster ``q`` sees
the same increments whichever regime is simulated, however many workers run,
and however large the other clusters are.  Paths are processed in fixed-size
chunks; chunk results are concatenated in path order, so outputs do not depend
on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .control import GainSchedule, feedback
from .cost import CostAccumulator, CostReport, PathCosts
from .estimator import EstimatorTrace, MeanFieldChannel, init_estimator
from .model import DerivedMatrices, SystemSpec, derive_matrices
from .riccati import ClosedLoop, RiccatiSolution, closed_loop_matrices

CHUNK_PATHS = 128

_INIT, _INCR = 0, 1


class SimulationDivergenceError(RuntimeError):
    pass


def _sqrt_psd(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


class NoiseBundle:
    """Brownian increments and initial states for ``paths`` Monte Carlo paths.

    Draws are generated on demand for a path range; the same
    ``(seed, path, cluster, agent, step, component)`` always yields the same
    number.  ``dW`` and ``x0`` materialise everything and are meant for small runs.
    """

    def __init__(self, spec: SystemSpec, paths: int, seed: int):
        if paths < 1:
            raise ValueError("paths must be >= 1")
        self.spec = spec
        self.paths = int(paths)
        self.seed = int(seed)
        self.h = spec.h
        self.steps = spec.steps
        self._roots = [_sqrt_psd(c.init_cov) for c in spec.clusters]

    def _rng(self, path: int, q: int, kind: int) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, path, q, kind])
        return np.random.Generator(np.random.Philox(ss))

    def initial_states(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        hi = self.paths if hi is None else hi
        spec = self.spec
        out = np.empty((hi - lo, spec.N, spec.n))
        for j, path in enumerate(range(lo, hi)):
            for q, c in enumerate(spec.clusters):
                z = self._rng(path, q, _INIT).standard_normal((c.count, spec.n))
                out[j, spec.agent_slice(q)] = c.init_mean + z @ self._roots[q].T
        return out

    def increments(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        """Increments of shape (paths, N, steps, d_w), each ~ N(0, h)."""
        hi = self.paths if hi is None else hi
        spec = self.spec
        sh = np.sqrt(self.h)
        out = np.empty((hi - lo, spec.N, self.steps, spec.d_w))
        for j, path in enumerate(range(lo, hi)):
            for q, c in enumerate(spec.clusters):
                z = self._rng(path, q, _INCR).standard_normal((c.count, self.steps, spec.d_w))
                out[j, spec.agent_slice(q)] = sh * z
        return out

    @property
    def dW(self) -> np.ndarray:
        return self.increments()

    @property
    def x0(self) -> np.ndarray:
        return self.initial_states()


def draw_noise(spec: SystemSpec, paths: int, seed: int) -> NoiseBundle:
    return NoiseBundle(spec, paths, seed)


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """Simulation output.

    ``x`` (paths, N, steps+1, n) and ``u`` (paths, N, steps, m) are present only
    when storage was requested; ``xK`` (paths, steps+1, K, n) likewise.  Costs
    are always accumulated while simulating.
    """

    regime: str
    grid: np.ndarray
    costs: PathCosts
    noise: NoiseBundle
    x: np.ndarray | None = None
    u: np.ndarray | None = None
    xK: np.ndarray | None = None
    M: np.ndarray | None = None

    @property
    def zK(self) -> np.ndarray | None:
        """Coupling terms ``(1/K) sum_p m_qp x^K_p``, shape (paths, steps+1, K, n)."""
        if self.xK is None:
            return None
        K = self.M.shape[0]
        return np.einsum("qp,aspn->asqn", self.M / K, self.xK)

    def report(self) -> CostReport:
        return CostReport.from_paths(self.costs, self.costs.agent.shape[1])


class System:
    """A solved instance: spec, derived matrices, Riccati gains and closed-loop matrices."""

    def __init__(self, spec: SystemSpec, riccati: RiccatiSolution,
                 derived: DerivedMatrices | None = None):
        if len(riccati.grid) != spec.steps + 1:
            raise ValueError("Riccati grid does not match the simulation grid")
        self.spec = spec
        self.derived = derived if derived is not None else derive_matrices(spec)
        self.riccati = riccati
        self.gains = GainSchedule.from_riccati(riccati, spec, self.derived)
        self._closed: ClosedLoop | None = None

    @property
    def closed(self) -> ClosedLoop:
        if self._closed is None:
            self._closed = closed_loop_matrices(self.riccati, self.derived)
        return self._closed


def _cluster_means(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    return np.stack([x[:, spec.agent_slice(q)].mean(axis=1) for q in range(spec.K)], axis=1)


@dataclass
class _ChunkOut:
    costs: PathCosts
    x: np.ndarray | None
    u: np.ndarray | None
    xK: np.ndarray
    xbar: np.ndarray | None


def _run_chunk(sys: System, regime: str, x0: np.ndarray, dW: np.ndarray,
               controls: np.ndarray | None, store: bool, channel_factory=None) -> _ChunkOut:
    spec, derived, gains = sys.spec, sys.derived, sys.gains
    P, N, n = x0.shape
    K, steps, h = spec.K, spec.steps, spec.h
    slices = [spec.agent_slice(q) for q in range(K)]
    Sig_T = [c.Sigma.T for c in spec.clusters]
    A_T = [c.A.T for c in spec.clusters]
    B_T = [c.B.T for c in spec.clusters]
    G_T = [g.T for g in derived.Gbar]

    acc = CostAccumulator(spec, derived, P)
    xs = np.empty((P, N, steps + 1, n)) if store else None
    us = np.empty((P, N, steps, spec.m)) if store else None
    xKs = np.empty((P, steps + 1, K, n))
    xbars = np.empty((P, steps + 1, K, n * K)) if (store and regime == "distributed") else None

    x = x0.copy()
    xK = _cluster_means(spec, x)
    ests = channel = None
    if regime == "distributed":
        neighbors = tuple(spec.topology.neighbors(q) for q in range(K))
        channel = (channel_factory or MeanFieldChannel)(xK, neighbors)
        ests = init_estimator(spec, derived, channel, P)

    u = np.empty((P, N, spec.m))
    for k in range(steps + 1):
        xKs[:, k] = xK
        if xs is not None:
            xs[:, :, k] = x
        if xbars is not None:
            for q in range(K):
                xbars[:, k, q] = ests[q].state
        if k == steps:
            break
        xKv = xK.reshape(P, n * K)
        for q in range(K):
            sl = slices[q]
            if regime == "centralized":
                u[:, sl] = feedback(gains, q, x[:, sl], xKv[:, None, :], k)
            elif regime == "distributed":
                u[:, sl] = feedback(gains, q, x[:, sl], ests[q].state[:, None, :], k)
            else:
                u[:, sl] = controls[:, sl, k]
        if us is not None:
            us[:, :, k] = u
        acc.running(x, xK, u, h)
        x_new = np.empty_like(x)
        for q in range(K):
            sl = slices[q]
            xq = x[:, sl]
            drift = xq @ A_T[q] + u[:, sl] @ B_T[q] + (xKv @ G_T[q])[:, None, :]
            x_new[:, sl] = xq + h * drift + dW[:, sl, k] @ Sig_T[q]
        x = x_new
        if not np.all(np.isfinite(x)):
            raise SimulationDivergenceError(f"{regime} simulation diverged at step {k + 1}")
        xK = _cluster_means(spec, x)
        if ests is not None:
            channel.update(xK)
            for est in ests:
                est.step(sys.closed, k, h, channel)
    acc.terminal(x, xK)
    return _ChunkOut(costs=acc.result(), x=xs, u=us, xK=xKs, xbar=xbars)


def _chunks(paths: int, size: int = CHUNK_PATHS) -> list[tuple[int, int]]:
    return [(lo, min(lo + size, paths)) for lo in range(0, paths, size)]


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _assemble(sys: System, regime: str, noise: NoiseBundle, outs: list[_ChunkOut], store: bool):
    costs = PathCosts.concat([o.costs for o in outs])
    cat = (lambda name: np.concatenate([getattr(o, name) for o in outs])) if store else (lambda name: None)
    bundle = TrajectoryBundle(regime=regime, grid=sys.spec.grid, costs=costs, noise=noise,
                              x=cat("x"), u=cat("u"), xK=cat("xK") if store else None,
                              M=sys.spec.topology.M)
    trace = None
    if regime == "distributed" and store:
        trace = EstimatorTrace(xbar=cat("xbar"))
    return bundle, trace


def _run(sys: System, regime: str, noise: NoiseBundle, controls=None, store=True,
         workers=1, channel_factory=None):
    def job(rng):
        lo, hi = rng
        ctl = None if controls is None else controls[lo:hi]
        return _run_chunk(sys, regime, noise.initial_states(lo, hi), noise.increments(lo, hi),
                          ctl, store, channel_factory)

    return _map(job, _chunks(noise.paths), workers)


def _system(spec, riccati) -> System:
    return riccati if isinstance(riccati, System) else System(spec, riccati)


def simulate_centralized(spec: SystemSpec, riccati, noise: NoiseBundle, *, store: bool = True,
                         workers: int = 1) -> TrajectoryBundle:
    sys = _system(spec, riccati)
    outs = _run(sys, "centralized", noise, store=store, workers=workers)
    return _assemble(sys, "centralized", noise, outs, store)[0]


def simulate_distributed(spec: SystemSpec, riccati, noise: NoiseBundle, *, store: bool = True,
                         workers: int = 1, channel_factory=None):
    """Returns ``(bundle, trace)``; ``trace`` is None unless ``store``."""
    sys = _system(spec, riccati)
    outs = _run(sys, "distributed", noise, store=store, workers=workers,
                channel_factory=channel_factory)
    return _assemble(sys, "distributed", noise, outs, store)


def simulate_openloop(spec: SystemSpec, controls: np.ndarray, noise: NoiseBundle, *,
                      riccati=None, store: bool = True, workers: int = 1) -> TrajectoryBundle:
    """Simulate under externally supplied controls of shape (paths, N, steps, m).

    A 3-d array (N, steps, m) is broadcast to every path.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 3:
        controls = np.broadcast_to(controls, (noise.paths,) + controls.shape)
    want = (noise.paths, spec.N, spec.steps, spec.m)
    if controls.shape != want:
        raise ValueError(f"controls must have shape {want[1:]} or {want}, got {controls.shape}")
    if riccati is None:
        sys = _OpenLoopSystem(spec)
    else:
        sys = _system(spec, riccati)
    outs = _run(sys, "open-loop", noise, controls=controls, store=store, workers=workers)
    return _assemble(sys, "open-loop", noise, outs, store)[0]


class _OpenLoopSystem:
    """Minimal stand-in when no gains are needed."""

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.derived = derive_matrices(spec)
        self.gains = None
        self.closed = None


@dataclass(frozen=True, eq=False)
class CoupledRun:
    """Centralized and distributed runs on identical noise."""

    centralized: TrajectoryBundle
    distributed: TrajectoryBundle
    trace: EstimatorTrace | None
    grid: np.ndarray
    ms_check: np.ndarray  # (steps+1, K) path-mean |x_dist^K - xbar^{K,q}|^2
    ms_hat: np.ndarray    # (steps+1, K) path-mean |x_cent^K - xbar^{K,q}|^2
    ms_check_se: np.ndarray

    @property
    def gap_per_agent(self) -> np.ndarray:
        """Per-path (J_dist - J_cent) / N."""
        N = self.centralized.costs.agent.shape[1]
        return (self.distributed.costs.soc - self.centralized.costs.soc) / N


def simulate_coupled(sys: System, noise: NoiseBundle, *, store: bool = False,
                     workers: int = 1) -> CoupledRun:
    """Run both regimes chunk by chunk on the same noise and stream estimation errors."""
    spec = sys.spec
    K, n = spec.K, spec.n

    def job(rng):
        lo, hi = rng
        x0, dW = noise.initial_states(lo, hi), noise.increments(lo, hi)
        c = _run_chunk(sys, "centralized", x0, dW, None, store)
        d = _run_chunk(sys, "distributed", x0, dW, None, True)
        P = hi - lo
        xbar = d.xbar  # (P, steps+1, K, nK)
        dK = d.xK.reshape(P, spec.steps + 1, 1, n * K)
        cK = c.xK.reshape(P, spec.steps + 1, 1, n * K)
        e_check = np.sum((dK - xbar) ** 2, axis=-1)
        e_hat = np.sum((cK - xbar) ** 2, axis=-1)
        if not store:
            d = _ChunkOut(costs=d.costs, x=None, u=None, xK=d.xK, xbar=None)
        return c, d, e_check.sum(axis=0), (e_check ** 2).sum(axis=0), e_hat.sum(axis=0)

    results = _map(job, _chunks(noise.paths), workers)
    paths = noise.paths
    s1 = sum(r[2] for r in results)
    s2 = sum(r[3] for r in results)
    sh = sum(r[4] for r in results)
    ms_check = s1 / paths
    var = np.clip(s2 / paths - ms_check ** 2, 0.0, None) * paths / max(paths - 1, 1)
    cent, _ = _assemble(sys, "centralized", noise, [r[0] for r in results], store)
    dist, trace = _assemble(sys, "distributed", noise, [r[1] for r in results], store)
    return CoupledRun(centralized=cent, distributed=dist, trace=trace, grid=spec.grid,
                      ms_check=ms_check, ms_hat=sh / paths, ms_check_se=np.sqrt(var / paths))
