"""Social cost, its split into mean-field and deviation parts, and the value function.

Running costs use the left-endpoint rule on the simulation grid, matching the
zero-order hold of the Euler-Maruyama scheme.  The per-step kernels here are
shared by the streaming accumulator inside the simulator and by
:func:`social_cost`, which replays a stored trajectory bundle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .model import DerivedMatrices, SystemSpec
from .riccati import RiccatiSolution


def _qform(y: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", y, W, y)


def step_costs(spec: SystemSpec, derived: DerivedMatrices, x: np.ndarray, xK: np.ndarray,
               u: np.ndarray | None = None, terminal: bool = False):
    """Instantaneous cost terms at one node.

    ``x`` is (paths, N, n), ``xK`` is (paths, K, n), ``u`` is (paths, N, m).
    Returns ``(per_agent, j1, j2)`` with shapes (paths, N), (paths,), (paths,).
    With ``terminal=True`` the ``H`` weights are used and ``u`` is ignored.
    """
    paths = x.shape[0]
    xKv = xK.reshape(paths, -1)
    per_agent = np.empty(x.shape[:2])
    j1 = np.zeros(paths)
    j2 = np.zeros(paths)
    for q, c in enumerate(spec.clusters):
        sl = spec.agent_slice(q)
        W = c.H if terminal else c.Q
        track = xKv @ derived.Gammabar[q].T  # (paths, n)
        xq = x[:, sl]
        per_agent[:, sl] = _qform(xq - track[:, None], W)
        mean_dev = xK[:, q] - track
        zeta = xq - xK[:, q][:, None]
        j1 += c.count * _qform(mean_dev, W)
        j2 += _qform(zeta, W).sum(axis=1)
        if not terminal:
            uq = u[:, sl]
            uK = uq.mean(axis=1)
            per_agent[:, sl] += _qform(uq, c.R)
            j1 += c.count * _qform(uK, c.R)
            j2 += _qform(uq - uK[:, None], c.R).sum(axis=1)
    return per_agent, j1, j2


class CostAccumulator:
    """Streaming left-endpoint quadrature of the social cost for a batch of paths."""

    def __init__(self, spec: SystemSpec, derived: DerivedMatrices, paths: int):
        self.spec = spec
        self.derived = derived
        self.agent = np.zeros((paths, spec.N))
        self.j1 = np.zeros(paths)
        self.j2 = np.zeros(paths)

    def running(self, x, xK, u, h: float) -> None:
        a, j1, j2 = step_costs(self.spec, self.derived, x, xK, u)
        self.agent += h * a
        self.j1 += h * j1
        self.j2 += h * j2

    def terminal(self, x, xK) -> None:
        a, j1, j2 = step_costs(self.spec, self.derived, x, xK, terminal=True)
        self.agent += a
        self.j1 += j1
        self.j2 += j2

    def result(self) -> "PathCosts":
        return PathCosts(agent=self.agent, j1=self.j1, j2=self.j2)


@dataclass(frozen=True, eq=False)
class PathCosts:
    """Per-path realised costs: ``agent`` (paths, N), ``j1`` and ``j2`` (paths,)."""

    agent: np.ndarray
    j1: np.ndarray
    j2: np.ndarray

    @property
    def soc(self) -> np.ndarray:
        return self.agent.sum(axis=1)

    @staticmethod
    def concat(parts: list["PathCosts"]) -> "PathCosts":
        return PathCosts(agent=np.concatenate([p.agent for p in parts]),
                         j1=np.concatenate([p.j1 for p in parts]),
                         j2=np.concatenate([p.j2 for p in parts]))


def mean_se(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class CostReport:
    J_soc: float
    J_soc_se: float
    J1: float
    J1_se: float
    J2: float
    J2_se: float
    per_agent: np.ndarray
    paths: PathCosts
    N: int
    V_stated: float | None = None
    V_corrected: float | None = None
    quadrature: str = field(default="left-endpoint rectangle")

    @classmethod
    def from_paths(cls, pc: PathCosts, N: int) -> "CostReport":
        js, js_se = mean_se(pc.soc)
        j1, j1_se = mean_se(pc.j1)
        j2, j2_se = mean_se(pc.j2)
        return cls(J_soc=js, J_soc_se=js_se, J1=j1, J1_se=j1_se, J2=j2, J2_se=j2_se,
                   per_agent=pc.agent.mean(axis=0), paths=pc, N=N)

    def rows(self, regime: str) -> list[tuple[str, str, float, float]]:
        out = [(regime, "J_soc", self.J_soc, self.J_soc_se),
               (regime, "J_soc_per_agent", self.J_soc / self.N, self.J_soc_se / self.N),
               (regime, "J1", self.J1, self.J1_se),
               (regime, "J2", self.J2, self.J2_se)]
        if self.V_stated is not None:
            out.append((regime, "V_stated", self.V_stated, 0.0))
        if self.V_corrected is not None:
            out.append((regime, "V_corrected", self.V_corrected, 0.0))
        return out


def social_cost(bundle, spec: SystemSpec, derived: DerivedMatrices) -> CostReport:
    """Re-evaluate costs from a stored trajectory bundle."""
    if bundle.u is None or bundle.x is None:
        raise ValueError("social_cost needs stored states and controls")
    paths = bundle.x.shape[0]
    acc = CostAccumulator(spec, derived, paths)
    h = spec.h
    steps = bundle.u.shape[2]
    for k in range(steps):
        acc.running(bundle.x[:, :, k], bundle.xK[:, k], bundle.u[:, :, k], h)
    acc.terminal(bundle.x[:, :, steps], bundle.xK[:, steps])
    return CostReport.from_paths(acc.result(), spec.N)


def cost_decomposition(bundle, spec: SystemSpec, derived: DerivedMatrices) -> tuple[np.ndarray, np.ndarray]:
    """Per-path mean-field part ``J1`` and deviation part ``J2``."""
    rep = social_cost(bundle, spec, derived)
    return rep.paths.j1, rep.paths.j2


def noise_rate(spec: SystemSpec, sol: RiccatiSolution) -> np.ndarray:
    """Integrand of the additive-noise correction at every node."""
    out = np.zeros(sol.steps + 1)
    for q, c in enumerate(spec.clusters):
        S = c.Sigma
        out += c.count * np.einsum("ji,kjl,li->k", S, sol.P[:, q], S)
        out += np.einsum("ji,kjl,li->k", S, sol.Kdiag(q), S)
    return out


def value_function(spec: SystemSpec, derived: DerivedMatrices, sol: RiccatiSolution,
                   x0: np.ndarray | None = None) -> tuple[float, float]:
    """Return ``(V_stated, V_corrected)``.

    ``V_stated`` is the quadratic form in the initial state with the individual
    gains ``P_q(0)`` and the mean-field gain ``N^K K^K(0)``.  With ``x0=None`` the
    expectation over the configured Gaussian initial law is taken in closed
    form; otherwise ``x0`` is a sample of shape (paths, N, n) and the form is
    averaged over it.  ``V_corrected`` adds ``int_0^T noise_rate dt`` (Simpson).
    """
    if sol.KK is None or len(sol.grid) != spec.steps + 1:
        raise ValueError("Riccati solution missing or on a different grid")
    NKK = derived.NK @ sol.KK[0]
    if x0 is None:
        v = 0.0
        for q, c in enumerate(spec.clusters):
            P0 = sol.P[0, q]
            v += c.count * (c.init_mean @ P0 @ c.init_mean + np.trace(P0 @ c.init_cov))
            v += np.trace(sol.Kdiag(q)[0] @ c.init_cov)
        mbar = spec.stacked_init_mean()
        v += mbar @ NKK @ mbar
    else:
        x0 = np.asarray(x0, dtype=float)
        paths = x0.shape[0]
        vals = np.zeros(paths)
        xK = np.stack([x0[:, spec.agent_slice(q)].mean(axis=1) for q in range(spec.K)], axis=1)
        for q in range(spec.K):
            vals += _qform(x0[:, spec.agent_slice(q)], sol.P[0, q]).sum(axis=1)
        vals += _qform(xK.reshape(paths, -1), NKK)
        v = vals.mean()
    v = float(v)
    corr = float(simpson(noise_rate(spec, sol), x=sol.grid))
    return v, v + corr
