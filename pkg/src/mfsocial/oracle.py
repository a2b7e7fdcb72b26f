"""Brute-force ground truth for small populations.

The stacked system writes the whole N-agent problem as one LQ problem on
``X = vec(x_1, ..., x_N)``; its standard Riccati solution is the exact
finite-N optimum, independent of the cluster-level equations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DerivedMatrices, SystemSpec, _blockdiag
from .riccati import RiccatiSolution, SolverDivergenceError, _rk4_step

MAX_STACKED_DIM = 400


class SizeGuardError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StackedSystem:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    mean_map: np.ndarray  # x^K = mean_map @ X


def _mean_map(spec: SystemSpec) -> np.ndarray:
    n, K, N = spec.n, spec.K, spec.N
    L = np.zeros((n * K, n * N))
    for q in range(K):
        for i in range(*spec.agent_slice(q).indices(N)):
            L[q * n:(q + 1) * n, i * n:(i + 1) * n] = np.eye(n) / spec.counts[q]
    return L


def stack_system(spec: SystemSpec, derived: DerivedMatrices) -> StackedSystem:
    n, N = spec.n, spec.N
    if n * N > MAX_STACKED_DIM:
        raise SizeGuardError(f"stacked dimension N*n = {n * N} exceeds {MAX_STACKED_DIM}; "
                             "the oracle only certifies small instances")
    L = _mean_map(spec)
    owner = spec.cluster_of()
    A = np.zeros((n * N, n * N))
    Q = np.zeros_like(A)
    H = np.zeros_like(A)
    for i in range(N):
        q = owner[i]
        c = spec.clusters[q]
        rows = slice(i * n, (i + 1) * n)
        A[rows, rows] += c.A
        A[rows] += derived.Gbar[q] @ L
        sel = np.zeros((n, n * N))
        sel[:, rows] = np.eye(n)
        S = sel - derived.Gammabar[q] @ L
        Q += S.T @ c.Q @ S
        H += S.T @ c.H @ S
    B = _blockdiag([spec.clusters[q].B for q in owner])
    D = _blockdiag([spec.clusters[q].Sigma for q in owner])
    R = _blockdiag([spec.clusters[q].R for q in owner])
    Q = 0.5 * (Q + Q.T)
    H = 0.5 * (H + H.T)
    return StackedSystem(A=A, B=B, D=D, Q=Q, R=R, H=H, mean_map=L)


@dataclass(frozen=True, eq=False)
class StackedSolution:
    """``P[k]`` is the stacked Riccati matrix at node k; ``offset[k]`` is the
    noise contribution ``int_{t_k}^T tr(D^T P D) ds``."""

    grid: np.ndarray
    P: np.ndarray
    offset: np.ndarray

    def value(self, x0: np.ndarray) -> float:
        """Optimal cost from a fixed stacked initial state."""
        return float(x0 @ self.P[0] @ x0 + self.offset[0])


def solve_stacked_riccati(stacked: StackedSystem, grid: np.ndarray) -> StackedSolution:
    """Backward RK4 for the stacked Riccati equation with the trace term carried
    as an extra scalar state, so the noise offset is integrated at RK4 order."""
    A, Q, D = stacked.A, stacked.Q, stacked.D
    S = stacked.B @ np.linalg.solve(stacked.R, stacked.B.T)
    dim = A.shape[0]
    steps = len(grid) - 1
    h = grid[1] - grid[0]

    def f(y):
        P = y[:-1].reshape(dim, dim)
        dP = P @ A + A.T @ P + Q - P @ S @ P
        return np.append(dP.ravel(), np.trace(D.T @ P @ D))

    Ps = np.empty((steps + 1, dim, dim))
    off = np.empty(steps + 1)
    Ps[steps] = stacked.H
    off[steps] = 0.0
    y = np.append(stacked.H.ravel(), 0.0)
    for k in range(steps, 0, -1):
        y = _rk4_step(f, y, h)
        P = y[:-1].reshape(dim, dim)
        P[:] = 0.5 * (P + P.T)
        if not np.all(np.isfinite(y)):
            raise SolverDivergenceError("stacked Riccati equation", None, grid[k - 1])
        Ps[k - 1] = P
        off[k - 1] = y[-1]
    return StackedSolution(grid=grid, P=Ps, offset=off)


def stacked_expected_value(spec: SystemSpec, sol: StackedSolution) -> float:
    """Optimal social cost averaged over the configured initial law."""
    owner = spec.cluster_of()
    mu = np.concatenate([spec.clusters[q].init_mean for q in owner])
    cov = _blockdiag([spec.clusters[q].init_cov for q in owner])
    P0 = sol.P[0]
    return float(mu @ P0 @ mu + np.trace(P0 @ cov) + sol.offset[0])


@dataclass
class OracleCheck:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)


@dataclass
class OracleReport:
    checks: list[OracleCheck] = field(default_factory=list)

    def add(self, name: str, deviation: float, tolerance: float) -> OracleCheck:
        chk = OracleCheck(name, float(deviation), float(tolerance))
        self.checks.append(chk)
        return chk

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> OracleCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def structured_controls(spec: SystemSpec, derived: DerivedMatrices, sol: RiccatiSolution,
                        X: np.ndarray, k: int) -> np.ndarray:
    """Centralized feedback for every agent from a stacked state ``X`` (length Nn)."""
    n, N = spec.n, spec.N
    x = X.reshape(N, n)
    xK = np.concatenate([x[spec.agent_slice(q)].mean(axis=0) for q in range(spec.K)])
    out = []
    for q, c in enumerate(spec.clusters):
        lam = x[spec.agent_slice(q)] @ sol.P[k, q].T + sol.Kbar(q)[k] @ xK
        out.append(-(lam @ (derived.Rinv[q] @ c.B.T).T))
    return np.concatenate(out).reshape(-1)


def compare_structured_vs_stacked(spec: SystemSpec, derived: DerivedMatrices,
                                  sol: RiccatiSolution, stacked_sol: StackedSolution,
                                  stacked: StackedSystem, trials: int = 100, nodes: int = 20,
                                  seed: int = 0, gain_tol: float = 1e-6,
                                  value_tol: float = 1e-6) -> OracleReport:
    from .cost import value_function

    if len(stacked_sol.grid) != len(sol.grid):
        raise ValueError("grid mismatch between structured and stacked solutions")
    rng = np.random.default_rng(seed)
    dim = spec.N * spec.n
    node_idx = np.unique(np.linspace(0, sol.steps, nodes).round().astype(int))
    gain_dev = 0.0
    form_dev = 0.0
    Rinv_Bt = np.linalg.solve(stacked.R, stacked.B.T)
    NK = derived.NK
    for k in node_idx:
        Pk = stacked_sol.P[k]
        for _ in range(trials):
            X = rng.standard_normal(dim)
            u_stacked = -(Rinv_Bt @ Pk @ X)
            u_struct = structured_controls(spec, derived, sol, X, int(k))
            gain_dev = max(gain_dev, float(np.max(np.abs(u_stacked - u_struct))))
            x = X.reshape(spec.N, spec.n)
            xK = stacked.mean_map @ X
            form = sum(x[i] @ sol.P[k, q] @ x[i] for i, q in enumerate(spec.cluster_of()))
            form += xK @ NK @ sol.KK[k] @ xK
            ref = X @ Pk @ X
            form_dev = max(form_dev, abs(form - ref) / max(1.0, abs(ref)))
    report = OracleReport()
    report.add("gain_agreement", gain_dev, gain_tol)
    _, v_corr = value_function(spec, derived, sol)
    v_ref = stacked_expected_value(spec, stacked_sol)
    report.add("value_agreement", abs(v_corr - v_ref) / max(abs(v_ref), 1e-300), value_tol)
    report.add("quadratic_form_reconstruction", form_dev, gain_tol)
    return report


def fbsde_residual(bundle, sol: RiccatiSolution, spec: SystemSpec,
                   derived: DerivedMatrices) -> dict[str, float]:
    """Check that ``lambda_i = P_q x_i + Kbar_q x^K`` solves the costate equation
    along a centralized trajectory bundle.

    Returns the max control-consistency residual, the max terminal residual and
    the max per-step drift residual.  The drift check compares the deterministic
    increment of ``lambda_i`` over one step (gain derivatives by second-order
    differences of the solved grid, state drifts from the recorded controls)
    against ``-h [A^T lambda_i + D_q^T lambda^K + Q x_i - Qbar_q x^K]``.
    """
    if bundle.x is None or bundle.u is None:
        raise ValueError("fbsde_residual needs stored trajectories and controls")
    if bundle.x.shape[2] != sol.steps + 1:
        raise ValueError("grid mismatch between trajectories and Riccati solution")
    h = spec.h
    n, K = spec.n, spec.K
    steps = sol.steps
    x = bundle.x  # (paths, N, steps+1, n)
    u = bundle.u  # (paths, N, steps, m)
    xK = bundle.xK  # (paths, steps+1, K, n)
    xKv = xK.reshape(xK.shape[0], steps + 1, n * K)

    def ddt(arr):
        d = np.empty_like(arr)
        d[1:-1] = (arr[2:] - arr[:-2]) / (2 * h)
        d[0] = (-3 * arr[0] + 4 * arr[1] - arr[2]) / (2 * h)
        d[-1] = (3 * arr[-1] - 4 * arr[-2] + arr[-3]) / (2 * h)
        return d

    lam = np.empty_like(x)
    for q in range(K):
        sl = spec.agent_slice(q)
        lam[:, sl] = (np.einsum("kab,pikb->pika", sol.P[:, q], x[:, sl])
                      + np.einsum("kab,pkb->pka", sol.Kbar(q), xKv)[:, None])
    lamK = np.stack([lam[:, spec.agent_slice(q)].mean(axis=1) for q in range(K)], axis=2)
    lamKv = lamK.reshape(lamK.shape[0], steps + 1, n * K)

    ctrl = 0.0
    term = 0.0
    drift = 0.0
    xK_drift = np.zeros_like(xKv[:, :steps])
    x_drift = np.empty((x.shape[0], x.shape[1], steps, n))
    for q, c in enumerate(spec.clusters):
        sl = spec.agent_slice(q)
        xs = x[:, sl, :steps]
        x_drift[:, sl] = (xs @ c.A.T + u[:, sl] @ c.B.T
                          + (xKv[:, None, :steps] @ derived.Gbar[q].T))
        xK_drift[..., q * n:(q + 1) * n] = x_drift[:, sl].mean(axis=1)
        F = derived.Rinv[q] @ c.B.T
        u_lam = -(lam[:, sl, :steps] @ F.T)
        ctrl = max(ctrl, float(np.max(np.abs(u_lam - u[:, sl]), initial=0.0)))
        lam_T = x[:, sl, -1] @ c.H.T - (xKv[:, -1] @ derived.Hbar_row(q).T)[:, None]
        term = max(term, float(np.max(np.abs(lam[:, sl, -1] - lam_T), initial=0.0)))

    for q, c in enumerate(spec.clusters):
        sl = spec.agent_slice(q)
        dP = ddt(sol.P[:, q])[:steps]
        dKbar = ddt(sol.Kbar(q))[:steps]
        xs = x[:, sl, :steps]
        incr = (np.einsum("kab,pikb->pika", dP, xs)
                + np.einsum("kab,pikb->pika", sol.P[:steps, q], x_drift[:, sl])
                + np.einsum("kab,pkb->pka", dKbar, xKv[:, :steps])[:, None]
                + np.einsum("kab,pkb->pka", sol.Kbar(q)[:steps], xK_drift)[:, None]) * h
        Dq = derived.D_col(q)
        target = -(lam[:, sl, :steps] @ c.A
                   + (lamKv[:, :steps] @ Dq)[:, None]
                   + xs @ c.Q.T
                   - (xKv[:, :steps] @ derived.Qbar_row(q).T)[:, None]) * h
        drift = max(drift, float(np.max(np.abs(incr - target), initial=0.0)))
    return {"control": ctrl, "terminal": term, "drift": drift}
