"""Backward Riccati flows for the individual gain ``P_q`` and the mean-field gain ``K^K``.

Both equations are integrated backward from ``T`` with classical RK4 on the
uniform grid ``t_k = k * h`` shared with the SDE simulator, so controllers never
interpolate gains.  Time derivatives below are written in reversed time
``tau = T - t``: ``dP/dtau = -dP/dt``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import DerivedMatrices, SystemSpec


class SolverDivergenceError(RuntimeError):
    def __init__(self, what: str, cluster: int | None, t: float):
        self.cluster = cluster
        self.t = t
        where = f" (cluster {cluster})" if cluster is not None else ""
        super().__init__(f"{what}{where} diverged at t={t:.6g}: non-finite entries; "
                         "check the configuration or reduce the step size")


def _rk4_step(f: Callable, y, h: float):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def p_rate(P, A, Q, BRB):
    """``-dP/dt`` for one cluster."""
    return P @ A + A.T @ P + Q - P @ BRB @ P


def k_rate(K, Pbd, derived: DerivedMatrices):
    """``-dK/dt`` for the coupled mean-field gain, given the block-diagonal ``P^K``."""
    AK, GK, D, S = derived.AK, derived.GK, derived.D, derived.BRBK
    return ((AK + D).T @ K + K @ (AK + GK) + Pbd @ GK + D.T @ Pbd - derived.Qbar
            - K @ S @ (Pbd + K) - Pbd @ S @ K)


def _blockdiag_stack(Ps: np.ndarray) -> np.ndarray:
    K, n, _ = Ps.shape
    out = np.zeros((K * n, K * n))
    for q in range(K):
        out[q * n:(q + 1) * n, q * n:(q + 1) * n] = Ps[q]
    return out


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Gains on the grid.  ``P[k, q]`` is ``P_q(t_k)``; ``KK[k]`` is ``K^K(t_k)``."""

    grid: np.ndarray
    P: np.ndarray
    KK: np.ndarray
    n: int

    @property
    def steps(self) -> int:
        return len(self.grid) - 1

    @property
    def K(self) -> int:
        return self.P.shape[1]

    def Kbar(self, q: int) -> np.ndarray:
        """Row block ``q`` of ``K^K`` at every node, shape (steps+1, n, nK)."""
        return self.KK[:, q * self.n:(q + 1) * self.n, :]

    def Kdiag(self, q: int) -> np.ndarray:
        n = self.n
        return self.KK[:, q * n:(q + 1) * n, q * n:(q + 1) * n]

    def Pbd(self, k: int) -> np.ndarray:
        return _blockdiag_stack(self.P[k])


def solve_P(spec: SystemSpec, derived: DerivedMatrices) -> np.ndarray:
    """Per-cluster ``P_q`` on the grid, shape (steps+1, K, n, n).

    Each cluster is integrated on its own so that ``P_q`` depends only on
    cluster ``q`` data.
    """
    steps, h, n = spec.steps, spec.h, spec.n
    grid = spec.grid
    out = np.empty((steps + 1, spec.K, n, n))
    for q, c in enumerate(spec.clusters):
        A, Q, S = c.A, c.Q, derived.BRB[q]
        P = c.H.copy()
        out[steps, q] = P

        def f(Y, A=A, Q=Q, S=S):
            return p_rate(Y, A, Q, S)

        for k in range(steps, 0, -1):
            with np.errstate(over="ignore", invalid="ignore"):
                P = _rk4_step(f, P, h)
            P = 0.5 * (P + P.T)
            if not np.all(np.isfinite(P)):
                raise SolverDivergenceError("P Riccati equation", q, grid[k - 1])
            out[k - 1, q] = P
    return out


def solve_K(spec: SystemSpec, derived: DerivedMatrices, P: np.ndarray) -> np.ndarray:
    """Coupled ``K^K`` on the grid, shape (steps+1, nK, nK).

    ``P`` is re-integrated jointly with ``K`` so RK4 stage values of ``P`` are
    exact stage values rather than interpolants; the supplied ``P`` grid only
    seeds the terminal value.
    """
    steps, h, n, K = spec.steps, spec.h, spec.n, spec.K
    nK = n * K
    grid = spec.grid
    As = np.stack([c.A for c in spec.clusters])
    Qs = np.stack([c.Q for c in spec.clusters])
    Ss = np.stack(derived.BRB)

    def f(y):
        Ps = y[:K * n * n].reshape(K, n, n)
        Km = y[K * n * n:].reshape(nK, nK)
        dP = np.stack([p_rate(Ps[q], As[q], Qs[q], Ss[q]) for q in range(K)])
        dK = k_rate(Km, _blockdiag_stack(Ps), derived)
        return np.concatenate([dP.ravel(), dK.ravel()])

    out = np.empty((steps + 1, nK, nK))
    Kt = -derived.Hbar
    out[steps] = Kt
    y = np.concatenate([P[steps].ravel(), Kt.ravel()])
    for k in range(steps, 0, -1):
        with np.errstate(over="ignore", invalid="ignore"):
            y = _rk4_step(f, y, h)
        Ps = y[:K * n * n].reshape(K, n, n)
        Ps[:] = 0.5 * (Ps + np.swapaxes(Ps, 1, 2))
        Km = y[K * n * n:].reshape(nK, nK)
        if not np.all(np.isfinite(Km)):
            raise SolverDivergenceError("K Riccati equation", None, grid[k - 1])
        out[k - 1] = Km
    return out


def solve_riccati(spec: SystemSpec, derived: DerivedMatrices) -> RiccatiSolution:
    P = solve_P(spec, derived)
    KK = solve_K(spec, derived, P)
    for a in (P, KK):
        a.setflags(write=False)
    return RiccatiSolution(grid=spec.grid, P=P, KK=KK, n=spec.n)


def riccati_residual(sol: RiccatiSolution, spec: SystemSpec,
                     derived: DerivedMatrices) -> dict[str, float]:
    """Max Frobenius norm of both Riccati equations at interior nodes.

    The time derivative is a centred difference, so the residual floor is O(h^2).
    """
    h = spec.h
    res_P = 0.0
    res_K = 0.0
    for k in range(1, sol.steps):
        for q, c in enumerate(spec.clusters):
            dP = (sol.P[k + 1, q] - sol.P[k - 1, q]) / (2 * h)
            r = dP + p_rate(sol.P[k, q], c.A, c.Q, derived.BRB[q])
            res_P = max(res_P, float(np.linalg.norm(r)))
        dK = (sol.KK[k + 1] - sol.KK[k - 1]) / (2 * h)
        r = dK + k_rate(sol.KK[k], sol.Pbd(k), derived)
        res_K = max(res_K, float(np.linalg.norm(r)))
    return {"P": res_P, "K": res_K}


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """Closed-loop matrices per node: ``Atilde[k, q]`` (n x n), ``Gtilde[k, q]`` (n x nK),
    ``Z[k]`` (nK x nK^2, block-diagonal in the per-cluster ``B R^-1 B^T Kbar_q``)."""

    Atilde: np.ndarray
    Gtilde: np.ndarray
    Z: np.ndarray


def closed_loop_matrices(sol: RiccatiSolution, derived: DerivedMatrices) -> ClosedLoop:
    n, K = sol.n, sol.K
    nK = n * K
    T1 = sol.steps + 1
    Atilde = np.empty((T1, K, n, n))
    Gtilde = np.empty((T1, K, n, nK))
    Z = np.zeros((T1, nK, nK * K))
    AK = derived.AK
    for q in range(K):
        b = derived.block(q)
        S = derived.BRB[q]
        Atilde[:, q] = AK[b, b] - S @ sol.P[:, q]
        SK = S @ sol.Kbar(q)
        Gtilde[:, q] = derived.Gbar[q] - SK
        Z[:, b, q * nK:(q + 1) * nK] = SK
    return ClosedLoop(Atilde=Atilde, Gtilde=Gtilde, Z=Z)
