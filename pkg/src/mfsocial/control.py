"""Centralized and distributed feedback laws built from a Riccati solution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DerivedMatrices, SystemSpec
from .riccati import RiccatiSolution


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Per-node feedback gains.

    ``F[q][k] = R_q^-1 B_q^T P_q(t_k)`` acts on the agent's own state (m x n);
    ``Fbar[q][k] = R_q^-1 B_q^T Kbar_q(t_k)`` acts on a global mean-field vector
    (m x nK).  Controls are ``u = -F x - Fbar m`` held constant over each step.
    """

    F: tuple[np.ndarray, ...]
    Fbar: tuple[np.ndarray, ...]
    grid: np.ndarray

    @property
    def K(self) -> int:
        return len(self.F)

    @classmethod
    def from_riccati(cls, sol: RiccatiSolution, spec: SystemSpec,
                     derived: DerivedMatrices) -> "GainSchedule":
        F, Fbar = [], []
        for q, c in enumerate(spec.clusters):
            RB = derived.Rinv[q] @ c.B.T
            f = RB @ sol.P[:, q]
            fb = RB @ sol.Kbar(q)
            f.setflags(write=False)
            fb.setflags(write=False)
            F.append(f)
            Fbar.append(fb)
        return cls(F=tuple(F), Fbar=tuple(Fbar), grid=sol.grid)


def feedback(gains: GainSchedule, q: int, x, m, k: int) -> np.ndarray:
    """Shared kernel ``-F_q x - Fbar_q m``.

    ``x`` is (..., n) and ``m`` is (..., nK); leading axes broadcast, so a whole
    cluster (or batch of paths) is evaluated in one call.
    """
    return -(np.asarray(x) @ gains.F[q][k].T) - (np.asarray(m) @ gains.Fbar[q][k].T)


def centralized_control(gains: GainSchedule, q: int, x_i, xK, k: int) -> np.ndarray:
    """Optimal feedback using the realized global mean field ``xK``."""
    return feedback(gains, q, x_i, xK, k)


def distributed_control(gains: GainSchedule, q: int, x_i, xbar, k: int) -> np.ndarray:
    """Feedback using the cluster-``q`` estimate of the global mean field."""
    return feedback(gains, q, x_i, xbar, k)


def average_cluster_control(gains: GainSchedule, q: int, xK_q, xbar, k: int) -> np.ndarray:
    return feedback(gains, q, xK_q, xbar, k)
