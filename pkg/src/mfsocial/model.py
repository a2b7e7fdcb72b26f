"""Problem-instance data model, JSON config ingestion and derived block matrices.

Matrices are dense ``numpy`` arrays with row-major semantics: a config entry
``[[a, b], [c, d]]`` is the matrix with first row ``(a, b)``.  Agents are
ordered cluster by cluster, so cluster ``q`` owns the contiguous index range
``offsets[q]:offsets[q + 1]``.  Cluster indices are 0-based throughout the
library; the CLI prints them 0-based as well.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

log = logging.getLogger(__name__)

PSD_TOL = 1e-10


class ConfigError(ValueError):
    """Raised when a configuration cannot be parsed or fails validation."""

    def __init__(self, message: str, field_name: str | None = None):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}" if field_name else message)


class TopologyWarning(UserWarning):
    """Coupling weight on a pair of clusters that cannot communicate."""


def _matrix(value: Any, shape: tuple[int, int], name: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a numeric matrix ({exc})", name) from None
    if arr.ndim == 0 and shape == (1, 1):
        arr = arr.reshape(1, 1)
    if arr.shape != shape:
        raise ConfigError(f"expected shape {shape}, got {arr.shape}", name)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("contains non-finite entries", name)
    return arr


def _vector(value: Any, size: int, name: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a numeric vector ({exc})", name) from None
    if arr.shape != (size,):
        raise ConfigError(f"expected length {size}, got {arr.size}", name)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("contains non-finite entries", name)
    return arr


def _check_symmetric_psd(mat: np.ndarray, name: str, strict: bool = False) -> None:
    if not np.allclose(mat, mat.T, atol=1e-12, rtol=0.0):
        raise ConfigError("not symmetric", name)
    min_eig = np.linalg.eigvalsh(mat).min()
    if strict and min_eig <= 0.0:
        raise ConfigError(f"not positive definite (min eigenvalue {min_eig:.3g})", name)
    if not strict and min_eig < -PSD_TOL:
        raise ConfigError(f"not positive semidefinite (min eigenvalue {min_eig:.3g})", name)


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class ClusterSpec:
    label: str
    count: int
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    Sigma: np.ndarray
    Gamma: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    def __post_init__(self):
        _freeze(self.A, self.B, self.G, self.Sigma, self.Gamma, self.Q, self.R,
                self.H, self.init_mean, self.init_cov)

    @property
    def matrices(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in
                ("A", "B", "G", "Sigma", "Gamma", "Q", "R", "H", "init_mean", "init_cov")}

    def validate(self, n: int, m: int, d_w: int, where: str = "") -> None:
        if int(self.count) != self.count or self.count < 1:
            raise ConfigError("must be a positive integer", f"{where}count")
        shapes = {"A": (n, n), "B": (n, m), "G": (n, n), "Sigma": (n, d_w),
                  "Gamma": (n, n), "Q": (n, n), "R": (m, m), "H": (n, n),
                  "init_cov": (n, n)}
        for key, shape in shapes.items():
            if getattr(self, key).shape != shape:
                raise ConfigError(f"expected shape {shape}, got {getattr(self, key).shape}",
                                  f"{where}{key}")
        if self.init_mean.shape != (n,):
            raise ConfigError(f"expected length {n}", f"{where}init_mean")
        _check_symmetric_psd(self.Q, f"{where}Q")
        _check_symmetric_psd(self.H, f"{where}H")
        _check_symmetric_psd(self.init_cov, f"{where}init_cov")
        try:
            _check_symmetric_psd(self.R, f"{where}R", strict=True)
        except ConfigError as exc:
            raise ConfigError(f"R not positive definite ({exc})", f"{where}R") from None


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Communication matrix ``E`` (``E[q, p] == 1`` iff cluster ``p`` reaches ``q``)
    and weighted adjacency ``M`` used for coupling."""

    E: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        _freeze(self.E, self.M)

    @property
    def K(self) -> int:
        return self.E.shape[0]

    def validate(self) -> None:
        K = self.E.shape[0]
        if self.E.shape != (K, K) or K < 1:
            raise ConfigError(f"must be a non-empty square matrix, got {self.E.shape}", "topology.E")
        if self.M.shape != (K, K):
            raise ConfigError(f"expected shape {(K, K)}, got {self.M.shape}", "topology.M")
        if not np.all((self.E == 0) | (self.E == 1)):
            raise ConfigError("entries must be 0 or 1", "topology.E")

    def neighbors(self, q: int) -> tuple[int, ...]:
        return neighbor_set(self, q)

    def mask(self) -> np.ndarray:
        return self.E.astype(bool)


def neighbor_set(topology: NetworkTopology, q: int) -> tuple[int, ...]:
    """Clusters whose mean field cluster ``q`` observes, ascending."""
    K = topology.K
    if not 0 <= q < K:
        raise IndexError(f"cluster index {q} out of range for K={K}")
    return tuple(int(p) for p in np.flatnonzero(topology.E[q] == 1))


@dataclass(frozen=True, eq=False)
class SystemSpec:
    clusters: tuple[ClusterSpec, ...]
    topology: NetworkTopology
    horizon: float
    steps: int
    state_dim: int
    control_dim: int
    noise_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        self.validate()

    def validate(self) -> None:
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigError("must be a positive real", "horizon")
        for key in ("steps", "state_dim", "control_dim", "noise_dim"):
            val = getattr(self, key)
            if int(val) != val or val < 1:
                raise ConfigError("must be a positive integer", key)
        self.topology.validate()
        if len(self.clusters) != self.topology.K:
            raise ConfigError(f"{len(self.clusters)} clusters but topology has K={self.topology.K}",
                              "clusters")
        for q, c in enumerate(self.clusters):
            c.validate(self.state_dim, self.control_dim, self.noise_dim, where=f"clusters[{q}].")
        E, M = self.topology.E, self.topology.M
        bad = np.argwhere((M != 0) & (E == 0))
        if bad.size:
            pairs = ", ".join(f"({q},{p})" for q, p in bad)
            warnings.warn(f"nonzero coupling weight without a communication edge at {pairs}",
                          TopologyWarning, stacklevel=3)

    @property
    def K(self) -> int:
        return self.topology.K

    @property
    def n(self) -> int:
        return self.state_dim

    @property
    def m(self) -> int:
        return self.control_dim

    @property
    def d_w(self) -> int:
        return self.noise_dim

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def counts(self) -> np.ndarray:
        return np.array([c.count for c in self.clusters], dtype=int)

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def weights(self) -> np.ndarray:
        """Empirical cluster distribution ``N_q / N``."""
        return self.counts / self.N

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def cluster_of(self) -> np.ndarray:
        """Cluster index of every agent."""
        return np.repeat(np.arange(self.K), self.counts)

    def agent_slice(self, q: int) -> slice:
        off = self.offsets
        return slice(int(off[q]), int(off[q + 1]))

    def stacked_init_mean(self) -> np.ndarray:
        return np.concatenate([c.init_mean for c in self.clusters])

    def replace(self, **changes) -> "SystemSpec":
        """Copy with top-level fields replaced; ``counts=[...]`` rescales populations."""
        counts = changes.pop("counts", None)
        clusters = self.clusters
        if counts is not None:
            if len(counts) != self.K:
                raise ConfigError(f"need {self.K} counts", "counts")
            clusters = tuple(
                ClusterSpec(**{**c.matrices, "label": c.label, "count": int(nq)})
                for c, nq in zip(clusters, counts)
            )
        kwargs = dict(clusters=clusters, topology=self.topology, horizon=self.horizon,
                      steps=self.steps, state_dim=self.state_dim,
                      control_dim=self.control_dim, noise_dim=self.noise_dim)
        kwargs.update(changes)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TopologyWarning)
            return SystemSpec(**kwargs)

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "steps": self.steps,
            "state_dim": self.state_dim,
            "control_dim": self.control_dim,
            "noise_dim": self.noise_dim,
            "clusters": [
                {"label": c.label, "count": c.count,
                 **{k: v.tolist() for k, v in c.matrices.items()}}
                for c in self.clusters
            ],
            "topology": {"E": self.topology.E.astype(int).tolist(),
                         "M": self.topology.M.tolist()},
        }


_REQUIRED_TOP = ("horizon", "steps", "state_dim", "control_dim", "clusters", "topology")
_REQUIRED_CLUSTER = ("count", "A", "B", "G", "Sigma", "Gamma", "Q", "R", "H",
                     "init_mean", "init_cov")


def spec_from_dict(data: dict) -> SystemSpec:
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object")
    for key in _REQUIRED_TOP:
        if key not in data:
            raise ConfigError("missing required field", key)
    try:
        n, m = int(data["state_dim"]), int(data["control_dim"])
        d_w = int(data.get("noise_dim", 1))
    except (TypeError, ValueError):
        raise ConfigError("dimensions must be integers", "state_dim") from None
    if min(n, m, d_w) < 1:
        raise ConfigError("dimensions must be positive", "state_dim")

    topo = data["topology"]
    if not isinstance(topo, dict) or "E" not in topo or "M" not in topo:
        raise ConfigError("must contain E and M", "topology")
    E = np.array(topo["E"], dtype=float)
    if E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise ConfigError(f"must be a square matrix, got shape {E.shape}", "topology.E")
    K = E.shape[0]
    M = _matrix(topo["M"], (K, K), "topology.M")

    raw_clusters = data["clusters"]
    if not isinstance(raw_clusters, list) or not raw_clusters:
        raise ConfigError("must be a non-empty array", "clusters")
    clusters = []
    for q, rc in enumerate(raw_clusters):
        where = f"clusters[{q}]."
        for key in _REQUIRED_CLUSTER:
            if key not in rc:
                raise ConfigError("missing required field", where + key)
        count = rc["count"]
        if not isinstance(count, (int, float)) or int(count) != count or count < 1:
            raise ConfigError("must be a positive integer", where + "count")
        clusters.append(ClusterSpec(
            label=str(rc.get("label", f"C{q}")),
            count=int(count),
            A=_matrix(rc["A"], (n, n), where + "A"),
            B=_matrix(rc["B"], (n, m), where + "B"),
            G=_matrix(rc["G"], (n, n), where + "G"),
            Sigma=_matrix(rc["Sigma"], (n, d_w), where + "Sigma"),
            Gamma=_matrix(rc["Gamma"], (n, n), where + "Gamma"),
            Q=_matrix(rc["Q"], (n, n), where + "Q"),
            R=_matrix(rc["R"], (m, m), where + "R"),
            H=_matrix(rc["H"], (n, n), where + "H"),
            init_mean=_vector(rc["init_mean"], n, where + "init_mean"),
            init_cov=_matrix(rc["init_cov"], (n, n), where + "init_cov"),
        ))
    return SystemSpec(
        clusters=tuple(clusters),
        topology=NetworkTopology(E=E, M=M),
        horizon=float(data["horizon"]),
        steps=data["steps"],
        state_dim=n,
        control_dim=m,
        noise_dim=d_w,
    )


def load_spec(config_text: str) -> SystemSpec:
    """Parse a JSON config document into a validated :class:`SystemSpec`."""
    try:
        data = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    return spec_from_dict(data)


def load_spec_file(path) -> SystemSpec:
    with open(path, encoding="utf-8") as fh:
        return load_spec(fh.read())


def _blockdiag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


@dataclass(frozen=True, eq=False)
class DerivedMatrices:
    """Block matrices acting on the stacked cluster mean field ``x^K`` (length nK).

    ``Gbar[q]`` and ``Gammabar[q]`` are the n x nK coupling rows
    ``(M_q / K) kron G_q``.  ``D`` is ``N^K G^K (N^K)^-1``; ``Qbar``/``Hbar`` are the
    symmetrised mean-field cost weights whose row blocks enter the costate drift.
    """

    n: int
    K: int
    Gbar: tuple[np.ndarray, ...]
    Gammabar: tuple[np.ndarray, ...]
    Pi: np.ndarray
    NK: np.ndarray
    GK: np.ndarray
    GammaK: np.ndarray
    QK: np.ndarray
    RK: np.ndarray
    HK: np.ndarray
    AK: np.ndarray
    BK: np.ndarray
    SigmaK: np.ndarray
    D: np.ndarray
    Qbar: np.ndarray
    Hbar: np.ndarray
    E_mask: tuple[np.ndarray, ...]
    Ebar_mask: tuple[np.ndarray, ...]
    Rinv: tuple[np.ndarray, ...]
    BRB: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        for name in ("Pi", "NK", "GK", "GammaK", "QK", "RK", "HK", "AK", "BK", "SigmaK",
                     "D", "Qbar", "Hbar"):
            _freeze(getattr(self, name))
        _freeze(*self.Gbar, *self.Gammabar, *self.E_mask, *self.Ebar_mask, *self.Rinv, *self.BRB)

    def block(self, q: int) -> slice:
        return slice(q * self.n, (q + 1) * self.n)

    def D_col(self, q: int) -> np.ndarray:
        """Column block ``D_q`` (nK x n)."""
        return self.D[:, self.block(q)]

    def Qbar_row(self, q: int) -> np.ndarray:
        return self.Qbar[self.block(q)]

    def Hbar_row(self, q: int) -> np.ndarray:
        return self.Hbar[self.block(q)]

    @cached_property
    def BRBK(self) -> np.ndarray:
        """Block-diagonal ``B^K (R^K)^-1 (B^K)^T``."""
        return _blockdiag(self.BRB)


def derive_matrices(spec: SystemSpec) -> DerivedMatrices:
    n, K = spec.n, spec.K
    M = spec.topology.M
    cl = spec.clusters
    Gbar = tuple(np.kron(M[q][None, :] / K, cl[q].G) for q in range(K))
    Gammabar = tuple(np.kron(M[q][None, :] / K, cl[q].Gamma) for q in range(K))
    I = np.eye(n)
    Pi = _blockdiag([I * w for w in spec.weights])
    counts = spec.counts.astype(float)
    NK = _blockdiag([I * c for c in counts])
    NK_inv = _blockdiag([I / c for c in counts])
    GK = np.vstack(Gbar)
    GammaK = np.vstack(Gammabar)
    QK = _blockdiag([c.Q for c in cl])
    HK = _blockdiag([c.H for c in cl])
    RK = _blockdiag([c.R for c in cl])
    AK = _blockdiag([c.A for c in cl])
    BK = _blockdiag([c.B for c in cl])
    SigmaK = _blockdiag([c.Sigma for c in cl])

    D = NK @ GK @ NK_inv

    def mf_weight(W):
        return W @ GammaK + NK_inv @ GammaK.T @ W @ NK - NK_inv @ GammaK.T @ NK @ W @ GammaK

    Qbar = mf_weight(QK)
    Hbar = mf_weight(HK)

    E = spec.topology.E
    ones = np.ones(n)
    E_mask = tuple(np.kron(E[q], ones).astype(bool) for q in range(K))
    Ebar_mask = tuple(~e for e in E_mask)
    Rinv = tuple(np.linalg.inv(c.R) for c in cl)
    BRB = tuple(c.B @ Ri @ c.B.T for c, Ri in zip(cl, Rinv))
    return DerivedMatrices(
        n=n, K=K, Gbar=Gbar, Gammabar=Gammabar, Pi=Pi, NK=NK, GK=GK, GammaK=GammaK,
        QK=QK, RK=RK, HK=HK, AK=AK, BK=BK, SigmaK=SigmaK, D=D, Qbar=Qbar, Hbar=Hbar,
        E_mask=E_mask, Ebar_mask=Ebar_mask, Rinv=Rinv, BRB=BRB,
    )
