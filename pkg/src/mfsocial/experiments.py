"""Experiment drivers behind the CLI: coupled comparisons, convergence sweeps, oracle runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cost import CostReport, mean_se, value_function
from .model import SystemSpec, derive_matrices
from .oracle import (OracleReport, compare_structured_vs_stacked, fbsde_residual,
                     solve_stacked_riccati, stack_system)
from .riccati import solve_riccati
from .simulate import CoupledRun, System, draw_noise, simulate_centralized, simulate_coupled

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float


def fit_loglog_slope(x, y) -> SlopeFit:
    """Least-squares line through ``(log x, log y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need at least 3 (x, y) pairs")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs strictly positive coordinates")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), float(r2))


def solve_system(spec: SystemSpec) -> System:
    derived = derive_matrices(spec)
    return System(spec, solve_riccati(spec, derived), derived)


@dataclass
class CompareResult:
    system: System
    run: CoupledRun
    centralized: CostReport
    distributed: CostReport
    gap: float
    gap_se: float
    j2_rel_diff: float
    seed: int
    paths: int

    @property
    def spec(self) -> SystemSpec:
        return self.system.spec

    def rows(self) -> list[tuple[str, str, float, float]]:
        out = self.centralized.rows("centralized") + self.distributed.rows("distributed")
        out.append(("gap", "J_soc_per_agent", self.gap, self.gap_se))
        out.append(("gap", "J2_relative_difference", self.j2_rel_diff, 0.0))
        return out


def run_compare(spec: SystemSpec, paths: int, seed: int, workers: int = 1,
                store: bool = False, system: System | None = None) -> CompareResult:
    sys = system or solve_system(spec)
    noise = draw_noise(spec, paths, seed)
    run = simulate_coupled(sys, noise, store=store, workers=workers)
    v_st, v_corr = value_function(spec, sys.derived, sys.riccati)
    reports = []
    for bundle in (run.centralized, run.distributed):
        rep = bundle.report()
        rep.V_stated, rep.V_corrected = v_st, v_corr
        reports.append(rep)
    gap, gap_se = mean_se(run.gap_per_agent)
    j2c, j2d = run.centralized.costs.j2, run.distributed.costs.j2
    denom = np.maximum(np.abs(j2c), 1e-300)
    j2_rel = float(np.max(np.abs(j2c - j2d) / denom))
    return CompareResult(system=sys, run=run, centralized=reports[0], distributed=reports[1],
                         gap=gap, gap_se=gap_se, j2_rel_diff=j2_rel, seed=seed, paths=paths)


@dataclass(frozen=True)
class ConvergenceRow:
    scale: int
    C1: int
    N: int
    gap_per_agent: float
    gap_se: float
    sup_ms_error: tuple[float, ...]
    sup_ms_error_se: tuple[float, ...]
    seed: int
    paths: int

    @property
    def sup_ms_error_max(self) -> float:
        return max(self.sup_ms_error)


@dataclass
class ConvergenceResult:
    rows: list[ConvergenceRow]
    error_fit: SlopeFit
    gap_fit: SlopeFit | None
    invariance_deviation: float
    gain_deviation: float
    error_series: list[np.ndarray]
    grid: np.ndarray

    def gap_monotone(self, n_se: float = 2.0) -> bool:
        """Each gap is no larger than its predecessor, up to ``n_se`` combined standard errors."""
        for a, b in zip(self.rows, self.rows[1:]):
            tol = n_se * np.hypot(a.gap_se, b.gap_se)
            if b.gap_per_agent > a.gap_per_agent + tol:
                return False
        return True


def _rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def run_converge(base: SystemSpec, scales, paths: int, seed: int,
                 workers: int = 1) -> ConvergenceResult:
    """Scale every population by each factor, re-solve, and run coupled comparisons.

    Multiplying every ``N_q`` by a common factor leaves the population-weighted
    matrices ``D``, ``Qbar`` and ``Hbar`` unchanged; the sweep measures this
    (``invariance_deviation``) instead of assuming it, and reports how far the
    re-solved mean-field gains move (``gain_deviation``).
    """
    scales = [int(s) for s in scales]
    if len(scales) < 3:
        raise ValueError("a convergence sweep needs at least 3 scales")
    if any(s < 1 for s in scales):
        raise ValueError("scales must be positive integers")
    base_derived = derive_matrices(base)
    base_KK = None
    inv_dev = 0.0
    gain_dev = 0.0
    rows = []
    series = []
    for s in scales:
        spec = base.replace(counts=[c.count * s for c in base.clusters])
        sys = solve_system(spec)
        for name in ("D", "Qbar", "Hbar"):
            inv_dev = max(inv_dev, _rel_dev(getattr(sys.derived, name), getattr(base_derived, name)))
        if base_KK is None:
            base_KK = sys.riccati.KK
        gain_dev = max(gain_dev, _rel_dev(sys.riccati.KK, base_KK))
        res = run_compare(spec, paths, seed, workers=workers, system=sys)
        run = res.run
        idx = np.argmax(run.ms_check, axis=0)
        sup = run.ms_check[idx, np.arange(spec.K)]
        sup_se = run.ms_check_se[idx, np.arange(spec.K)]
        rows.append(ConvergenceRow(scale=s, C1=int(spec.counts.min()), N=spec.N,
                                   gap_per_agent=res.gap, gap_se=res.gap_se,
                                   sup_ms_error=tuple(float(v) for v in sup),
                                   sup_ms_error_se=tuple(float(v) for v in sup_se),
                                   seed=seed, paths=paths))
        series.append(run.ms_check)
        log.info("scale %d: C1=%d gap=%.4g +- %.2g sup err=%s", s, rows[-1].C1, res.gap,
                 res.gap_se, np.array2string(sup, precision=4))
    if inv_dev > 1e-12:
        log.warning("population-weighted matrices changed under uniform scaling (rel dev %.3g)",
                    inv_dev)
    C1 = [r.C1 for r in rows]
    err = [r.sup_ms_error_max for r in rows]
    error_fit = fit_loglog_slope(C1, err) if all(e > 0 for e in err) else None
    gaps = [r.gap_per_agent for r in rows]
    gap_fit = fit_loglog_slope(C1, gaps) if all(g > 0 for g in gaps) else None
    if gap_fit is None:
        log.warning("non-positive cost gap at some scale; gap slope not fitted")
    return ConvergenceResult(rows=rows, error_fit=error_fit, gap_fit=gap_fit,
                             invariance_deviation=inv_dev, gain_deviation=gain_dev,
                             error_series=series, grid=base.grid)


def run_oracle(spec: SystemSpec, trials: int = 100, seed: int = 0, nodes: int = 20,
               fbsde_paths: int = 8, workers: int = 1) -> OracleReport:
    """Structured-vs-stacked agreement plus the costate residual checks."""
    sys = solve_system(spec)
    stacked = stack_system(spec, sys.derived)
    stacked_sol = solve_stacked_riccati(stacked, spec.grid)
    report = compare_structured_vs_stacked(spec, sys.derived, sys.riccati, stacked_sol, stacked,
                                           trials=trials, nodes=nodes, seed=seed)
    bundle = simulate_centralized(spec, sys, draw_noise(spec, fbsde_paths, seed), store=True,
                                  workers=workers)
    res = fbsde_residual(bundle, sys.riccati, spec, sys.derived)
    report.add("fbsde_control_consistency", res["control"], 1e-10)
    report.add("fbsde_terminal_condition", res["terminal"], 1e-10)
    report.add("fbsde_drift_per_step", res["drift"], 10 * spec.h ** 2)
    return report
