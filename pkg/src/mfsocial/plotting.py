"""Figures written next to the CSV outputs.  Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
}

# no timestamps, so reruns give identical files
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def plot_gains(sol, path: Path) -> Path:
    """Diagonal entries of ``P_q`` and ``Kbar_q`` (own block) against time."""
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(9.0, 3.6), sharex=True)
        for q in range(sol.K):
            for i in range(sol.n):
                a0.plot(sol.grid, sol.P[:, q, i, i], label=f"cluster {q}, [{i},{i}]")
                a1.plot(sol.grid, sol.Kdiag(q)[:, i, i], label=f"cluster {q}, [{i},{i}]")
        a0.set_title("individual gain P")
        a1.set_title("mean-field gain K (diagonal block)")
        for a in (a0, a1):
            a.set_xlabel("t")
        a0.legend(fontsize=7)
        return _save(fig, path)


def plot_estimation_error(grid, ms_check, ms_hat, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for q in range(ms_check.shape[1]):
            line, = ax.plot(grid, ms_check[:, q], label=f"cluster {q} vs distributed")
            if ms_hat is not None:
                ax.plot(grid, ms_hat[:, q], "--", color=line.get_color(),
                        label=f"cluster {q} vs centralized")
        ax.set_xlabel("t")
        ax.set_ylabel("mean-square estimation error")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_convergence(result, path: Path) -> Path:
    C1 = np.array([r.C1 for r in result.rows], dtype=float)
    err = np.array([r.sup_ms_error_max for r in result.rows])
    gap = np.array([r.gap_per_agent for r in result.rows])
    gap_se = np.array([r.gap_se for r in result.rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.loglog(C1, err, "ko-", mfc="w", label="sup-t estimation error")
        if result.error_fit is not None:
            f = result.error_fit
            ax.loglog(C1, np.exp(f.intercept) * C1 ** f.slope, "k--", lw=0.7,
                      label=f"slope {f.slope:.2f}")
        pos = gap > 0
        if pos.any():
            ax.errorbar(C1[pos], gap[pos], yerr=2 * gap_se[pos], fmt="s-", color="C3",
                        mfc="w", capsize=2, label="per-agent cost gap")
        if result.gap_fit is not None:
            f = result.gap_fit
            ax.loglog(C1, np.exp(f.intercept) * C1 ** f.slope, "--", color="C3", lw=0.7,
                      label=f"slope {f.slope:.2f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("smallest cluster size")
        ax.legend(fontsize=7)
        return _save(fig, path)
