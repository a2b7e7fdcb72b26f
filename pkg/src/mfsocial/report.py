"""CSV writers and the run manifest.

All floats are written with 17 significant digits so a CSV round-trips to the
exact doubles; row order is fixed by the data, never by timing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def riccati_rows(sol, family: str):
    """(t, cluster, row, col, value) for ``P`` or ``K`` (row blocks of K^K)."""
    n, K = sol.n, sol.K
    for k, t in enumerate(sol.grid):
        for q in range(K):
            mat = sol.P[k, q] if family == "P" else sol.Kbar(q)[k]
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    yield (t, q, i, j, mat[i, j])


def gain_rows(gains):
    for q in range(gains.K):
        for family, arr in (("F", gains.F[q]), ("Fbar", gains.Fbar[q])):
            for k, t in enumerate(gains.grid):
                mat = arr[k]
                for i in range(mat.shape[0]):
                    for j in range(mat.shape[1]):
                        yield (q, k, t, family, i, j, mat[i, j])


def trajectory_rows(bundle):
    paths, N, T1, n = bundle.x.shape
    m = bundle.u.shape[-1]
    for p in range(paths):
        for i in range(N):
            for k in range(T1):
                u = bundle.u[p, i, k] if k < T1 - 1 else [None] * m
                yield (p, i, k, bundle.grid[k], *bundle.x[p, i, k], *u)


def trajectory_header(n: int, m: int) -> list[str]:
    return (["path", "agent", "step", "t"] + [f"x{j}" for j in range(n)]
            + [f"u{j}" for j in range(m)])


def error_rows(run):
    """Per-path squared estimation errors; needs a stored coupled run."""
    xbar = run.trace.xbar
    paths, T1, K, nK = xbar.shape
    dK = run.distributed.xK.reshape(paths, T1, 1, nK)
    cK = run.centralized.xK.reshape(paths, T1, 1, nK)
    e_check = np.sum((dK - xbar) ** 2, axis=-1)
    e_hat = np.sum((cK - xbar) ** 2, axis=-1)
    for p in range(paths):
        for q in range(K):
            for k in range(T1):
                yield (p, q, k, run.grid[k], e_check[p, k, q], e_hat[p, k, q])


def error_agg_rows(run):
    for q in range(run.ms_check.shape[1]):
        for k, t in enumerate(run.grid):
            yield (q, k, t, run.ms_check[k, q], run.ms_hat[k, q])


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(out: Path, command: str, config_text: str, **fields) -> Path:
    import scipy

    from . import __version__

    data = {
        "command": command,
        "config_sha256": config_hash(config_text),
        **fields,
        "versions": {
            "mfsocial": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    path = Path(out) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
