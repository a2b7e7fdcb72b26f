"""Command-line entry point: ``mfsocial <command> --config cfg.json [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .model import ConfigError, TopologyWarning, derive_matrices, load_spec
from .oracle import SizeGuardError
from . import report as rp

log = logging.getLogger("mfsocial")


def _load(args):
    text = Path(args.config).read_text(encoding="utf-8")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TopologyWarning)
        spec = load_spec(text)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if getattr(args, "steps_override", None):
        spec = spec.replace(steps=args.steps_override)
    return spec, text


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    spec, _ = _load(args)
    d = derive_matrices(spec)
    print(f"valid: K={spec.K} clusters, N={spec.N} agents, n={spec.n}, m={spec.m}, "
          f"d_w={spec.d_w}, T={spec.horizon}, steps={spec.steps}")
    for q, c in enumerate(spec.clusters):
        print(f"  cluster {q} ({c.label}): N_q={c.count}, pi_q={spec.weights[q]:.6g}, "
              f"neighbors={list(spec.topology.neighbors(q))}")
    print(f"  |D|={np.linalg.norm(d.D):.6g}  |Qbar|={np.linalg.norm(d.Qbar):.6g}  "
          f"|Hbar|={np.linalg.norm(d.Hbar):.6g}")
    return 0


def cmd_riccati(args) -> int:
    from .control import GainSchedule
    from .plotting import plot_gains
    from .riccati import riccati_residual, solve_riccati

    spec, text = _load(args)
    out = _out(args)
    d = derive_matrices(spec)
    sol = solve_riccati(spec, d)
    res = riccati_residual(sol, spec, d)
    rp.write_csv(out / "riccati_P.csv", ["t", "cluster", "row", "col", "value"],
                 rp.riccati_rows(sol, "P"))
    rp.write_csv(out / "riccati_K.csv", ["t", "cluster", "row", "col", "value"],
                 rp.riccati_rows(sol, "K"))
    rp.write_csv(out / "riccati_residual.csv", ["equation", "max_residual"],
                 [("P", res["P"]), ("K", res["K"])])
    if args.dump_gains:
        gains = GainSchedule.from_riccati(sol, spec, d)
        rp.write_csv(out / "gains.csv", ["cluster", "step", "t", "family", "row", "col", "value"],
                     rp.gain_rows(gains))
    plot_gains(sol, out / "gains.png")
    rp.write_manifest(out, "riccati", text, steps=spec.steps)
    print(f"P(0) per cluster: {[sol.P[0, q].tolist() for q in range(spec.K)]}")
    print(f"residuals: P={res['P']:.3e} K={res['K']:.3e}")
    return 0


def cmd_simulate(args) -> int:
    from .cost import value_function
    from .experiments import solve_system
    from .simulate import draw_noise, simulate_centralized, simulate_distributed

    spec, text = _load(args)
    out = _out(args)
    sys_ = solve_system(spec)
    noise = draw_noise(spec, args.paths, args.seed)
    store = args.dump_trajectories
    if args.regime == "centralized":
        bundle = simulate_centralized(spec, sys_, noise, store=store, workers=args.workers)
    else:
        bundle, _ = simulate_distributed(spec, sys_, noise, store=store, workers=args.workers)
    rep = bundle.report()
    rep.V_stated, rep.V_corrected = value_function(spec, sys_.derived, sys_.riccati)
    rp.write_csv(out / "costs.csv", ["regime", "statistic", "value", "std_error"],
                 rep.rows(args.regime))
    if store:
        rp.write_csv(out / "trajectories.csv", rp.trajectory_header(spec.n, spec.m),
                     rp.trajectory_rows(bundle))
    rp.write_manifest(out, "simulate", text, seed=args.seed, paths=args.paths,
                      steps=spec.steps, regime=args.regime, workers=args.workers)
    print(f"{args.regime}: J_soc={rep.J_soc:.6g} +- {rep.J_soc_se:.2g}  "
          f"V_corrected={rep.V_corrected:.6g}")
    return 0


def cmd_compare(args) -> int:
    from .experiments import run_compare
    from .plotting import plot_estimation_error

    spec, text = _load(args)
    out = _out(args)
    res = run_compare(spec, args.paths, args.seed, workers=args.workers,
                      store=args.dump_trajectories)
    rp.write_csv(out / "costs.csv", ["regime", "statistic", "value", "std_error"], res.rows())
    rp.write_csv(out / "estimation_errors.csv", ["cluster", "step", "t", "ms_check", "ms_hat"],
                 rp.error_agg_rows(res.run))
    if args.dump_trajectories:
        rp.write_csv(out / "estimation_errors_paths.csv",
                     ["path", "cluster", "step", "t", "err_check_sq", "err_hat_sq"],
                     rp.error_rows(res.run))
        for name, b in (("centralized", res.run.centralized), ("distributed", res.run.distributed)):
            rp.write_csv(out / f"trajectories_{name}.csv", rp.trajectory_header(spec.n, spec.m),
                         rp.trajectory_rows(b))
    plot_estimation_error(res.run.grid, res.run.ms_check, res.run.ms_hat,
                          out / "estimation_error.png")
    rp.write_manifest(out, "compare", text, seed=args.seed, paths=args.paths,
                      steps=spec.steps, workers=args.workers)
    print(f"centralized J/N={res.centralized.J_soc / spec.N:.6g}  "
          f"distributed J/N={res.distributed.J_soc / spec.N:.6g}  "
          f"gap={res.gap:.4g} +- {res.gap_se:.2g}  J2 rel diff={res.j2_rel_diff:.2e}")
    return 0


def cmd_converge(args) -> int:
    from .experiments import run_converge
    from .plotting import plot_convergence

    spec, text = _load(args)
    out = _out(args)
    scales = [int(s) for s in args.scales.split(",") if s.strip()]
    res = run_converge(spec, scales, args.paths, args.seed, workers=args.workers)
    K = spec.K
    header = (["scale", "C1", "N", "gap_per_agent", "gap_se"]
              + [f"sup_ms_error_c{q}" for q in range(K)]
              + [f"sup_ms_error_se_c{q}" for q in range(K)] + ["seed", "paths"])
    rp.write_csv(out / "convergence.csv", header,
                 [(r.scale, r.C1, r.N, r.gap_per_agent, r.gap_se, *r.sup_ms_error,
                   *r.sup_ms_error_se, r.seed, r.paths) for r in res.rows])
    fits = []
    for name, f in (("estimation_error", res.error_fit), ("cost_gap", res.gap_fit)):
        if f is not None:
            fits.append((name, f.slope, f.intercept, f.r2))
    fits.append(("uniform_scaling_invariance_deviation", res.invariance_deviation, None, None))
    rp.write_csv(out / "slopes.csv", ["quantity", "slope", "intercept", "r2"], fits)
    plot_convergence(res, out / "convergence.png")
    rp.write_manifest(out, "converge", text, seed=args.seed, paths=args.paths, scales=scales,
                      steps=spec.steps, workers=args.workers)
    for row in fits:
        print(f"{row[0]}: {rp.fmt(row[1])}")
    return 0


def cmd_oracle(args) -> int:
    from .experiments import run_oracle

    spec, text = _load(args)
    out = _out(args)
    rep = run_oracle(spec, trials=args.trials, seed=args.seed, workers=args.workers)
    rp.write_csv(out / "oracle.csv", ["check", "max_deviation", "tolerance", "pass"],
                 [(c.name, c.deviation, c.tolerance, c.passed) for c in rep.checks])
    rp.write_manifest(out, "oracle", text, seed=args.seed, trials=args.trials, steps=spec.steps)
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.deviation:.3e} (tol {c.tolerance:.1e})")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfsocial",
                                description="Mean-field social control over clustered networks")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sim=True):
        sp.add_argument("--config", required=True, help="JSON problem configuration")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--steps-override", type=int, default=None)
        if sim:
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--paths", type=int, default=1000)
            sp.add_argument("--workers", type=int, default=1)
            sp.add_argument("--dump-trajectories", action="store_true")

    sp = sub.add_parser("validate", help="validate a configuration")
    sp.add_argument("--config", required=True)
    sp.add_argument("--steps-override", type=int, default=None)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("riccati", help="solve the Riccati equations and dump gains")
    common(sp, sim=False)
    sp.add_argument("--dump-gains", action="store_true")
    sp.set_defaults(func=cmd_riccati)

    sp = sub.add_parser("simulate", help="simulate one controller regime")
    common(sp)
    sp.add_argument("--regime", choices=("centralized", "distributed"), default="centralized")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="centralized vs distributed on common noise")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("converge", help="population-scaling sweep with log-log fits")
    common(sp)
    sp.add_argument("--scales", default="1,4,16,64", help="comma-separated population factors")
    sp.set_defaults(func=cmd_converge)

    sp = sub.add_parser("oracle", help="certify against the stacked finite-N solution")
    common(sp)
    sp.add_argument("--trials", type=int, default=100)
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SizeGuardError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
