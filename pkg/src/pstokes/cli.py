"""Command-line interface.

Subcommands:

* ``pstokes run`` -- one experiment, one method; writes CSVs, metadata and
  figures into the output directory.
* ``pstokes sweep-delta`` -- the same experiment repeated over a list of
  regularization values, with a combined history and comparison figure.
* ``pstokes study-regularization`` -- distance-to-reference study over a
  (delta, mu0) ladder with a fitted log-log slope.
* ``pstokes check`` -- the invariant self-check suite.

Options may come from a config file (INI sections [domain], [params],
[solver], [output]); any flag given on the command line overrides the
file value of the same name.  Exit code 0 only on full success.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import experiments, meshing, solver

_EXPERIMENTS = {"ismip-b": meshing.ISMIP_B, "block": meshing.BLOCK}


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI config file; flags override it")
    p.add_argument("--experiment", choices=sorted(_EXPERIMENTS), help="experiment domain")
    p.add_argument("--method", choices=list(solver.METHODS), help="outer iteration")
    p.add_argument("--nx", type=int, help="columns per copy")
    p.add_argument("--ny", type=int, help="rows")
    p.add_argument("--copies", type=int, help="mirror copies per side")
    p.add_argument("--length", dest="l", type=float, help="horizontal extent per copy (m)")
    p.add_argument("--alpha-deg", type=float, help="tilt angle (degrees)")
    p.add_argument("--p", type=float, help="bulk power-law exponent")
    p.add_argument("--s", type=float, help="sliding power-law exponent")
    p.add_argument("--delta", type=float, help="regularization (1/a)")
    p.add_argument("--mu0", type=float, help="linear diffusion (Pa a)")
    p.add_argument("--tau", type=float, help="friction coefficient")
    p.add_argument("--rate-factor", dest="b", type=float, help="rate factor B")
    p.add_argument("--gamma", type=float, help="Armijo sufficient-decrease parameter")
    p.add_argument("--min-step", type=float, help="Armijo minimum step (0 disables)")
    p.add_argument("--max-iters", type=int, help="outer iteration cap")
    p.add_argument("--tol", type=float, help="relative residual-norm tolerance")
    p.add_argument("--tol-abs", type=float, help="absolute residual-norm tolerance")
    p.add_argument("--max-armijo-evals", type=int, help="merit evaluations per Armijo search")
    p.add_argument("--max-bisect-evals", type=int, help="evaluations per exact search")
    p.add_argument("--bracket-b0", type=float, help="initial bisection upper bound")
    p.add_argument("--sign-mode", choices=[experiments.SIGN_PAPER, experiments.SIGN_CONVENTIONAL])
    p.add_argument("--friction-guess", dest="friction_guess", action="store_true", default=None)
    p.add_argument("--no-friction-guess", dest="friction_guess", action="store_false")
    p.add_argument("--no-plots", dest="plots", action="store_false", default=None)
    p.add_argument("--seed", type=int, help="recorded in run metadata")
    p.add_argument("--out", type=Path, help="output directory")


def _merged(args: argparse.Namespace) -> dict:
    merged: dict = {}
    if args.config is not None:
        merged.update(experiments.load_config_file(args.config))
    for key, value in vars(args).items():
        if key in ("config", "command", "func", "deltas", "mu0s") or value is None:
            continue
        merged[key] = value
    return merged


def _get(merged: dict, key: str, cast, default):
    if key not in merged:
        return default
    value = merged[key]
    if cast is bool and isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return cast(value)


def _build_config(args: argparse.Namespace) -> experiments.ExperimentConfig:
    merged = _merged(args)
    kind_key = str(_get(merged, "experiment", str, "ismip-b")).lower()
    if kind_key not in _EXPERIMENTS:
        raise SystemExit(f"unknown experiment {kind_key!r}")
    kind = _EXPERIMENTS[kind_key]

    domain = meshing.DomainSpec(
        kind=kind,
        L=_get(merged, "l", float, 5000.0),
        alpha=float(np.radians(_get(merged, "alpha_deg", float, 0.5))),
        copies=_get(merged, "copies", int, None),
        nx=_get(merged, "nx", int, 16),
        ny=_get(merged, "ny", int, 8),
    )
    params = experiments.default_params(
        kind,
        delta=_get(merged, "delta", float, 1e-12),
        mu0=_get(merged, "mu0", float, 1e-17),
        tau=_get(merged, "tau", float, None),
        p=_get(merged, "p", float, 4.0 / 3.0),
        s=_get(merged, "s", float, None),
    )
    if "b" in merged:
        params.B = float(merged["b"])
    if "alpha_deg" in merged:
        params.alpha = domain.alpha
        params.g = experiments.rotated_gravity(domain.alpha)
    cfg = solver.SolverConfig(
        method=_get(merged, "method", str, solver.NEWTON_ARMIJO),
        gamma=_get(merged, "gamma", float, 1e-4),
        min_step=_get(merged, "min_step", float, 0.0),
        max_outer=_get(merged, "max_iters", int, 100),
        tol_rel_ries=_get(merged, "tol", float, 1e-13),
        tol_abs_ries=_get(merged, "tol_abs", float, 0.0),
        max_armijo_evals=_get(merged, "max_armijo_evals", int, 20),
        max_bisect_evals=_get(merged, "max_bisect_evals", int, 25),
        bracket_b0=_get(merged, "bracket_b0", float, 2.0),
    )
    return experiments.ExperimentConfig(
        domain=domain,
        params=params,
        solver=cfg,
        initial_guess_friction=_get(merged, "friction_guess", bool, kind == meshing.BLOCK),
        sign_mode=_get(merged, "sign_mode", str, experiments.SIGN_PAPER),
        output_dir=Path(_get(merged, "out", str, "runs/out")),
        make_plots=_get(merged, "plots", bool, True),
        seed=_get(merged, "seed", int, 0),
    )


def _cmd_run(args: argparse.Namespace) -> int:
    config = _build_config(args)
    art = experiments.run_experiment(config)
    rec = art.result.history[-1]
    print(f"status: {art.result.status}")
    print(f"iterations: {rec.k}, final relative residual norm: {rec.ries_rel:.3e}")
    if art.profile.n_invalid:
        print(f"surface samples with negative radicand: {art.profile.n_invalid} (reported as NaN)")
    print(f"artifacts in {config.output_dir}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _build_config(args)
    deltas = [float(x) for x in args.deltas.split(",")]
    arts = experiments.delta_sweep(config, deltas)
    failures = sum(1 for a in arts if a is None)
    for d, art in zip(deltas, arts):
        if art is None:
            print(f"delta={d:g}: FAILED (see failure.json)")
        else:
            print(f"delta={d:g}: {art.result.status}, min ries_rel {min(r.ries_rel for r in art.result.history):.3e}")
    print(f"artifacts in {config.output_dir}")
    return 1 if failures else 0


def _cmd_study(args: argparse.Namespace) -> int:
    config = _build_config(args)
    deltas = [float(x) for x in args.deltas.split(",")]
    if args.mu0s:
        mu0s = [float(x) for x in args.mu0s.split(",")]
        if len(mu0s) != len(deltas):
            raise SystemExit("--mu0s must list one value per delta")
    else:
        p = config.params.power_law_bulk.r
        mu0s = [d**p for d in deltas]
    report = experiments.regularization_convergence_study(config, list(zip(deltas, mu0s)))
    print(f"fitted log-log slope: {report['slope']:.3f}")
    print(f"fitted c_tilde: {report['c_tilde']:.3e}")
    failed = [q for q in report["points"] if q["status"] == "failed"]
    print(f"artifacts in {config.output_dir}")
    return 1 if failed else 0


def _cmd_check(args: argparse.Namespace) -> int:
    from . import checks

    results = checks.run_all_checks()
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        tag = "PASS" if ok else "FAIL"
        failures += 0 if ok else 1
        print(f"{tag}  {name:<{width}}  {detail}")
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pstokes", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_run_options(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep-delta", help="run the experiment for several regularization values")
    _add_run_options(p_sweep)
    p_sweep.add_argument("--deltas", default="1e-12,1e-4", help="comma-separated delta values")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_study = sub.add_parser("study-regularization", help="distance-to-reference regularization study")
    _add_run_options(p_study)
    p_study.add_argument("--deltas", default="3e-2,1e-2,3e-3,1e-3,3e-4", help="comma-separated delta ladder")
    p_study.add_argument("--mu0s", default="", help="matching mu0 ladder (default: delta^p)")
    p_study.set_defaults(func=_cmd_study)

    p_check = sub.add_parser("check", help="run the invariant self-checks")
    p_check.set_defaults(func=_cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean error, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
