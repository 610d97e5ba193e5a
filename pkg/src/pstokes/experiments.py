"""Experiment definitions, defaults, initial guesses, and report artifacts.

Two experiments are provided.  The glacier benchmark flows over a
sinusoidal bed with period 5 km and mean thickness 1 km, clamped at the
bed and at the far ends of a three-copy extension that stands in for
periodic boundaries.  The sliding block is a 5 km x 1 km rectangle with a
nonlinear friction law on its flat bed.  In both, the tilted geometry is
realized by rotating gravity instead of the domain.

Units are meters, years (a) and pascals throughout: velocities in m/a,
the rate factor B in Pa a^(1/3) for the glaciological exponent 4/3, the
regularization delta in 1/a, and the diffusion mu0 in Pa a.  Gravity stays
in m/s^2 so that rho * g is a force density in Pa/m.

A run writes delimited output (iterations.csv, surface_velocity.csv), a
JSON metadata file, and static matplotlib figures rendered from the CSVs.
"""

from __future__ import annotations

import configparser
import json
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fem, linalg, meshing, solver
from .kernels import PowerLaw

__all__ = [
    "SECONDS_PER_YEAR",
    "GRAVITY",
    "SIGN_PAPER",
    "SIGN_CONVENTIONAL",
    "ExperimentConfig",
    "SurfaceProfile",
    "RunArtifacts",
    "rotated_gravity",
    "default_domain",
    "default_params",
    "default_config",
    "initial_guess",
    "surface_velocity",
    "run_experiment",
    "delta_sweep",
    "regularization_bound",
    "regularization_convergence_study",
    "load_config_file",
    "read_history_csv",
]

SECONDS_PER_YEAR = 31_556_926.0
GRAVITY = 9.81
INITIAL_GUESS_COEFFICIENT = 1e6

SIGN_PAPER = "paper"
SIGN_CONVENTIONAL = "conventional"

ITERATIONS_CSV = "iterations.csv"
SURFACE_CSV = "surface_velocity.csv"
META_JSON = "run_meta.json"
FAILURE_JSON = "failure.json"


def rotated_gravity(alpha: float, magnitude: float = GRAVITY) -> np.ndarray:
    """Gravity vector rotated so the flattened surface stays horizontal.

    The rotation gives the downslope (+x) component ``magnitude*sin(alpha)``
    while preserving the norm.
    """
    return magnitude * np.array([np.sin(alpha), -np.cos(alpha)])


def default_domain(kind: str, nx: int = 16, ny: int = 8, copies: int | None = None) -> meshing.DomainSpec:
    return meshing.DomainSpec(kind=kind, L=5000.0, alpha=float(np.radians(0.5)), copies=copies, nx=nx, ny=ny)


def default_params(
    kind: str,
    delta: float = 1e-12,
    mu0: float = 1e-17,
    tau: float | None = None,
    p: float = 4.0 / 3.0,
    s: float | None = None,
) -> fem.PStokesParams:
    """Benchmark constants: B = 0.5e16^(1/3) Pa a^(1/3), rho = 910 kg/m^3,
    g = 9.81 m/s^2 rotated by 0.5 degrees, p = 4/3, delta = 1e-12/a,
    mu0 = 1e-17 Pa a.  The bulk viscosity halves the squared strain norm
    inside the power; the friction law does not.  The glacier bed is
    clamped, so tau is unused there; the block defaults to tau = 1e3 with
    s = p (1e7 is the high-friction variant)."""
    if kind not in (meshing.ISMIP_B, meshing.BLOCK):
        raise ValueError(f"unknown experiment kind {kind!r}")
    alpha = float(np.radians(0.5))
    if tau is None:
        tau = 0.0 if kind == meshing.ISMIP_B else 1e3
    if s is None:
        s = p
    return fem.PStokesParams(
        power_law_bulk=PowerLaw(p, delta, half_factor=True),
        power_law_slide=PowerLaw(s, delta),
        B=0.5 * (1e-16) ** (-1.0 / 3.0),
        tau=tau,
        mu0=mu0,
        rho=910.0,
        g=rotated_gravity(alpha),
        alpha=alpha,
    )


@dataclass
class ExperimentConfig:
    domain: meshing.DomainSpec
    params: fem.PStokesParams
    solver: solver.SolverConfig
    initial_guess_friction: bool = True
    sign_mode: str = SIGN_PAPER
    output_dir: Path = Path("runs/out")
    make_plots: bool = True
    seed: int = 0

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if self.sign_mode not in (SIGN_PAPER, SIGN_CONVENTIONAL):
            raise ValueError(f"unknown sign mode {self.sign_mode!r}")


def default_config(kind: str, method: str = solver.NEWTON_ARMIJO, out: str | Path = "runs/out") -> ExperimentConfig:
    return ExperimentConfig(
        domain=default_domain(kind),
        params=default_params(kind),
        solver=solver.SolverConfig(method=method),
        initial_guess_friction=kind == meshing.BLOCK,
        output_dir=Path(out),
    )


def initial_guess(space: fem.MixedSpace, params: fem.PStokesParams, friction_term: bool = False) -> fem.MixedState:
    """Linear Stokes start: the power-law factor replaced by 1e6, plus an
    optional linear bed friction term tau (v, phi); the result is
    discretely divergence-free."""
    slide = 1.0 if friction_term else None
    matrix = fem.assemble_frozen_system(space, params, INITIAL_GUESS_COEFFICIENT, slide)
    rhs = fem.assemble_body_load(space, params)
    sol, report = solver.saddle_solve(matrix, rhs, space)
    if not report.success:
        raise linalg.LinearSolveError(f"initial-guess solve failed: {report.message}")
    return fem.MixedState(space, sol)


@dataclass
class SurfaceProfile:
    """Surface speed samples over the central copy, x rebased to [0, L]."""

    x: np.ndarray
    v_r: np.ndarray
    sign_mode: str
    n_invalid: int = 0


def surface_velocity(
    space: fem.MixedSpace, state: fem.MixedState, alpha: float, sign_mode: str = SIGN_PAPER
) -> SurfaceProfile:
    """Rotated surface speed v_r at the free-surface velocity nodes.

    The radicand is (v1 cos(a))^2 -/+ (v2 sin(a))^2 with the minus sign in
    ``paper`` mode; samples whose radicand goes negative are reported as
    NaN and counted, the run continues.
    """
    if sign_mode not in (SIGN_PAPER, SIGN_CONVENTIONAL):
        raise ValueError(f"unknown sign mode {sign_mode!r}")
    nodes = space.air_scalar_nodes
    if nodes.size == 0:
        raise ValueError("mesh has no free-surface (AIR) boundary")
    x = space.node_coords[nodes, 0]
    spec = space.mesh.spec
    if spec is not None:
        lo, hi = spec.copies * spec.L, (spec.copies + 1) * spec.L
    else:
        lo, hi = float(x.min()), float(x.max())
    tol = 1e-9 * max(hi - lo, 1.0)
    keep = (x >= lo - tol) & (x <= hi + tol)
    order = np.argsort(x[keep], kind="stable")
    x_sel = x[keep][order] - lo
    v = state.velocity.reshape(-1, 2)[nodes][keep][order]
    term1 = (v[:, 0] * np.cos(alpha)) ** 2
    term2 = (v[:, 1] * np.sin(alpha)) ** 2
    radicand = term1 - term2 if sign_mode == SIGN_PAPER else term1 + term2
    invalid = radicand < 0.0
    v_r = np.sqrt(np.where(invalid, np.nan, radicand))
    return SurfaceProfile(x=x_sel, v_r=v_r, sign_mode=sign_mode, n_invalid=int(invalid.sum()))


@dataclass
class RunArtifacts:
    output_dir: Path
    result: solver.SolveResult
    profile: SurfaceProfile
    space: fem.MixedSpace = field(repr=False, default=None)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_history_csv(path: Path, history: list[solver.IterationRecord], extra: dict | None = None) -> None:
    fields = solver.IterationRecord.CSV_FIELDS
    head = list(extra or {}) + list(fields)
    lines = [",".join(head)]
    for rec in history:
        row = [_fmt(v) for v in (extra or {}).values()]
        for name in fields:
            val = getattr(rec, name)
            row.append(str(val) if name in ("k", "n_merit_evals") else _fmt(val))
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def read_history_csv(path: Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    names = lines[0].split(",")
    cols = {n: [] for n in names}
    for line in lines[1:]:
        for n, v in zip(names, line.split(",")):
            cols[n].append(float(v))
    return {n: np.asarray(v) for n, v in cols.items()}


def write_surface_csv(path: Path, profile: SurfaceProfile) -> None:
    lines = ["x,v_r"]
    for x, vr in zip(profile.x, profile.v_r):
        lines.append(f"{_fmt(x)},{_fmt(vr)}")
    path.write_text("\n".join(lines) + "\n")


def _config_dict(config: ExperimentConfig, space: fem.MixedSpace) -> dict:
    params = config.params
    return {
        "domain": {
            "kind": config.domain.kind,
            "L": config.domain.L,
            "alpha_deg": float(np.degrees(config.domain.alpha)),
            "copies": config.domain.copies,
            "nx": config.domain.nx,
            "ny": config.domain.ny,
        },
        "params": {
            "p": params.power_law_bulk.r,
            "s": params.power_law_slide.r,
            "delta": params.power_law_bulk.delta,
            "half_factor_bulk": params.power_law_bulk.half_factor,
            "B": params.B,
            "tau": params.tau,
            "mu0": params.mu0,
            "rho": params.rho,
            "g": list(params.g),
        },
        "solver": {k: v for k, v in asdict(config.solver).items()},
        "initial_guess_friction": config.initial_guess_friction,
        "sign_mode": config.sign_mode,
        "seed": config.seed,
        "mesh": {
            "n_vertices": space.mesh.n_vertices,
            "n_triangles": space.mesh.n_triangles,
            "n_vdofs": space.n_vdofs,
            "n_pdofs": space.n_pdofs,
        },
    }


def _write_failure(out: Path, stage: str, exc: Exception) -> None:
    payload = {
        "stage": stage,
        "error": f"{type(exc).__name__}: {exc}",
        "traceback": traceback.format_exc(),
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILURE_JSON).write_text(json.dumps(payload, indent=2) + "\n")
    except OSError:
        pass


def run_experiment(config: ExperimentConfig) -> RunArtifacts:
    """Run one experiment and write its artifacts.

    Writes iterations.csv, surface_velocity.csv, run_meta.json and (by
    default) convergence/surface figures into the output directory.  Any
    stage failure leaves a failure.json marker with diagnostics and
    re-raises.
    """
    out = Path(config.output_dir)
    stage = "setup"
    try:
        out.mkdir(parents=True, exist_ok=True)
        stage = "mesh"
        mesh = meshing.build_mesh(config.domain)
        space = fem.MixedSpace(mesh)
        stage = "initial_guess"
        state0 = initial_guess(space, config.params, config.initial_guess_friction)
        stage = "solve"
        result = solver.solve_with_method(space, config.params, state0, config.solver)
        stage = "surface"
        profile = surface_velocity(space, result.state, config.params.alpha, config.sign_mode)
        stage = "write"
        write_history_csv(out / ITERATIONS_CSV, result.history)
        write_surface_csv(out / SURFACE_CSV, profile)
        meta = _config_dict(config, space)
        meta["status"] = result.status
        meta["message"] = result.message
        meta["n_iterations"] = len(result.history) - 1
        meta["final_ries_rel"] = result.history[-1].ries_rel
        meta["min_ries_rel"] = min(r.ries_rel for r in result.history)
        meta["surface_invalid_samples"] = profile.n_invalid
        meta["timing"] = {"total_wall_time": sum(r.wall_time for r in result.history)}
        (out / META_JSON).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if config.make_plots:
            stage = "plots"
            from . import plotting

            plotting.convergence_figure(out / ITERATIONS_CSV, out / "convergence.png")
            plotting.surface_figure(out / SURFACE_CSV, out / "surface_velocity.png")
    except Exception as exc:
        _write_failure(out, stage, exc)
        raise
    return RunArtifacts(output_dir=out, result=result, profile=profile, space=space)


def delta_sweep(config: ExperimentConfig, deltas: list[float]) -> list[RunArtifacts | None]:
    """Run the configured method once per delta (bulk and sliding laws both
    regularized at that value); failures are isolated per run."""
    if any(d <= 0.0 for d in deltas):
        raise ValueError("deltas must be positive")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: list[RunArtifacts | None] = []
    rows = []
    for d in deltas:
        sub = out / f"delta_{d:g}"
        params = replace(
            config.params,
            power_law_bulk=PowerLaw(config.params.power_law_bulk.r, d, config.params.power_law_bulk.half_factor),
            power_law_slide=PowerLaw(config.params.power_law_slide.r, d, config.params.power_law_slide.half_factor),
        )
        run_cfg = replace(config, params=params, output_dir=sub)
        try:
            art = run_experiment(run_cfg)
        except Exception:
            artifacts.append(None)
            continue
        artifacts.append(art)
        for rec in art.result.history:
            rows.append((d, rec))
    lines = ["delta," + ",".join(solver.IterationRecord.CSV_FIELDS)]
    for d, rec in rows:
        vals = [
            str(getattr(rec, n)) if n in ("k", "n_merit_evals") else _fmt(getattr(rec, n))
            for n in solver.IterationRecord.CSV_FIELDS
        ]
        lines.append(f"{_fmt(d)}," + ",".join(vals))
    (out / "combined_history.csv").write_text("\n".join(lines) + "\n")
    if config.make_plots:
        from . import plotting

        plotting.sweep_figure(out / "combined_history.csv", out / "sweep_convergence.png")
    return artifacts


def regularization_bound(delta: float, mu0: float, area: float, bed_length: float, p: float, s: float) -> float:
    """Combined regularization measure |Omega| delta^p + |Gamma_b| delta^s + mu0."""
    return area * delta**p + bed_length * delta**s + mu0


def regularization_convergence_study(
    config: ExperimentConfig,
    pairs: list[tuple[float, float]],
    reference: tuple[float, float] | None = None,
) -> dict:
    """Distance-to-reference study over a (delta, mu0) ladder.

    Solves the experiment at every pair, plus the reference pair (by
    default the one with the smallest combined bound), and reports the
    squared discrete H1-seminorm distances against the combined bound with
    a fitted log-log slope.  Solver failures are isolated per point.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = meshing.build_mesh(config.domain)
    space = fem.MixedSpace(mesh)
    lap = fem.vector_laplacian_matrix(space)
    area, bed_len = space.domain_area(), space.bed_length_total
    p = config.params.power_law_bulk.r
    s = config.params.power_law_slide.r

    def solve_at(delta: float, mu0: float) -> solver.SolveResult | None:
        params = replace(
            config.params,
            power_law_bulk=PowerLaw(p, delta, config.params.power_law_bulk.half_factor),
            power_law_slide=PowerLaw(s, delta, config.params.power_law_slide.half_factor),
            mu0=mu0,
        )
        try:
            state0 = initial_guess(space, params, config.initial_guess_friction)
            return solver.solve_with_method(space, params, state0, config.solver)
        except (linalg.LinearSolveError, ValueError):
            return None

    if reference is None:
        reference = min(pairs, key=lambda dm: regularization_bound(dm[0], dm[1], area, bed_len, p, s))
    ref_result = solve_at(*reference)
    if ref_result is None:
        raise linalg.LinearSolveError("reference solve failed")
    u_ref = ref_result.state.velocity

    points = []
    for delta, mu0 in pairs:
        bound = regularization_bound(delta, mu0, area, bed_len, p, s)
        if (delta, mu0) == reference:
            points.append({"delta": delta, "mu0": mu0, "bound": bound, "distance2": 0.0, "status": ref_result.status})
            continue
        res = solve_at(delta, mu0)
        if res is None:
            points.append({"delta": delta, "mu0": mu0, "bound": bound, "distance2": float("nan"), "status": "failed"})
            continue
        du = res.state.velocity - u_ref
        points.append(
            {
                "delta": delta,
                "mu0": mu0,
                "bound": bound,
                "distance2": float(du @ (lap @ du)),
                "status": res.status,
            }
        )

    fit_pts = [q for q in points if q["distance2"] > 0.0 and np.isfinite(q["distance2"])]
    slope, c_tilde = float("nan"), float("nan")
    if len(fit_pts) >= 2:
        logs_m = np.log([q["bound"] for q in fit_pts])
        logs_d = np.log([q["distance2"] for q in fit_pts])
        A = np.vstack([logs_m, np.ones_like(logs_m)]).T
        coef, *_ = np.linalg.lstsq(A, logs_d, rcond=None)
        slope = float(coef[0])
        c_tilde = float(max(q["distance2"] / q["bound"] for q in fit_pts))

    report = {
        "reference": {"delta": reference[0], "mu0": reference[1]},
        "area": area,
        "bed_length": bed_len,
        "p": p,
        "s": s,
        "points": points,
        "slope": slope,
        "c_tilde": c_tilde,
    }
    lines = ["delta,mu0,bound,distance2"]
    for q in points:
        lines.append(",".join(_fmt(q[n]) for n in ("delta", "mu0", "bound", "distance2")))
    (out / "regularization_study.csv").write_text("\n".join(lines) + "\n")
    (out / "regularization_study.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if config.make_plots:
        from . import plotting

        plotting.study_figure(out / "regularization_study.csv", out / "regularization_study.png")
    return report


def load_config_file(path: str | Path) -> dict:
    """Flat key-value config with sections [domain], [params], [solver],
    [output]; every key can be overridden by the CLI flag of the same name."""
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    out: dict[str, str] = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            out[key] = value
    return out
