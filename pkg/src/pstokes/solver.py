"""Outer nonlinear iterations with merit-controlled step sizes.

Four methods are provided: a plain Picard (lagged-viscosity) iteration,
Picard with approximately exact steps, and Newton's method with either
Armijo backtracking or approximately exact steps.  All of them log one
record per iteration and stop on the relative residual norm measured
through the Riesz representative of the residual functional.

Step-size searches operate on two scalar callables,

    delta_merit(t) = J(v + t w) - J(v)
    derivative(t)  = <G(v + t w), w>,

and account every evaluation against the configured budgets; the budgets
mirror the integral-evaluation caps used when timing the methods.  Working
with merit differences instead of absolute merit values keeps the searches
functional when the per-step decrease is many orders of magnitude below
|J|; the recorded merit history is accumulated from the accepted
decreases, so it is strictly decreasing whenever the searches succeed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fem, linalg

__all__ = [
    "PICARD",
    "PICARD_EXACT",
    "NEWTON_ARMIJO",
    "NEWTON_EXACT",
    "SolverConfig",
    "IterationRecord",
    "SolveResult",
    "LineSearchError",
    "saddle_solve",
    "RieszSolver",
    "riesz_norm",
    "armijo_search",
    "exact_search",
    "armijo_backtracking",
    "exact_bisection",
    "newton_solve",
    "picard_solve",
    "solve_with_method",
]

PICARD = "picard"
PICARD_EXACT = "picard-exact"
NEWTON_ARMIJO = "newton-armijo"
NEWTON_EXACT = "newton-exact"
METHODS = (PICARD, PICARD_EXACT, NEWTON_ARMIJO, NEWTON_EXACT)


class LineSearchError(RuntimeError):
    """Step-size search failed; carries the search diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def saddle_solve(matrix, rhs, space: fem.MixedSpace, tol: float = linalg.DEFAULT_TOL):
    """Direct solve of a mixed system with the divergence rows refined, so
    the returned velocity is discretely divergence-free well below the
    global backward-error floor."""
    return linalg.factorize(matrix).solve(rhs, tol=tol, refine_rows=space.divergence_rows)


@dataclass
class SolverConfig:
    """Knobs of the outer iteration.

    gamma is the Armijo sufficient-decrease parameter; min_step, when
    positive, accepts that step without the decrease guarantee once
    backtracking falls below it.  The evaluation caps bound merit
    (Armijo) respectively merit+derivative (exact search) evaluations per
    outer iteration.
    """

    method: str = NEWTON_ARMIJO
    gamma: float = 1e-4
    min_step: float = 0.0
    max_outer: int = 100
    tol_rel_ries: float = 1e-13
    tol_abs_ries: float = 0.0
    max_armijo_evals: int = 20
    max_bisect_evals: int = 25
    bracket_b0: float = 2.0
    linear_tol: float = linalg.DEFAULT_TOL

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.max_outer < 1 or self.max_armijo_evals < 1 or self.max_bisect_evals < 1:
            raise ValueError("iteration and evaluation caps must be >= 1")
        if self.tol_rel_ries <= 0.0:
            raise ValueError("tol_rel_ries must be positive")
        if self.bracket_b0 <= 0.0:
            raise ValueError("bracket_b0 must be positive")


@dataclass
class IterationRecord:
    k: int
    J: float
    ries: float
    ries_rel: float
    alpha: float
    n_merit_evals: int
    wall_time: float
    search_time: float = 0.0
    forced_min_step: bool = False
    capped_search: bool = False
    newton_identity_rel_err: float = float("nan")
    # certified merit decrease of the accepted step; J accumulates these but
    # saturates at double resolution long before the certificates do
    merit_decrease: float = float("nan")

    CSV_FIELDS = ("k", "J", "ries", "ries_rel", "alpha", "n_merit_evals", "wall_time")


@dataclass
class SolveResult:
    state: fem.MixedState
    history: list[IterationRecord] = field(default_factory=list)
    status: str = "converged"
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def iterations_to(self, ries_rel: float) -> int | None:
        """First iteration index reaching the given relative residual."""
        for rec in self.history:
            if rec.ries_rel <= ries_rel:
                return rec.k
        return None


# -- residual norm through the Riesz representative ---------------------------


class RieszSolver:
    """Maps a residual vector to its representative and norm.

    The representative solves int grad(vt):grad(phi) = <G(v), phi> over the
    constrained, discretely divergence-free space; the reported norm adds
    the bed L2 term on top of the gradient energy.  The system matrix does
    not depend on the state, so it is factorized once.
    """

    def __init__(self, space: fem.MixedSpace, linear_tol: float = linalg.DEFAULT_TOL):
        self.space = space
        self.linear_tol = linear_tol
        self.laplacian = fem.vector_laplacian_matrix(space)
        self.bed_mass = fem.bed_mass_matrix(space)
        A = fem._scatter_blocks(space, fem.laplacian_blocks(space), fem._divergence_blocks(space))
        self.matrix = fem.apply_constraints(space, matrix=A)
        self.factorization = linalg.factorize(self.matrix)
        if not self.factorization.ok:
            raise linalg.LinearSolveError("Riesz system factorization failed")

    def representative(self, residual: np.ndarray) -> np.ndarray:
        rhs = np.zeros(self.space.n_dofs)
        rhs[: self.space.n_vdofs] = residual[: self.space.n_vdofs]
        rhs[self.space.is_constrained] = 0.0
        sol, report = self.factorization.solve(rhs, tol=self.linear_tol, refine_rows=self.space.divergence_rows)
        if not report.success:
            raise linalg.LinearSolveError(f"Riesz solve failed: {report.message}")
        return sol[: self.space.n_vdofs]

    def norm_of_residual(self, residual: np.ndarray) -> float:
        vt = self.representative(residual)
        sq = float(vt @ (self.laplacian @ vt))
        if self.space.n_bed_edges:
            sq += float(vt @ (self.bed_mass @ vt))
        return float(np.sqrt(max(sq, 0.0)))


def riesz_norm(space: fem.MixedSpace, params: fem.PStokesParams, state: fem.MixedState) -> float:
    """Residual norm of the state through the Riesz representative."""
    residual = fem.assemble_residual(space, params, state)
    return RieszSolver(space).norm_of_residual(residual)


# -- scalar step-size searches ------------------------------------------------


def armijo_backtracking(delta_merit, slope: float, config: SolverConfig):
    """Largest step in {1, 1/2, 1/4, ...} with sufficient decrease.

    ``delta_merit(t)`` returns J(v + t w) - J(v); ``slope`` is the
    directional derivative at 0 and must be negative.  Returns
    (alpha, decrease, n_evals, forced_min_step, capped).  Falling below
    ``min_step`` accepts min_step without the decrease guarantee; hitting
    the evaluation cap returns the best decreasing step found or raises.
    """
    if slope >= 0.0:
        raise LineSearchError("not a descent direction", {"slope": slope})
    alpha = 1.0
    evals = 0
    best = None
    while evals < config.max_armijo_evals:
        dj = delta_merit(alpha)
        evals += 1
        if dj <= alpha * config.gamma * slope:
            return alpha, dj, evals, False, False
        if best is None or dj < best[1]:
            best = (alpha, dj)
        next_alpha = 0.5 * alpha
        if config.min_step > 0.0 and next_alpha < config.min_step:
            # Accept the minimum step without the decrease guarantee.
            if alpha != config.min_step and evals < config.max_armijo_evals:
                dj = delta_merit(config.min_step)
                evals += 1
            return config.min_step, dj, evals, True, False
        alpha = next_alpha
    if best is not None and best[1] < 0.0:
        return best[0], best[1], evals, False, True
    raise LineSearchError(
        "no decrease within the merit-evaluation budget",
        {"evals": evals, "best": best, "slope": slope},
    )


def exact_bisection(delta_merit, derivative, slope: float, config: SolverConfig):
    """Approximate one-dimensional minimizer by bisection on the derivative.

    Doubles b from bracket_b0 until derivative(b) >= 0, then bisects on the
    sign of the derivative; the final midpoint is verified to decrease the
    merit (one merit evaluation, counted in the same budget).  Returns
    (alpha, decrease, n_evals, capped).
    """
    if slope >= 0.0:
        raise LineSearchError("not a descent direction", {"slope": slope})
    cap = config.max_bisect_evals
    evals = 0
    a, b = 0.0, config.bracket_b0
    bracketed = False
    while evals < cap - 1:
        d = derivative(b)
        evals += 1
        if d >= 0.0:
            bracketed = True
            break
        a, b = b, 2.0 * b
    while evals < cap - 1:
        m = 0.5 * (a + b)
        if derivative(m) >= 0.0:
            b = m
        else:
            a = m
        evals += 1
    alpha = 0.5 * (a + b) if bracketed else a
    if alpha <= 0.0:
        raise LineSearchError("bisection collapsed to zero step", {"evals": evals})
    dj = delta_merit(alpha)
    evals += 1
    if dj < 0.0:
        return alpha, dj, evals, not bracketed
    # The derivative is negative at the left bracket end, so in exact
    # arithmetic the merit decreases on [0, a]; verify when budget remains.
    if a > 0.0 and evals < cap:
        dj_a = delta_merit(a)
        evals += 1
        if dj_a < 0.0:
            return a, dj_a, evals, True
    raise LineSearchError(
        "no decrease within the evaluation budget",
        {"evals": evals, "alpha": alpha, "decrease": dj},
    )


def _search_callables(space, params, state, direction):
    """Stabilized merit difference and derivative along a direction.

    Both are shifted by the hydrostatic reference-pressure pairing with the
    direction's divergence; the shift vanishes on exactly divergence-free
    directions and removes the rounding-amplification channel otherwise.
    """
    direction = np.asarray(direction, dtype=float)
    raw_delta = fem.merit_decrease_function(space, params, state, direction)
    shift = fem.reference_pressure_pairing(space, params, direction)

    def delta_merit(t: float) -> float:
        return raw_delta(t) - t * shift

    def derivative(t: float) -> float:
        trial = fem.MixedState(space, state.coefficients + t * direction)
        return fem.functional_directional_derivative(space, params, trial, direction) - shift

    return delta_merit, derivative


def armijo_search(space, params, state, direction, config: SolverConfig) -> float:
    """Armijo step for a state/direction pair (convenience wrapper)."""
    delta_merit, derivative = _search_callables(space, params, state, direction)
    alpha, _, _, _, _ = armijo_backtracking(delta_merit, derivative(0.0), config)
    return alpha


def exact_search(space, params, state, direction, config: SolverConfig) -> float:
    """Approximately exact step for a state/direction pair."""
    delta_merit, derivative = _search_callables(space, params, state, direction)
    alpha, _, _, _ = exact_bisection(delta_merit, derivative, derivative(0.0), config)
    return alpha


# -- outer iterations ----------------------------------------------------------


def _stop(ries: float, ries0: float, config: SolverConfig) -> bool:
    if ries <= config.tol_abs_ries:
        return True
    return ries0 > 0.0 and ries / ries0 <= config.tol_rel_ries


def newton_solve(
    space: fem.MixedSpace,
    params: fem.PStokesParams,
    state0: fem.MixedState,
    config: SolverConfig,
) -> SolveResult:
    """Globalized Newton iteration (Armijo or approximately exact steps)."""
    if config.method not in (NEWTON_ARMIJO, NEWTON_EXACT):
        raise ValueError(f"newton_solve cannot run method {config.method!r}")
    if params.mu0 <= 0.0 or params.power_law_bulk.delta <= 0.0:
        raise ValueError("Newton iteration requires mu0 > 0 and delta > 0")

    state = state0.copy()
    rz = RieszSolver(space, config.linear_tol)
    t0 = time.perf_counter()
    residual = fem.assemble_residual(space, params, state)
    ries0 = rz.norm_of_residual(residual)
    j_cur = fem.evaluate_functional(space, params, state)
    history = [IterationRecord(0, j_cur, ries0, 1.0, 0.0, 0, time.perf_counter() - t0)]
    if _stop(ries0, ries0, config):
        return SolveResult(state, history, "converged", "initial state within tolerance")

    status, message = "max_iterations", ""
    for k in range(1, config.max_outer + 1):
        t_iter = time.perf_counter()
        jac = fem.assemble_jacobian(space, params, state)
        direction, report = saddle_solve(jac, -residual, space, tol=config.linear_tol)
        if not report.success:
            status, message = "linear_solve_failure", report.message
            break

        delta_merit, derivative = _search_callables(space, params, state, direction)
        slope = derivative(0.0)
        if slope >= 0.0:
            status, message = "stalled", f"non-descent direction (slope {slope:.3e})"
            break

        kw = jac[: space.n_vdofs, : space.n_vdofs] @ direction[: space.n_vdofs]
        wkw = float(direction[: space.n_vdofs] @ kw)
        identity_err = abs(wkw + slope) / max(abs(slope), np.finfo(float).tiny)
        t_search = time.perf_counter()
        try:
            if config.method == NEWTON_ARMIJO:
                alpha, decrease, n_evals, forced, capped = armijo_backtracking(delta_merit, slope, config)
            else:
                alpha, decrease, n_evals, capped = exact_bisection(delta_merit, derivative, slope, config)
                forced = False
        except LineSearchError as exc:
            status, message = "stalled", str(exc)
            break
        search_time = time.perf_counter() - t_search

        state = fem.MixedState(space, state.coefficients + alpha * direction)
        residual = fem.assemble_residual(space, params, state)
        j_cur += decrease
        ries = rz.norm_of_residual(residual)
        history.append(
            IterationRecord(
                k,
                j_cur,
                ries,
                ries / ries0 if ries0 > 0.0 else 0.0,
                alpha,
                n_evals,
                time.perf_counter() - t_iter,
                search_time=search_time,
                forced_min_step=forced,
                capped_search=capped,
                newton_identity_rel_err=identity_err,
                merit_decrease=decrease,
            )
        )
        if _stop(ries, ries0, config):
            status, message = "converged", ""
            break

    return SolveResult(state, history, status, message)


def picard_solve(
    space: fem.MixedSpace,
    params: fem.PStokesParams,
    state0: fem.MixedState,
    config: SolverConfig,
) -> SolveResult:
    """Lagged-viscosity fixed-point iteration, optionally with exact steps."""
    if config.method not in (PICARD, PICARD_EXACT):
        raise ValueError(f"picard_solve cannot run method {config.method!r}")
    if params.power_law_bulk.delta <= 0.0:
        raise ValueError("Picard iteration requires delta > 0")

    state = state0.copy()
    rz = RieszSolver(space, config.linear_tol)
    load = fem.assemble_body_load(space, params)
    t0 = time.perf_counter()
    residual = fem.assemble_residual(space, params, state)
    ries0 = rz.norm_of_residual(residual)
    j_cur = fem.evaluate_functional(space, params, state)
    history = [IterationRecord(0, j_cur, ries0, 1.0, 0.0, 0, time.perf_counter() - t0)]
    if _stop(ries0, ries0, config):
        return SolveResult(state, history, "converged", "initial state within tolerance")

    status, message = "max_iterations", ""
    for k in range(1, config.max_outer + 1):
        t_iter = time.perf_counter()
        matrix = fem.assemble_picard_matrix(space, params, state)
        solution, report = saddle_solve(matrix, load, space, tol=config.linear_tol)
        if not report.success:
            status, message = "linear_solve_failure", report.message
            break

        search_time = 0.0
        forced = capped = False
        decrease = float("nan")
        if config.method == PICARD:
            alpha, n_evals = 1.0, 0
            new_state = fem.MixedState(space, solution)
            j_new = fem.evaluate_functional(space, params, new_state)
        else:
            direction = solution - state.coefficients
            delta_merit, derivative = _search_callables(space, params, state, direction)
            slope = derivative(0.0)
            if slope >= 0.0:
                status, message = "stalled", f"non-descent Picard step (slope {slope:.3e})"
                break
            t_search = time.perf_counter()
            try:
                alpha, decrease, n_evals, capped = exact_bisection(delta_merit, derivative, slope, config)
            except LineSearchError as exc:
                status, message = "stalled", str(exc)
                break
            search_time = time.perf_counter() - t_search
            new_state = fem.MixedState(space, state.coefficients + alpha * direction)
            j_new = j_cur + decrease

        state = new_state
        residual = fem.assemble_residual(space, params, state)
        j_cur = j_new
        ries = rz.norm_of_residual(residual)
        history.append(
            IterationRecord(
                k,
                j_cur,
                ries,
                ries / ries0 if ries0 > 0.0 else 0.0,
                alpha,
                n_evals,
                time.perf_counter() - t_iter,
                search_time=search_time,
                forced_min_step=forced,
                capped_search=capped,
                merit_decrease=decrease,
            )
        )
        if _stop(ries, ries0, config):
            status, message = "converged", ""
            break

    return SolveResult(state, history, status, message)


def solve_with_method(space, params, state0, config: SolverConfig) -> SolveResult:
    """Dispatch on the configured method."""
    if config.method in (PICARD, PICARD_EXACT):
        return picard_solve(space, params, state0, config)
    return newton_solve(space, params, state0, config)
