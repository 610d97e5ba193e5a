"""Sparse direct solves with a residual-checked contract.

Desk-scale saddle-point systems are factorized with SuperLU (partial
pivoting); a few steps of iterative refinement push the backward error to
the requested tolerance.  Failures (singular or numerically unusable
factorizations) are reported in the returned record, never raised from
here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["LinearSolveReport", "LinearSolveError", "Factorization", "factorize", "solve"]

DEFAULT_TOL = 1e-10
_MAX_REFINE = 8


class LinearSolveError(RuntimeError):
    """Raised by callers when a required solve did not meet its contract."""


@dataclass
class LinearSolveReport:
    residual_norm: float
    iterations: int
    success: bool
    message: str = ""


class Factorization:
    """Reusable LU factorization with refined solves."""

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = matrix.tocsc()
        self._lu = None
        self._error = ""
        try:
            self._lu = spla.splu(self.matrix)
        except (RuntimeError, ValueError) as exc:
            self._error = str(exc)

    @property
    def ok(self) -> bool:
        return self._lu is not None

    def solve(
        self, rhs: np.ndarray, tol: float = DEFAULT_TOL, refine_rows: np.ndarray | None = None
    ) -> tuple[np.ndarray, LinearSolveReport]:
        """Solve with iterative refinement.

        ``refine_rows`` optionally names rows whose residual is driven far
        below the global rounding floor by extra targeted refinement passes.
        Saddle-point callers use this for the divergence rows: their backward
        error is otherwise limited by the much larger momentum-row scales,
        and it gets amplified by the pressure when directions are paired
        with the merit functional.
        """
        rhs = np.asarray(rhs, dtype=float)
        if not np.all(np.isfinite(rhs)):
            return np.zeros_like(rhs), LinearSolveReport(np.inf, 0, False, "non-finite right-hand side")
        if self._lu is None:
            return np.zeros_like(rhs), LinearSolveReport(np.inf, 0, False, f"factorization failed: {self._error}")
        norm_b = np.linalg.norm(rhs)
        target = tol * max(norm_b, np.finfo(float).tiny)
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            return np.zeros_like(rhs), LinearSolveReport(np.inf, 0, False, "singular matrix (non-finite solution)")
        r = rhs - self.matrix @ x
        refinements = 0
        # Refine down to the rounding floor, not just to the tolerance: the
        # nonlinear solver needs search directions whose discrete divergence
        # is as small as double precision allows.
        floor = np.finfo(float).eps * max(norm_b, np.finfo(float).tiny)
        res = float(np.linalg.norm(r))
        while res > floor and refinements < _MAX_REFINE:
            dx = self._lu.solve(r)
            if not np.all(np.isfinite(dx)):
                break
            x_new = x + dx
            r_new = rhs - self.matrix @ x_new
            res_new = float(np.linalg.norm(r_new))
            if res_new >= 0.5 * res:
                if res_new < res:
                    x, r, res = x_new, r_new, res_new
                    refinements += 1
                break
            x, r, res = x_new, r_new, res_new
            refinements += 1
        if refine_rows is not None:
            for _ in range(2):
                rr = np.zeros_like(r)
                rr[refine_rows] = r[refine_rows]
                if not np.linalg.norm(rr) > 0.0:
                    break
                dx = self._lu.solve(rr)
                if not np.all(np.isfinite(dx)):
                    break
                x = x + dx
                r = rhs - self.matrix @ x
            res = float(np.linalg.norm(r))
        ok = res <= target
        report = LinearSolveReport(res, refinements, ok, "" if ok else "residual above tolerance")
        if __debug__ and ok:
            assert report.residual_norm <= target
        return x, report


def factorize(matrix: sp.spmatrix) -> Factorization:
    return Factorization(matrix)


def solve(matrix: sp.spmatrix, rhs: np.ndarray, tol: float = DEFAULT_TOL) -> tuple[np.ndarray, LinearSolveReport]:
    """Direct solve of ``matrix x = rhs`` with ||Ax - b|| <= tol ||b||."""
    return Factorization(matrix).solve(rhs, tol=tol)
