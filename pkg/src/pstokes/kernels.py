"""Pointwise power-law constitutive functions and merit-functional densities.

Everything here acts on a single small array: a 2x2 strain-rate-like matrix
(Frobenius norm) or a 2-vector (Euclidean norm).  The same formulas are
re-used in vectorized form by the assembly routines; these scalar versions
are the tested reference.

The constitutive map for exponent ``r`` and regularization ``delta`` is

    S(P) = (c|P|^2 + delta^2)^((r-2)/2) P,    c in {1, 0.5},

where ``c = 0.5`` when the squared norm is halved inside the power
(``half_factor``).  The matching scalar density whose gradient is exactly
``scale * S(P)`` is

    j(P) = (scale / (r c)) (c|P|^2 + delta^2)^(r/2).

Note the ``1/c``: without it the chain rule produces an extra factor ``c``
and the density would no longer be the anti-derivative of ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PowerLaw", "s_apply", "s_derivative", "j_density"]


@dataclass(frozen=True)
class PowerLaw:
    """Power-law exponent, regularization and norm convention.

    r: exponent in (1, 2].
    delta: regularization >= 0 (1/a for strain rates, m/a for sliding).
    half_factor: if True the squared norm is multiplied by 0.5 before
        adding delta^2.
    """

    r: float
    delta: float
    half_factor: bool = False

    def __post_init__(self):
        if not (1.0 < self.r <= 2.0):
            raise ValueError(f"power-law exponent must be in (1, 2], got {self.r}")
        if self.delta < 0.0:
            raise ValueError(f"power-law delta must be >= 0, got {self.delta}")

    @property
    def norm_scale(self) -> float:
        return 0.5 if self.half_factor else 1.0


def _check_finite(P: np.ndarray, name: str) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if not np.all(np.isfinite(P)):
        raise ValueError(f"{name} contains non-finite entries")
    return P


def s_apply(law: PowerLaw, P: np.ndarray) -> np.ndarray:
    """Evaluate S(P) = (c|P|^2 + delta^2)^((r-2)/2) P.

    P is a 2x2 matrix (Frobenius norm) or a 2-vector (Euclidean norm).
    At the singular point delta = 0, P = 0 the limit value 0 is returned.
    """
    P = _check_finite(P, "P")
    c = law.norm_scale
    q = c * float(np.sum(P * P)) + law.delta**2
    if q == 0.0:
        # delta = 0 and P = 0: |S(P)| <= |P|^(r-1) forces the limit 0.
        return np.zeros_like(P)
    return q ** ((law.r - 2.0) / 2.0) * P


def s_derivative(law: PowerLaw, P: np.ndarray) -> np.ndarray:
    """Derivative of ``s_apply`` at P, as a tensor acting on perturbations.

    For a 2x2 matrix argument the result T has shape (2, 2, 2, 2) and acts by
    ``np.einsum('ijkl,kl->ij', T, Q)``; for a 2-vector it is the 2x2 Jacobian
    matrix.  The action is

        Q -> (r-2) (c|P|^2 + delta^2)^((r-4)/2) c (P:Q) P
             + (c|P|^2 + delta^2)^((r-2)/2) Q.

    Raises when delta = 0 and P = 0 (no finite limit for r < 2).
    """
    P = _check_finite(P, "P")
    c = law.norm_scale
    q = c * float(np.sum(P * P)) + law.delta**2
    if q == 0.0:
        raise ValueError("s_derivative is singular at P = 0 with delta = 0")
    rank_one = (law.r - 2.0) * q ** ((law.r - 4.0) / 2.0) * c
    iso = q ** ((law.r - 2.0) / 2.0)
    if P.ndim == 1:
        return rank_one * np.outer(P, P) + iso * np.eye(P.shape[0])
    outer = np.einsum("ij,kl->ijkl", P, P)
    n = P.shape[0]
    ident = np.einsum("ik,jl->ijkl", np.eye(n), np.eye(n))
    return rank_one * outer + iso * ident


def j_density(law: PowerLaw, scale: float, P: np.ndarray) -> float:
    """Scalar density (scale/(r c)) (c|P|^2 + delta^2)^(r/2).

    Its gradient with respect to P is ``scale * s_apply(law, P)``; carrying
    B or tau in ``scale`` makes it the integrand of the merit functional.
    """
    P = _check_finite(P, "P")
    if scale < 0.0:
        raise ValueError(f"density scale must be >= 0, got {scale}")
    c = law.norm_scale
    q = c * float(np.sum(P * P)) + law.delta**2
    return scale / (law.r * c) * q ** (law.r / 2.0)
