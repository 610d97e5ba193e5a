"""2D mixed finite-element solver for regularized p-Stokes flow with sliding."""

__version__ = "0.1.0"

from .kernels import PowerLaw, j_density, s_apply, s_derivative
from .meshing import DomainSpec, Mesh, boundary_normal, build_mesh, ismip_profiles
from .fem import MixedSpace, MixedState, PStokesParams
from .solver import IterationRecord, SolverConfig, SolveResult, newton_solve, picard_solve

__all__ = [
    "PowerLaw",
    "s_apply",
    "s_derivative",
    "j_density",
    "Mesh",
    "DomainSpec",
    "build_mesh",
    "ismip_profiles",
    "boundary_normal",
    "MixedSpace",
    "MixedState",
    "PStokesParams",
    "SolverConfig",
    "SolveResult",
    "IterationRecord",
    "newton_solve",
    "picard_solve",
]
