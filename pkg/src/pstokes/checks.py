"""Fast self-checks of the core invariants, run by ``pstokes check``.

Each check returns (name, ok, detail).  The suite covers the pointwise
constitutive laws, mesh construction, derivative consistency of the
assembly, operator coercivity and monotonicity, the step-size searches on
a linear problem, and the linear-solve contract.  It is a smoke-level
subset of the full test suite, sized to run in seconds.
"""

from __future__ import annotations

import numpy as np

from . import fem, linalg, meshing, solver
from .kernels import PowerLaw, j_density, s_apply, s_derivative

__all__ = ["run_all_checks"]


def _small_block(nx=3, ny=2):
    spec = meshing.DomainSpec(meshing.BLOCK, L=2000.0, nx=nx, ny=ny)
    mesh = meshing.build_mesh(spec)
    space = fem.MixedSpace(mesh)
    params = fem.PStokesParams(
        power_law_bulk=PowerLaw(4.0 / 3.0, 0.5, half_factor=True),
        power_law_slide=PowerLaw(1.5, 0.3),
        B=2.0,
        tau=1.5,
        mu0=0.7,
        rho=1.0,
        g=np.array([0.3, -0.9]),
    )
    return space, params


def check_kernel_values():
    law = PowerLaw(4.0 / 3.0, 1.0)
    got = s_apply(law, np.eye(2))
    want = 3.0 ** (-1.0 / 3.0)
    ok = np.allclose(got, want * np.eye(2), rtol=1e-14)
    ok &= np.allclose(s_apply(PowerLaw(2.0, 0.5), np.array([1.0, -2.0])), [1.0, -2.0])
    ok &= j_density(law, 1.0, np.zeros((2, 2))) == 0.75
    return ok, f"s_apply(I) coefficient {got[0, 0]:.6f}, expected {want:.6f}"


def check_kernel_monotonicity(n=200):
    rng = np.random.default_rng(7)
    worst = np.inf
    for delta in (1e-3, 1.0):
        law = PowerLaw(4.0 / 3.0, delta)
        for _ in range(n):
            P, Q = rng.uniform(-10, 10, (2, 2, 2))
            lhs = float(np.sum((s_apply(law, P) - s_apply(law, Q)) * (P - Q)))
            base = (delta + np.linalg.norm(P) + np.linalg.norm(Q)) ** (law.r - 2.0)
            rhs = (law.r - 1.0) * base * float(np.sum((P - Q) ** 2))
            if np.sum((P - Q) ** 2) > 0:
                worst = min(worst, lhs - rhs)
    return worst >= -1e-12, f"min (monotonicity - bound) = {worst:.3e}"


def check_kernel_derivative():
    rng = np.random.default_rng(11)
    law = PowerLaw(4.0 / 3.0, 0.7)
    P, Q = rng.standard_normal((2, 2, 2))
    T = s_derivative(law, P)
    eps = 1e-6
    fd = (s_apply(law, P + eps * Q) - s_apply(law, P - eps * Q)) / (2 * eps)
    an = np.einsum("ijkl,kl->ij", T, Q)
    err = np.abs(fd - an).max() / np.abs(an).max()
    return err < 1e-8, f"finite-difference mismatch {err:.2e}"


def check_mesh_counts():
    spec = meshing.DomainSpec(meshing.ISMIP_B, nx=4, ny=3)
    mesh = meshing.build_mesh(spec)
    nv_want = (4 * 7 + 1) * 4
    nt_want = 2 * 4 * 7 * 3
    ok = mesh.n_vertices == nv_want and mesh.n_triangles == nt_want
    ok &= bool(np.all(mesh.triangle_areas() > 0))
    ok &= float(mesh.vertices[:, 0].max()) == 35000.0
    return ok, f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles, extent {mesh.vertices[:, 0].max():g} m"


def check_residual_consistency():
    space, params = _small_block()
    rng = np.random.default_rng(5)
    state = fem.random_state(space, rng, 300.0)
    w = fem.random_state(space, rng, 300.0).coefficients
    w[space.n_vdofs :] = 0.0
    eps = 1e-6
    jp = fem.evaluate_functional(space, params, fem.MixedState(space, state.coefficients + eps * w))
    jm = fem.evaluate_functional(space, params, fem.MixedState(space, state.coefficients - eps * w))
    fd = (jp - jm) / (2 * eps)
    gw = fem.functional_directional_derivative(space, params, state, w)
    err = abs(fd - gw) / max(abs(gw), 1e-300)
    return err < 1e-6, f"dJ mismatch {err:.2e}"


def check_jacobian_consistency():
    space, params = _small_block()
    rng = np.random.default_rng(6)
    state = fem.random_state(space, rng, 300.0)
    d = fem.random_state(space, rng, 300.0).coefficients
    jac = fem.assemble_jacobian(space, params, state)
    eps = 1e-5
    fp = fem.assemble_residual(space, params, fem.MixedState(space, state.coefficients + eps * d))
    fm = fem.assemble_residual(space, params, fem.MixedState(space, state.coefficients - eps * d))
    fd = (fp - fm) / (2 * eps)
    mv = jac @ d
    free = ~space.is_constrained
    err = np.linalg.norm(fd[free] - mv[free]) / np.linalg.norm(mv[free])
    return err < 1e-5, f"matvec mismatch {err:.2e}"


def check_coercivity(n=20):
    space, params = _small_block()
    from dataclasses import replace

    params = replace(params, mu0=1.0)
    rng = np.random.default_rng(8)
    state = fem.random_state(space, rng, 100.0)
    K = fem.assemble_jacobian(space, params, state)[: space.n_vdofs, : space.n_vdofs]
    lap = fem.vector_laplacian_matrix(space)
    worst = np.inf
    for _ in range(n):
        w = fem.random_state(space, rng, 1.0).velocity
        wkw = float(w @ (K @ w))
        grad = float(w @ (lap @ w))
        worst = min(worst, (wkw - params.mu0 * grad) / max(grad, 1e-300))
    return worst >= -1e-10, f"min (w'Kw - mu0|grad w|^2)/|grad w|^2 = {worst:.3e}"


def check_newton_linear():
    space, params = _small_block()
    from dataclasses import replace

    params = replace(
        params,
        power_law_bulk=PowerLaw(2.0, 0.5),
        power_law_slide=PowerLaw(2.0, 0.5),
        mu0=1e-10,
    )
    cfg = solver.SolverConfig(method=solver.NEWTON_ARMIJO, tol_rel_ries=1e-10)
    res = solver.newton_solve(space, params, space.zero_state(), cfg)
    ok = res.converged and len(res.history) == 2 and res.history[1].alpha == 1.0
    return ok, f"{len(res.history) - 1} iterations, alpha {res.history[-1].alpha}, status {res.status}"


def check_linear_solve():
    rng = np.random.default_rng(9)
    import scipy.sparse as sp

    M = rng.standard_normal((50, 50))
    A = sp.csr_matrix(M @ M.T + 50 * np.eye(50))
    b = rng.standard_normal(50)
    x, rep = linalg.solve(A, b)
    ok = rep.success and rep.residual_norm <= 1e-10 * np.linalg.norm(b)
    return ok, f"relative residual {rep.residual_norm / np.linalg.norm(b):.2e}"


ALL_CHECKS = [
    ("kernel values", check_kernel_values),
    ("kernel monotonicity", check_kernel_monotonicity),
    ("kernel derivative", check_kernel_derivative),
    ("mesh counts", check_mesh_counts),
    ("residual vs functional", check_residual_consistency),
    ("jacobian vs residual", check_jacobian_consistency),
    ("operator coercivity", check_coercivity),
    ("newton on linear problem", check_newton_linear),
    ("linear solve contract", check_linear_solve),
]


def run_all_checks() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in ALL_CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
