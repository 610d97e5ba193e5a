"""Taylor-Hood P2-P1 mixed spaces and integral assembly.

The discrete unknown is a single coefficient vector laid out as

    [ velocity dofs | pressure dofs | mean-pressure multiplier ]

with velocity dof ``2 * node + component`` over P2 nodes (vertices first,
then edge midpoints) and one pressure dof per vertex.  The trailing
multiplier enforces a zero-mean pressure; it is only coupled when the
boundary has no traction-free part (otherwise the pressure level is already
determined by the free surface and the multiplier dof is pinned to zero).

Sign conventions.  The nonlinear residual F(state) has velocity block

    F_phi = int B S_p(Dv) : grad(phi) + int_bed tau S_s(v) . phi
            + mu0 (grad v, grad phi) - (f, phi) - (pi, div phi)

pressure block ``-(div v, psi) [+ lambda (1, psi)]`` and multiplier row
``(1, pi)``.  The merit functional uses the exact anti-derivatives of these
terms, so its directional derivative along any discretely divergence-free
direction equals the velocity residual paired with that direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import quadrature as quad
from .kernels import PowerLaw
from .meshing import AIR, BED, DIRICHLET, Mesh

__all__ = [
    "PStokesParams",
    "MixedSpace",
    "MixedState",
    "assemble_residual",
    "assemble_velocity_residual",
    "assemble_jacobian",
    "assemble_picard_matrix",
    "assemble_frozen_system",
    "assemble_body_load",
    "evaluate_functional",
    "functional_directional_derivative",
    "merit_decrease_function",
    "reference_pressure_pairing",
    "apply_constraints",
    "laplacian_blocks",
    "vector_laplacian_matrix",
    "bed_mass_matrix",
    "random_state",
]


@dataclass
class PStokesParams:
    """Physical and regularization constants in (m, a, Pa) units.

    B is the ice rate factor in Pa a^(p-1), tau the friction coefficient in
    Pa a^(s-1) m^(1-s), mu0 the linear diffusion in Pa a, g the (possibly
    rotated) gravitational acceleration in m/s^2 so that rho*g is a force
    density in Pa/m.  ``body_force`` optionally replaces rho*g with a
    spatially varying field (used for manufactured solutions).
    """

    power_law_bulk: PowerLaw
    power_law_slide: PowerLaw
    B: float
    tau: float
    mu0: float
    rho: float
    g: np.ndarray
    alpha: float = 0.0
    body_force: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        if self.B <= 0.0:
            raise ValueError("rate factor B must be positive")
        if self.tau < 0.0:
            raise ValueError("friction coefficient tau must be >= 0")
        if self.mu0 < 0.0:
            raise ValueError("diffusion mu0 must be >= 0")
        if self.mu0 > 0.0 and self.power_law_bulk.delta <= 0.0:
            raise ValueError("delta must be positive when mu0 > 0")

    def force_at(self, points: np.ndarray) -> np.ndarray:
        """Body force density (Pa/m) at an array of points (..., 2)."""
        if self.body_force is not None:
            f = self.body_force(points[..., 0], points[..., 1])
            return np.stack([np.asarray(f[0]), np.asarray(f[1])], axis=-1)
        out = np.empty(points.shape)
        out[...] = self.rho * self.g
        return out


def _p2_values(pts: np.ndarray) -> np.ndarray:
    xi, eta = pts[:, 0], pts[:, 1]
    lam = np.stack([1.0 - xi - eta, xi, eta], axis=1)
    vals = np.empty((pts.shape[0], 6))
    for k in range(3):
        vals[:, k] = lam[:, k] * (2.0 * lam[:, k] - 1.0)
    vals[:, 3] = 4.0 * lam[:, 0] * lam[:, 1]
    vals[:, 4] = 4.0 * lam[:, 1] * lam[:, 2]
    vals[:, 5] = 4.0 * lam[:, 2] * lam[:, 0]
    return vals


def _p2_ref_grads(pts: np.ndarray) -> np.ndarray:
    xi, eta = pts[:, 0], pts[:, 1]
    lam = np.stack([1.0 - xi - eta, xi, eta], axis=1)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = np.empty((pts.shape[0], 6, 2))
    for k in range(3):
        grads[:, k, :] = (4.0 * lam[:, k] - 1.0)[:, None] * dlam[k]
    pairs = [(0, 1), (1, 2), (2, 0)]
    for m, (a, b) in enumerate(pairs):
        grads[:, 3 + m, :] = 4.0 * (lam[:, a, None] * dlam[b] + lam[:, b, None] * dlam[a])
    return grads


def _p1_values(pts: np.ndarray) -> np.ndarray:
    xi, eta = pts[:, 0], pts[:, 1]
    return np.stack([1.0 - xi - eta, xi, eta], axis=1)


def _edge_trace(ts: np.ndarray) -> np.ndarray:
    # Quadratic trace basis on an edge: endpoints at t=0,1, midpoint node.
    return np.stack([(1.0 - ts) * (1.0 - 2.0 * ts), ts * (2.0 * ts - 1.0), 4.0 * ts * (1.0 - ts)], axis=1)


class MixedSpace:
    """Degree-of-freedom maps and precomputed quadrature tables over a mesh."""

    def __init__(self, mesh: Mesh, zero_mean_pressure: bool | None = None):
        self.mesh = mesh
        nv = mesh.n_vertices
        tris = mesh.triangles

        edge_ids: dict[tuple[int, int], int] = {}
        tri_edges = np.empty((mesh.n_triangles, 3), dtype=np.int64)
        for e, (a, b, c) in enumerate(tris):
            for m, pair in enumerate(((a, b), (b, c), (c, a))):
                key = (min(pair), max(pair))
                tri_edges[e, m] = edge_ids.setdefault(key, len(edge_ids))
        self.n_edges = len(edge_ids)
        self.tri_edges = tri_edges
        self._edge_ids = edge_ids

        self.n_scalar_nodes = nv + self.n_edges
        self.n_vdofs = 2 * self.n_scalar_nodes
        self.n_pdofs = nv
        self.n_dofs = self.n_vdofs + self.n_pdofs + 1
        self.multiplier_dof = self.n_vdofs + self.n_pdofs
        self.divergence_rows = np.arange(self.n_vdofs, self.n_dofs)

        coords = np.empty((self.n_scalar_nodes, 2))
        coords[:nv] = mesh.vertices
        for (a, b), eid in edge_ids.items():
            coords[nv + eid] = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
        self.node_coords = coords

        self.tri_nodes = np.hstack([tris, nv + tri_edges])
        self.tri_vdofs = np.empty((mesh.n_triangles, 12), dtype=np.int64)
        self.tri_vdofs[:, 0::2] = 2 * self.tri_nodes
        self.tri_vdofs[:, 1::2] = 2 * self.tri_nodes + 1
        self.tri_pdofs = self.n_vdofs + tris

        # Geometry and quadrature tables.
        p = mesh.vertices[tris]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(detJ <= 0.0):
            raise ValueError("mesh has non-positively oriented triangles")
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1] / detJ
        Jinv[:, 0, 1] = -J[:, 0, 1] / detJ
        Jinv[:, 1, 0] = -J[:, 1, 0] / detJ
        Jinv[:, 1, 1] = J[:, 0, 0] / detJ

        ref = quad.tri_points
        self.p2_vals = _p2_values(ref)
        self.p1_vals = _p1_values(ref)
        refg = _p2_ref_grads(ref)
        # grads[e, q, a, l] = d N_a / d x_l on element e at quad point q
        self.grads = np.einsum("qam,eml->eqal", refg, Jinv)
        self.qweights = quad.tri_weights[None, :] * (0.5 * detJ)[:, None]
        self.qpoints = p[:, None, 0, :] + np.einsum("eil,ql->eqi", J, ref)
        self.areas = 0.5 * detJ

        # Boundary tables.
        self._build_boundary(mesh)

        if zero_mean_pressure is None:
            zero_mean_pressure = not self.has_free_surface
        self.zero_mean_pressure = zero_mean_pressure

        # int psi_b dx, for the mean-pressure coupling.
        c = np.zeros(self.n_pdofs)
        np.add.at(c, tris.ravel(), np.einsum("eq,qb->eb", self.qweights, self.p1_vals).ravel())
        self.pressure_integral = c

        self._build_constraints(mesh)

    def _build_boundary(self, mesh: Mesh) -> None:
        nv = mesh.n_vertices
        bed_nodes, bed_len, bed_mid = [], [], []
        air_nodes: set[int] = set()
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            eid = self._edge_ids[(min(a, b), max(a, b))]
            mid = nv + eid
            if tag == BED:
                pa, pb = mesh.vertices[a], mesh.vertices[b]
                if abs(pa[1] - pb[1]) > 1e-9 * (1.0 + abs(pa[1])):
                    raise NotImplementedError("sliding is only supported on a flat bed")
                bed_nodes.append((a, b, mid))
                bed_len.append(float(np.linalg.norm(pb - pa)))
                bed_mid.append(0.5 * (pa + pb))
            elif tag == AIR:
                air_nodes.update((int(a), int(b), int(mid)))
        self.bed_nodes = np.asarray(bed_nodes, dtype=np.int64).reshape(-1, 3)
        self.bed_lengths = np.asarray(bed_len)
        self.n_bed_edges = self.bed_nodes.shape[0]
        self.bed_trace = _edge_trace(quad.edge_points)
        self.bed_qweights = quad.edge_weights[None, :] * self.bed_lengths[:, None]
        if self.n_bed_edges:
            pa = mesh.vertices[self.bed_nodes[:, 0]]
            pb = mesh.vertices[self.bed_nodes[:, 1]]
            t = quad.edge_points
            self.bed_qpoints = pa[:, None, :] + t[None, :, None] * (pb - pa)[:, None, :]
        else:
            self.bed_qpoints = np.zeros((0, len(quad.edge_points), 2))
        self.air_scalar_nodes = np.array(sorted(air_nodes), dtype=np.int64)
        self.has_free_surface = self.air_scalar_nodes.size > 0
        self.bed_length_total = float(self.bed_lengths.sum())

    def _build_constraints(self, mesh: Mesh) -> None:
        nv = mesh.n_vertices
        constrained: set[int] = set()
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            mid = nv + self._edge_ids[(min(a, b), max(a, b))]
            if tag == DIRICHLET:
                for n in (a, b, mid):
                    constrained.add(2 * n)
                    constrained.add(2 * n + 1)
            elif tag == BED:
                # flat bed, normal (0, -1): v.n = 0 is the component condition v_y = 0
                for n in (a, b, mid):
                    constrained.add(2 * n + 1)
        mask = np.zeros(self.n_dofs, dtype=bool)
        mask[list(constrained)] = True
        if not self.zero_mean_pressure:
            mask[self.multiplier_dof] = True
        self.is_constrained = mask
        self.constrained_dofs = np.nonzero(mask)[0]
        self.free_dofs = np.nonzero(~mask)[0]

    # -- state helpers -----------------------------------------------------

    def zero_state(self) -> "MixedState":
        return MixedState(self, np.zeros(self.n_dofs))

    def domain_area(self) -> float:
        return float(self.areas.sum())


@dataclass
class MixedState:
    """Coefficient vector for (velocity, pressure, multiplier) over a space."""

    space: MixedSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.n_dofs,):
            raise ValueError("coefficient vector has wrong length")

    @property
    def velocity(self) -> np.ndarray:
        return self.coefficients[: self.space.n_vdofs]

    @property
    def pressure(self) -> np.ndarray:
        return self.coefficients[self.space.n_vdofs : self.space.n_vdofs + self.space.n_pdofs]

    @property
    def multiplier(self) -> float:
        return float(self.coefficients[self.space.multiplier_dof])

    def copy(self) -> "MixedState":
        return MixedState(self.space, self.coefficients.copy())

    def velocity_at_nodes(self) -> np.ndarray:
        """Velocity as an (n_scalar_nodes, 2) array."""
        return self.velocity.reshape(-1, 2)


def random_state(space: MixedSpace, rng: np.random.Generator, scale: float = 1.0) -> MixedState:
    """Random state satisfying the homogeneous essential constraints."""
    coeffs = scale * rng.standard_normal(space.n_dofs)
    coeffs[space.is_constrained] = 0.0
    coeffs[space.multiplier_dof] = 0.0
    return MixedState(space, coeffs)


# -- pointwise fields at quadrature points ----------------------------------


def _element_velocity(space: MixedSpace, u: np.ndarray) -> np.ndarray:
    return u[space.tri_vdofs].reshape(-1, 6, 2)


def _velocity_gradients(space: MixedSpace, u: np.ndarray) -> np.ndarray:
    """grad v with components [e, q, i, j] = dv_i/dx_j."""
    u_el = _element_velocity(space, u)
    return np.einsum("eai,eqaj->eqij", u_el, space.grads)


def _bed_velocity(space: MixedSpace, u: np.ndarray) -> np.ndarray:
    if space.n_bed_edges == 0:
        return np.zeros((0, space.bed_trace.shape[0], 2))
    u_bed = u.reshape(-1, 2)[space.bed_nodes]
    return np.einsum("qn,enk->eqk", space.bed_trace, u_bed)


def _power_coefficient(q: np.ndarray, law: PowerLaw, expo_shift: float) -> np.ndarray:
    # At delta = 0 the coefficient is singular where the argument vanishes,
    # but it always multiplies that same vanishing field; 0 is the limit of
    # the product, so the coefficient is zeroed there.
    expo = (law.r - 2.0 + expo_shift) / 2.0
    if law.delta > 0.0:
        return q**expo
    out = np.zeros_like(q)
    pos = q > 0.0
    out[pos] = q[pos] ** expo
    return out


def _bulk_coefficient(law: PowerLaw, Dv: np.ndarray, expo_shift: float = 0.0) -> np.ndarray:
    c = law.norm_scale
    q = c * np.einsum("eqij,eqij->eq", Dv, Dv) + law.delta**2
    return _power_coefficient(q, law, expo_shift)


def _slide_coefficient(law: PowerLaw, v: np.ndarray, expo_shift: float = 0.0) -> np.ndarray:
    c = law.norm_scale
    q = c * np.einsum("eqk,eqk->eq", v, v) + law.delta**2
    return _power_coefficient(q, law, expo_shift)


# -- residual and functional -------------------------------------------------


def assemble_velocity_residual(
    space: MixedSpace, params: PStokesParams, state: MixedState, include_pressure: bool = True
) -> np.ndarray:
    """Velocity block of the residual; the pairing <G(v), phi> when
    ``include_pressure`` is False, otherwise with the -(pi, div phi) term."""
    gv = _velocity_gradients(space, state.velocity)
    Dv = 0.5 * (gv + np.swapaxes(gv, 2, 3))
    law = params.power_law_bulk
    coef = _bulk_coefficient(law, Dv)
    stress = params.B * coef[..., None, None] * Dv + params.mu0 * gv
    if include_pressure:
        pi_q = np.einsum("eb,qb->eq", state.pressure[space.mesh.triangles], space.p1_vals)
        stress = stress - pi_q[..., None, None] * np.eye(2)
    f_q = params.force_at(space.qpoints)
    r_loc = np.einsum("eq,eqij,eqaj->eai", space.qweights, stress, space.grads)
    r_loc -= np.einsum("eq,eqi,qa->eai", space.qweights, f_q, space.p2_vals)

    r = np.zeros(space.n_dofs)
    np.add.at(r, space.tri_vdofs.ravel(), r_loc.reshape(-1, 12).ravel())

    if space.n_bed_edges and params.tau > 0.0:
        vq = _bed_velocity(space, state.velocity)
        s_coef = _slide_coefficient(params.power_law_slide, vq)
        tr_loc = params.tau * np.einsum("eq,eq,eqk,qn->enk", space.bed_qweights, s_coef, vq, space.bed_trace)
        bed_vdofs = np.stack([2 * space.bed_nodes, 2 * space.bed_nodes + 1], axis=2)
        np.add.at(r, bed_vdofs.ravel(), tr_loc.ravel())

    r[: space.n_vdofs][space.is_constrained[: space.n_vdofs]] = 0.0
    return r[: space.n_vdofs]


def assemble_residual(space: MixedSpace, params: PStokesParams, state: MixedState) -> np.ndarray:
    """Full mixed residual with constrained entries zeroed."""
    r = np.zeros(space.n_dofs)
    r[: space.n_vdofs] = assemble_velocity_residual(space, params, state)

    gv = _velocity_gradients(space, state.velocity)
    div_v = gv[..., 0, 0] + gv[..., 1, 1]
    rp_loc = -np.einsum("eq,eq,qb->eb", space.qweights, div_v, space.p1_vals)
    np.add.at(r, space.tri_pdofs.ravel(), rp_loc.ravel())

    if space.zero_mean_pressure:
        r[space.n_vdofs : space.n_vdofs + space.n_pdofs] += state.coefficients[space.multiplier_dof] * space.pressure_integral
        r[space.multiplier_dof] = space.pressure_integral @ state.pressure

    r[space.is_constrained] = 0.0
    return r


def evaluate_functional(space: MixedSpace, params: PStokesParams, state: MixedState) -> float:
    """Merit functional: power-law energies + mu0/2 gradient energy - force work."""
    gv = _velocity_gradients(space, state.velocity)
    Dv = 0.5 * (gv + np.swapaxes(gv, 2, 3))
    law = params.power_law_bulk
    c = law.norm_scale
    qpow = (c * np.einsum("eqij,eqij->eq", Dv, Dv) + law.delta**2) ** (law.r / 2.0)
    J = params.B / (law.r * c) * float(np.einsum("eq,eq->", space.qweights, qpow))
    J += 0.5 * params.mu0 * float(np.einsum("eq,eqij,eqij->", space.qweights, gv, gv))

    u_el = _element_velocity(space, state.velocity)
    v_q = np.einsum("eai,qa->eqi", u_el, space.p2_vals)
    f_q = params.force_at(space.qpoints)
    J -= float(np.einsum("eq,eqi,eqi->", space.qweights, f_q, v_q))

    if space.n_bed_edges and params.tau > 0.0:
        slide = params.power_law_slide
        cs = slide.norm_scale
        vq = _bed_velocity(space, state.velocity)
        spow = (cs * np.einsum("eqk,eqk->eq", vq, vq) + slide.delta**2) ** (slide.r / 2.0)
        J += params.tau / (slide.r * cs) * float(np.einsum("eq,eq->", space.bed_qweights, spow))
    return J


def functional_directional_derivative(
    space: MixedSpace, params: PStokesParams, state: MixedState, direction: np.ndarray
) -> float:
    """<G(v), w>: derivative of the merit functional along a constrained
    direction (equals d/dt J(v + t w) at t = 0)."""
    g = assemble_velocity_residual(space, params, state, include_pressure=False)
    return float(g @ np.asarray(direction)[: space.n_vdofs])


def reference_pressure_pairing(space: MixedSpace, params: PStokesParams, w: np.ndarray) -> float:
    """int pi_ref div(w) dx for the hydrostatic reference pressure.

    pi_ref = rho |g_y| (y_top - y) approximates the true pressure up to the
    deviatoric scale.  Subtracting this pairing from merit slopes and
    decreases removes the dominant sensitivity of the merit to the tiny
    divergence errors of computed directions (which is pure rounding, not
    descent information).  On exactly divergence-free directions the
    pairing vanishes, so nothing changes in exact arithmetic.
    """
    if params.body_force is not None or params.g[1] >= 0.0:
        return 0.0
    y_top = float(space.mesh.vertices[:, 1].max())
    pi_ref = params.rho * (-params.g[1]) * (y_top - space.qpoints[..., 1])
    gw = _velocity_gradients(space, np.asarray(w)[: space.n_vdofs])
    div_w = gw[..., 0, 0] + gw[..., 1, 1]
    return float(np.einsum("eq,eq,eq->", space.qweights, pi_ref, div_w))


def _power_increment(q0: np.ndarray, lin: np.ndarray, quad: np.ndarray, half_r: float, t: float) -> np.ndarray:
    """(q0 + t lin + t^2 quad)^half_r - q0^half_r without cancellation.

    q0 > 0 and the trinomial stays positive, so the ratio passed to log1p
    is > -1.
    """
    ratio = (t * lin + t * t * quad) / q0
    return q0**half_r * np.expm1(half_r * np.log1p(ratio))


def merit_decrease_function(space: MixedSpace, params: PStokesParams, state: MixedState, direction: np.ndarray):
    """Return t -> J(v + t w) - J(v), accurate for tiny decreases.

    Line searches compare merit differences many orders of magnitude below
    |J|; evaluating J twice and subtracting loses them to rounding.  Here
    every term is written as an increment: the power-law densities through
    expm1/log1p on the exactly expanded norm trinomial, the quadratic
    diffusion term and the linear force work through their polynomial
    coefficients.
    """
    direction = np.asarray(direction, dtype=float)
    w = direction[: space.n_vdofs]
    gv = _velocity_gradients(space, state.velocity)
    gw = _velocity_gradients(space, w)
    Dv = 0.5 * (gv + np.swapaxes(gv, 2, 3))
    Dw = 0.5 * (gw + np.swapaxes(gw, 2, 3))

    law = params.power_law_bulk
    c = law.norm_scale
    q0 = c * np.einsum("eqij,eqij->eq", Dv, Dv) + law.delta**2
    lin = 2.0 * c * np.einsum("eqij,eqij->eq", Dv, Dw)
    qua = c * np.einsum("eqij,eqij->eq", Dw, Dw)
    bulk_scale = params.B / (law.r * c)

    mu_lin = params.mu0 * float(np.einsum("eq,eqij,eqij->", space.qweights, gv, gw))
    mu_quad = 0.5 * params.mu0 * float(np.einsum("eq,eqij,eqij->", space.qweights, gw, gw))

    w_el = _element_velocity(space, w)
    w_q = np.einsum("eai,qa->eqi", w_el, space.p2_vals)
    f_q = params.force_at(space.qpoints)
    force_lin = float(np.einsum("eq,eqi,eqi->", space.qweights, f_q, w_q))

    has_friction = space.n_bed_edges and params.tau > 0.0
    if has_friction:
        slide = params.power_law_slide
        cs = slide.norm_scale
        vq = _bed_velocity(space, state.velocity)
        wq = _bed_velocity(space, w)
        s0 = cs * np.einsum("eqk,eqk->eq", vq, vq) + slide.delta**2
        s_lin = 2.0 * cs * np.einsum("eqk,eqk->eq", vq, wq)
        s_qua = cs * np.einsum("eqk,eqk->eq", wq, wq)
        slide_scale = params.tau / (slide.r * cs)

    def decrease(t: float) -> float:
        d = bulk_scale * float(
            np.einsum("eq,eq->", space.qweights, _power_increment(q0, lin, qua, law.r / 2.0, t))
        )
        if has_friction:
            d += slide_scale * float(
                np.einsum("eq,eq->", space.bed_qweights, _power_increment(s0, s_lin, s_qua, slide.r / 2.0, t))
            )
        return d + t * mu_lin + t * t * mu_quad - t * force_lin

    return decrease


# -- matrices ----------------------------------------------------------------


def _scatter_blocks(space: MixedSpace, K_loc, D_loc, bed_loc=None) -> sp.csr_matrix:
    """Assemble local velocity (e,12,12), divergence (e,3,12) and optional bed
    (e,6,6) blocks plus multiplier coupling into the global sparse matrix."""
    rows_v = np.repeat(space.tri_vdofs, 12, axis=1).ravel()
    cols_v = np.tile(space.tri_vdofs, (1, 12)).ravel()
    data = [K_loc.ravel()]
    rows = [rows_v]
    cols = [cols_v]

    rows_d = np.repeat(space.tri_pdofs, 12, axis=1).ravel()
    cols_d = np.tile(space.tri_vdofs, (1, 3)).ravel()
    data += [D_loc.ravel(), D_loc.ravel()]
    rows += [rows_d, cols_d]
    cols += [cols_d, rows_d]

    if bed_loc is not None and space.n_bed_edges:
        bed_vdofs = np.empty((space.n_bed_edges, 6), dtype=np.int64)
        bed_vdofs[:, 0::2] = 2 * space.bed_nodes
        bed_vdofs[:, 1::2] = 2 * space.bed_nodes + 1
        rows += [np.repeat(bed_vdofs, 6, axis=1).ravel()]
        cols += [np.tile(bed_vdofs, (1, 6)).ravel()]
        data += [bed_loc.ravel()]

    if space.zero_mean_pressure:
        pdofs = np.arange(space.n_vdofs, space.n_vdofs + space.n_pdofs)
        mult = np.full(space.n_pdofs, space.multiplier_dof)
        rows += [pdofs, mult]
        cols += [mult, pdofs]
        data += [space.pressure_integral, space.pressure_integral]

    A = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.n_dofs, space.n_dofs),
    )
    return A.tocsr()


def _divergence_blocks(space: MixedSpace) -> np.ndarray:
    """Local blocks of -(div v, psi): shape (e, 3, 12)."""
    D = -np.einsum("eq,qb,eqai->ebai", space.qweights, space.p1_vals, space.grads)
    return D.reshape(-1, 3, 12)


def _iso_cross_blocks(space: MixedSpace, half_visc: np.ndarray, mu0: float) -> np.ndarray:
    """12x12 local blocks of int (2*half_visc) D(w):grad(phi) + mu0 grad(w):grad(phi).

    Uses D(w):grad(phi) = 0.5 (delta_ij grad_a.grad_b + dN_a/dx_j dN_b/dx_i)
    for trial (b, j), test (a, i).
    """
    w = space.qweights
    iso = np.einsum("eq,eq,eqal,eqbl->eab", w, half_visc + mu0, space.grads, space.grads)
    cross = np.einsum("eq,eq,eqaj,eqbi->eajbi", w, half_visc, space.grads, space.grads)
    K = np.zeros((space.grads.shape[0], 12, 12))
    for i in range(2):
        for j in range(2):
            blk = cross[:, :, j, :, i]
            if i == j:
                blk = blk + iso
            K[:, i::2, j::2] += blk
    return K


def _bed_iso_blocks(space: MixedSpace, coef: np.ndarray) -> np.ndarray:
    """6x6 local bed blocks of int coef * (w . phi)."""
    m = np.einsum("eq,eq,qn,qm->enm", space.bed_qweights, coef, space.bed_trace, space.bed_trace)
    K = np.zeros((space.n_bed_edges, 6, 6))
    K[:, 0::2, 0::2] = m
    K[:, 1::2, 1::2] = m
    return K


def assemble_frozen_system(
    space: MixedSpace,
    params: PStokesParams,
    bulk_coef,
    slide_coef=None,
) -> sp.csr_matrix:
    """Linear Stokes-type saddle matrix with a frozen viscosity factor.

    ``bulk_coef`` is the scalar multiplying B in the bulk term (constant or
    per element/quad point); ``slide_coef`` likewise multiplies tau on the
    bed (None disables friction).  Constraints are applied.
    """
    nel, nq = space.qweights.shape
    visc = params.B * np.broadcast_to(np.asarray(bulk_coef, dtype=float), (nel, nq))
    K_loc = _iso_cross_blocks(space, 0.5 * visc, params.mu0)
    bed_loc = None
    if slide_coef is not None and space.n_bed_edges and params.tau > 0.0:
        coef = params.tau * np.broadcast_to(np.asarray(slide_coef, dtype=float), space.bed_qweights.shape)
        bed_loc = _bed_iso_blocks(space, coef)
    A = _scatter_blocks(space, K_loc, _divergence_blocks(space), bed_loc)
    return apply_constraints(space, matrix=A)


def assemble_picard_matrix(space: MixedSpace, params: PStokesParams, state: MixedState) -> sp.csr_matrix:
    """Lagged-viscosity linear operator at the given state (constrained)."""
    law = params.power_law_bulk
    if law.delta <= 0.0:
        raise ValueError("Picard matrix requires delta > 0")
    gv = _velocity_gradients(space, state.velocity)
    Dv = 0.5 * (gv + np.swapaxes(gv, 2, 3))
    bulk = _bulk_coefficient(law, Dv)
    slide = None
    if space.n_bed_edges and params.tau > 0.0:
        slide = _slide_coefficient(params.power_law_slide, _bed_velocity(space, state.velocity))
    return assemble_frozen_system(space, params, bulk, slide)


def assemble_jacobian(space: MixedSpace, params: PStokesParams, state: MixedState) -> sp.csr_matrix:
    """Derivative of the residual: saddle matrix [[K(v), B^T], [B, 0]]."""
    law = params.power_law_bulk
    if law.delta <= 0.0:
        raise ValueError("Jacobian requires delta > 0")
    gv = _velocity_gradients(space, state.velocity)
    Dv = 0.5 * (gv + np.swapaxes(gv, 2, 3))

    visc = params.B * _bulk_coefficient(law, Dv)
    K_loc = _iso_cross_blocks(space, 0.5 * visc, params.mu0)

    # Rank-one term: (p-2) B c (c|Dv|^2+d^2)^((p-4)/2) (Dv:Dw)(Dv:grad phi),
    # with Dv:grad(N_a e_i) = (Dv grad N_a)_i because Dv is symmetric.
    fac = (law.r - 2.0) * params.B * law.norm_scale * _bulk_coefficient(law, Dv, expo_shift=-2.0)
    dvg = np.einsum("eqij,eqaj->eqai", Dv, space.grads)
    rank1 = np.einsum("eq,eq,eqai,eqbj->eaibj", space.qweights, fac, dvg, dvg)
    K_loc += rank1.reshape(-1, 12, 12)

    bed_loc = None
    if space.n_bed_edges and params.tau > 0.0:
        slide = params.power_law_slide
        vq = _bed_velocity(space, state.velocity)
        iso = params.tau * _slide_coefficient(slide, vq)
        bed_loc = _bed_iso_blocks(space, iso)
        sfac = (slide.r - 2.0) * params.tau * slide.norm_scale * _slide_coefficient(slide, vq, expo_shift=-2.0)
        vn = np.einsum("eqk,qn->eqnk", vq, space.bed_trace)
        bed_rank1 = np.einsum("eq,eq,eqni,eqmj->enimj", space.bed_qweights, sfac, vn, vn)
        bed_loc += bed_rank1.reshape(-1, 6, 6)

    A = _scatter_blocks(space, K_loc, _divergence_blocks(space), bed_loc)
    return apply_constraints(space, matrix=A)


def assemble_body_load(space: MixedSpace, params: PStokesParams) -> np.ndarray:
    """Load vector (f, phi) on velocity dofs, constrained entries zeroed."""
    f_q = params.force_at(space.qpoints)
    l_loc = np.einsum("eq,eqi,qa->eai", space.qweights, f_q, space.p2_vals)
    rhs = np.zeros(space.n_dofs)
    np.add.at(rhs, space.tri_vdofs.ravel(), l_loc.reshape(-1, 12).ravel())
    rhs[space.is_constrained] = 0.0
    return rhs


def apply_constraints(space: MixedSpace, matrix=None, vector=None, values=None):
    """Pin constrained dofs by symmetric elimination.

    Only homogeneous values are supported; passing nonzero ``values`` is an
    error.  Returns the constrained matrix, vector, or (matrix, vector).
    """
    if values is not None:
        values = np.asarray(values, dtype=float)
        if values.size and np.any(values != 0.0):
            raise ValueError("only homogeneous constraint values are supported")
    out = []
    if matrix is not None:
        keep = (~space.is_constrained).astype(float)
        P = sp.diags(keep)
        pin = sp.diags(space.is_constrained.astype(float))
        out.append((P @ matrix @ P + pin).tocsr())
    if vector is not None:
        v = np.asarray(vector, dtype=float).copy()
        v[space.is_constrained] = 0.0
        out.append(v)
    return out[0] if len(out) == 1 else tuple(out)


# -- auxiliary matrices used by the residual norm and studies ----------------


def laplacian_blocks(space: MixedSpace) -> np.ndarray:
    """Local (e, 12, 12) blocks of int grad(w):grad(phi)."""
    gg = np.einsum("eq,eqal,eqbl->eab", space.qweights, space.grads, space.grads)
    K = np.zeros((gg.shape[0], 12, 12))
    K[:, 0::2, 0::2] = gg
    K[:, 1::2, 1::2] = gg
    return K


def vector_laplacian_matrix(space: MixedSpace) -> sp.csr_matrix:
    """Unconstrained int grad(w):grad(phi) over velocity dofs."""
    K = laplacian_blocks(space)
    rows = np.repeat(space.tri_vdofs, 12, axis=1).ravel()
    cols = np.tile(space.tri_vdofs, (1, 12)).ravel()
    A = sp.coo_matrix((K.ravel(), (rows, cols)), shape=(space.n_vdofs, space.n_vdofs))
    return A.tocsr()


def bed_mass_matrix(space: MixedSpace) -> sp.csr_matrix:
    """Unconstrained int_bed (w . phi) over velocity dofs."""
    if space.n_bed_edges == 0:
        return sp.csr_matrix((space.n_vdofs, space.n_vdofs))
    ones = np.ones_like(space.bed_qweights)
    M_loc = _bed_iso_blocks(space, ones)
    bed_vdofs = np.empty((space.n_bed_edges, 6), dtype=np.int64)
    bed_vdofs[:, 0::2] = 2 * space.bed_nodes
    bed_vdofs[:, 1::2] = 2 * space.bed_nodes + 1
    rows = np.repeat(bed_vdofs, 6, axis=1).ravel()
    cols = np.tile(bed_vdofs, (1, 6)).ravel()
    A = sp.coo_matrix((M_loc.ravel(), (rows, cols)), shape=(space.n_vdofs, space.n_vdofs))
    return A.tocsr()
