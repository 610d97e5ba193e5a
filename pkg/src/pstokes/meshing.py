"""Structured triangulations of the two experiment domains.

Two domain kinds are supported:

* ``ISMIP_B`` -- a glacier slab of mean thickness 1000 m over a sinusoidal
  bed with period L.  The tilted free surface is flattened (the tilt enters
  only through the rotated gravity vector in the experiment setup), so in
  mesh coordinates the surface sits at z = 0 and the bed at
  z = -1000 + 500 sin(2 pi x / L).  Periodic boundary conditions are
  replaced by extending the domain with mirror copies left and right and
  clamping the far ends.
* ``BLOCK`` -- the rectangle (0, L) x (0, 1000) with a flat sliding bed.

Each grid quad is split along the same diagonal into two triangles, so
meshes are deterministic for a given spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DIRICHLET",
    "AIR",
    "BED",
    "DomainSpec",
    "Mesh",
    "ismip_profiles",
    "build_mesh",
    "boundary_normal",
    "dump_mesh",
    "load_mesh_dump",
]

DIRICHLET = "DIRICHLET"
AIR = "AIR"
BED = "BED"
_TAGS = (DIRICHLET, AIR, BED)

ISMIP_B = "ISMIP_B"
BLOCK = "BLOCK"

THICKNESS = 1000.0
BED_AMPLITUDE = 500.0


@dataclass(frozen=True)
class DomainSpec:
    """Geometry and resolution of an experiment domain.

    ``copies`` counts mirror copies added on each side (ISMIP_B defaults to
    3, BLOCK to 0); ``nx`` is the number of columns per copy.
    """

    kind: str
    L: float = 5000.0
    alpha: float = float(np.radians(0.5))
    copies: int | None = None
    nx: int = 16
    ny: int = 8

    def __post_init__(self):
        if self.kind not in (ISMIP_B, BLOCK):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.L <= 0.0:
            raise ValueError("horizontal extent L must be positive")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("resolution must satisfy nx, ny >= 2")
        if self.copies is None:
            object.__setattr__(self, "copies", 3 if self.kind == ISMIP_B else 0)
        if self.copies < 0:
            raise ValueError("copies must be >= 0")

    @property
    def n_columns(self) -> int:
        return self.nx * (1 + 2 * self.copies)

    @property
    def extent(self) -> float:
        return (1 + 2 * self.copies) * self.L


@dataclass
class Mesh:
    """Triangulated domain with tagged boundary edges.

    vertices: (nv, 2) coordinates in meters.
    triangles: (nt, 3) vertex indices, positively oriented.
    boundary_edges: (nb, 2) vertex index pairs.
    boundary_tags: list of nb tags from {DIRICHLET, AIR, BED}.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: list[str]
    spec: DomainSpec | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def ismip_profiles(spec: DomainSpec, x):
    """Surface and bed elevations z_s(x), z_b(x) of the tilted glacier.

    Returns the profiles as written for the physical (sloped) configuration:
    z_s = -tan(alpha) x and z_b = z_s - 1000 + 500 sin(2 pi x / L).  The
    sinusoidal part is L-periodic, so the formulas extend to the copy
    domain unchanged.
    """
    x = np.asarray(x, dtype=float)
    omega = 2.0 * np.pi / spec.L
    z_s = -np.tan(spec.alpha) * x
    z_b = z_s - THICKNESS + BED_AMPLITUDE * np.sin(omega * x)
    return z_s, z_b


def _flattened_profiles(spec: DomainSpec, x):
    """Mesh-coordinate profiles: tilt removed, surface at z = 0."""
    z_s, z_b = ismip_profiles(spec, x)
    tilt = -np.tan(spec.alpha) * np.asarray(x, dtype=float)
    return z_s - tilt, z_b - tilt


def build_mesh(spec: DomainSpec) -> Mesh:
    """Build the structured triangulation for a domain spec.

    Grid of n_columns x ny quads, each split along the same diagonal.
    Vertical edges at both far ends are DIRICHLET; the top is AIR; the
    bottom is DIRICHLET for ISMIP_B (frozen bed) and BED for BLOCK.
    """
    ncol = spec.n_columns
    xs = np.linspace(0.0, spec.extent, ncol + 1)
    if spec.kind == ISMIP_B:
        z_top, z_bot = _flattened_profiles(spec, xs)
        if np.any(z_top - z_bot <= 0.0):
            raise ValueError("degenerate column: surface at or below bed")
    else:
        z_top = np.full(ncol + 1, THICKNESS)
        z_bot = np.zeros(ncol + 1)

    nyp = spec.ny + 1
    verts = np.empty(((ncol + 1) * nyp, 2))
    for i in range(ncol + 1):
        ys = np.linspace(z_bot[i], z_top[i], nyp)
        verts[i * nyp : (i + 1) * nyp, 0] = xs[i]
        verts[i * nyp : (i + 1) * nyp, 1] = ys

    def vid(i, j):
        return i * nyp + j

    tris = []
    for i in range(ncol):
        for j in range(spec.ny):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    triangles = np.asarray(tris, dtype=np.int64)

    bottom_tag = DIRICHLET if spec.kind == ISMIP_B else BED
    edges, tags = [], []
    for i in range(ncol):
        edges.append((vid(i, 0), vid(i + 1, 0)))
        tags.append(bottom_tag)
    for i in range(ncol):
        edges.append((vid(i, spec.ny), vid(i + 1, spec.ny)))
        tags.append(AIR)
    for j in range(spec.ny):
        edges.append((vid(0, j), vid(0, j + 1)))
        tags.append(DIRICHLET)
        edges.append((vid(ncol, j), vid(ncol, j + 1)))
        tags.append(DIRICHLET)

    return Mesh(
        vertices=verts,
        triangles=triangles,
        boundary_edges=np.asarray(edges, dtype=np.int64),
        boundary_tags=tags,
        spec=spec,
    )


def _edge_owner(mesh: Mesh, a: int, b: int) -> int:
    """Index of the unique triangle containing boundary edge (a, b)."""
    hits = np.nonzero(
        np.any(mesh.triangles == a, axis=1) & np.any(mesh.triangles == b, axis=1)
    )[0]
    if hits.size != 1:
        raise ValueError(f"edge ({a}, {b}) is not a boundary edge")
    return int(hits[0])


def boundary_normal(mesh: Mesh, edge: int) -> np.ndarray:
    """Outward unit normal of boundary edge ``edge`` (index into the list)."""
    a, b = mesh.boundary_edges[edge]
    tri = mesh.triangles[_edge_owner(mesh, a, b)]
    (third,) = [v for v in tri if v not in (a, b)]
    pa, pb = mesh.vertices[a], mesh.vertices[b]
    t = pb - pa
    n = np.array([t[1], -t[0]])
    n /= np.linalg.norm(n)
    mid = 0.5 * (pa + pb)
    if np.dot(n, mesh.vertices[third] - mid) > 0.0:
        n = -n
    return n


def dump_mesh(mesh: Mesh, path: str | Path) -> None:
    """Plain-text dump: 'x y' per vertex, 'i j k' per triangle,
    'i j TAG' per boundary edge."""
    lines = []
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    for i, j, k in mesh.triangles:
        lines.append(f"{i} {j} {k}")
    for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        lines.append(f"{i} {j} {tag}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh_dump(path: str | Path) -> Mesh:
    """Read a mesh dump back; line shape identifies the section."""
    verts, tris, edges, tags = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[-1] in _TAGS:
            edges.append((int(parts[0]), int(parts[1])))
            tags.append(parts[-1])
        elif len(parts) == 3:
            tris.append(tuple(int(p) for p in parts))
        else:
            verts.append((float(parts[0]), float(parts[1])))
    return Mesh(
        vertices=np.asarray(verts, dtype=float),
        triangles=np.asarray(tris, dtype=np.int64),
        boundary_edges=np.asarray(edges, dtype=np.int64),
        boundary_tags=tags,
    )
