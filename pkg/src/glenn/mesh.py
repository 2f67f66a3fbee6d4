"""Structured triangular meshes of the unit square and the L-shaped domain.

Edges carry a global orientation from the lower to the higher vertex index,
which fixes the sign convention of the edge (Nedelec) degrees of freedom.
Local edge ``j`` of a triangle is the edge opposite local vertex ``j``,
traversed from local vertex ``(j+1) % 3`` to ``(j+2) % 3``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class Mesh2D:
    """Conforming triangulation with global edge numbering.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array, counterclockwise
    edges : (E, 2) int array, ``edges[:, 0] < edges[:, 1]``
    triangle_edges : (T, 3) int array, local edge j opposite local vertex j
    edge_signs : (T, 3) float array of +1/-1
    boundary_edges : (Eb,) int array
    boundary_vertices : (Vb,) int array
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    triangle_edges: np.ndarray
    edge_signs: np.ndarray
    boundary_edges: np.ndarray
    boundary_vertices: np.ndarray
    domain: str = "custom"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_midpoints(self) -> np.ndarray:
        return self.vertices[self.edges].mean(axis=1)

    def edge_triangle_counts(self) -> np.ndarray:
        return np.bincount(self.triangle_edges.ravel(), minlength=self.n_edges)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Membership test for the open domain the mesh was generated for."""
        x, y = points[..., 0], points[..., 1]
        inside = (x > 0) & (x < 1) & (y > 0) & (y < 1)
        if self.domain == "l_shape":
            inside &= ~((x >= 0.5) & (y >= 0.5))
        return inside


def build_mesh(vertices, triangles, domain="custom") -> Mesh2D:
    """Derive edges, orientation signs and boundary sets from raw connectivity."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    # local edge j joins local vertices (j+1, j+2)
    a = triangles[:, [1, 2, 0]]
    b = triangles[:, [2, 0, 1]]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    pairs = np.stack([lo.ravel(), hi.ravel()], axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    triangle_edges = inverse.reshape(-1, 3)
    edge_signs = np.where(a < b, 1.0, -1.0)

    counts = np.bincount(triangle_edges.ravel(), minlength=len(edges))
    boundary_edges = np.flatnonzero(counts == 1)
    boundary_vertices = np.unique(edges[boundary_edges])
    return Mesh2D(
        vertices=vertices,
        triangles=triangles,
        edges=edges,
        triangle_edges=triangle_edges,
        edge_signs=edge_signs,
        boundary_edges=boundary_edges,
        boundary_vertices=boundary_vertices,
        domain=domain,
    )


def _structured_cells(n, keep):
    idx = lambda i, j: j * (n + 1) + i  # noqa: E731
    tris = []
    for j in range(n):
        for i in range(n):
            if not keep(i, j):
                continue
            v00, v10, v11, v01 = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return np.array(tris, dtype=np.int64)


def _grid_vertices(n):
    t = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(t, t)
    return np.column_stack([xx.ravel(), yy.ravel()])


def generate_unit_square(n: int) -> Mesh2D:
    """Uniform right-triangle mesh of (0, 1)^2 with ``n`` cells per side.

    Every cell is split along its (i, j) -> (i+1, j+1) diagonal.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"subdivisions per side must be >= 1, got {n}")
    tris = _structured_cells(n, lambda i, j: True)
    return build_mesh(_grid_vertices(n), tris, domain="unit_square")


def generate_l_shape(n: int) -> Mesh2D:
    """Unit-square mesh with the closed quadrant [1/2, 1] x [1/2, 1] removed."""
    n = int(n)
    if n < 2 or n % 2:
        raise ValueError(f"L-shape needs an even n >= 2 so the re-entrant corner is a vertex, got {n}")
    half = n // 2
    tris = _structured_cells(n, lambda i, j: not (i >= half and j >= half))
    used = np.unique(tris)
    remap = np.full((n + 1) ** 2, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return build_mesh(_grid_vertices(n)[used], remap[tris], domain="l_shape")


def generate_mesh(domain: str, n: int) -> Mesh2D:
    if domain == "unit_square":
        return generate_unit_square(n)
    if domain == "l_shape":
        return generate_l_shape(n)
    raise ValueError(f"unknown domain {domain!r}")


def refine_uniform(mesh: Mesh2D) -> Mesh2D:
    """Red refinement: split every triangle into four congruent children."""
    nv = mesh.n_vertices
    mids = mesh.edge_midpoints()
    vertices = np.vstack([mesh.vertices, mids])
    t = mesh.triangles
    # midpoint of local edge j is opposite local vertex j
    m = nv + mesh.triangle_edges
    m0, m1, m2 = m[:, 0], m[:, 1], m[:, 2]
    children = np.concatenate(
        [
            np.column_stack([t[:, 0], m2, m1]),
            np.column_stack([m2, t[:, 1], m0]),
            np.column_stack([m1, m0, t[:, 2]]),
            np.column_stack([m0, m1, m2]),
        ]
    )
    return build_mesh(vertices, children, domain=mesh.domain)
