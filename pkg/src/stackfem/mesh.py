"""Triangular meshes, structured generators, and Lagrange P1/P2 spaces."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom2d import ConvexPolygon, GeometryError, offset_polygon

__all__ = [
    "TriMesh",
    "FeSpace",
    "build_structured_mesh",
    "build_band_mesh",
    "nodal_interpolate",
    "write_mesh",
    "read_mesh",
    "MARKER_OUTER",
    "MARKER_INNER",
]

# Boundary facet markers. OUTER facets lie on the predomain hull (interface
# candidates, or the global Dirichlet boundary for the background mesh);
# INNER facets bound a hole cut out of the mesh and carry Dirichlet data.
MARKER_OUTER = 0
MARKER_INNER = 1


class MeshError(ValueError):
    """Raised for non-conforming or badly oriented meshes."""


@dataclass
class TriMesh:
    """Conforming triangle mesh.

    nodes            (n, 2) float coordinates
    cells            (m, 3) int vertex triples, positively oriented
    boundary_facets  (nb, 2) int pairs (cell, local edge); local edge k joins
                     local vertices k and (k+1) % 3
    boundary_markers (nb,) int, MARKER_OUTER / MARKER_INNER
    h                mesh parameter: max cell diameter
    """

    nodes: np.ndarray
    cells: np.ndarray
    boundary_facets: np.ndarray = field(default=None)
    boundary_markers: np.ndarray = field(default=None)
    h: float = field(default=0.0)

    def __init__(self, nodes, cells, boundary_markers=None):
        self.nodes = np.asarray(nodes, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise MeshError(f"cells must be (m, 3), got {self.cells.shape}")
        self._check_orientation()
        self.boundary_facets = self._extract_boundary()
        if boundary_markers is None:
            self.boundary_markers = np.zeros(len(self.boundary_facets), dtype=np.int64)
        else:
            self.boundary_markers = np.asarray(boundary_markers, dtype=np.int64)
            if len(self.boundary_markers) != len(self.boundary_facets):
                raise MeshError("boundary marker count does not match facet count")
        diam = self.cell_diameters()
        self.h = float(diam.max())
        self._geom_cache = None

    # -- structure ---------------------------------------------------------

    def _check_orientation(self):
        v = self.nodes[self.cells]
        cross = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (
            v[:, 1, 1] - v[:, 0, 1]
        ) * (v[:, 2, 0] - v[:, 0, 0])
        if np.any(cross <= 0):
            raise MeshError(f"{int((cross <= 0).sum())} cells are degenerate or clockwise")

    def _extract_boundary(self) -> np.ndarray:
        # row c*3 + k holds local edge k of cell c (joining vertices k, k+1)
        edges = self.cells[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        keys = np.sort(edges, axis=1)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        if counts.max(initial=1) > 2:
            raise MeshError("non-conforming mesh: an edge is shared by more than 2 cells")
        rows = np.flatnonzero(counts[inverse] == 1)
        facets = np.stack([rows // 3, rows % 3], axis=1)
        order = np.lexsort((facets[:, 1], facets[:, 0]))
        return facets[order].astype(np.int64)

    def cell_vertices(self, cell: int) -> np.ndarray:
        return self.nodes[self.cells[cell]]

    def cell_diameters(self) -> np.ndarray:
        v = self.nodes[self.cells]
        e0 = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
        e1 = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
        e2 = np.linalg.norm(v[:, 0] - v[:, 2], axis=1)
        return np.maximum(e0, np.maximum(e1, e2))

    def cell_areas(self) -> np.ndarray:
        v = self.nodes[self.cells]
        return 0.5 * (
            (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
            - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
        )

    @property
    def area(self) -> float:
        return float(self.cell_areas().sum())

    @property
    def uniformity_ratio(self) -> float:
        d = self.cell_diameters()
        return float(d.max() / d.min())

    def facet_endpoints(self, cell: int, ledge: int) -> tuple[np.ndarray, np.ndarray]:
        tri = self.cells[cell]
        return self.nodes[tri[ledge]], self.nodes[tri[(ledge + 1) % 3]]

    # -- affine geometry (cached) -------------------------------------------

    def geometry(self):
        """Per-cell affine maps: origin v0, Jacobian J, inverse, |det J|."""
        if self._geom_cache is None:
            v = self.nodes[self.cells]
            v0 = v[:, 0]
            J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)  # (m, 2, 2) columns
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            invJ = np.empty_like(J)
            invJ[:, 0, 0] = J[:, 1, 1] / det
            invJ[:, 0, 1] = -J[:, 0, 1] / det
            invJ[:, 1, 0] = -J[:, 1, 0] / det
            invJ[:, 1, 1] = J[:, 0, 0] / det
            self._geom_cache = (v0, J, invJ, det)
        return self._geom_cache

    def ref_coords(self, cell: int, pts: np.ndarray) -> np.ndarray:
        """Map physical points (n, 2) to reference coordinates of one cell."""
        v0, _, invJ, _ = self.geometry()
        return (np.atleast_2d(pts) - v0[cell]) @ invJ[cell].T


# ---------------------------------------------------------------------------
# Lagrange spaces
# ---------------------------------------------------------------------------

def ref_basis(degree: int, ref_pts: np.ndarray) -> np.ndarray:
    """Reference basis values, shape (npts, ndofs)."""
    ref_pts = np.atleast_2d(ref_pts)
    xi, eta = ref_pts[:, 0], ref_pts[:, 1]
    lam = np.stack([1.0 - xi - eta, xi, eta], axis=1)
    if degree == 1:
        return lam
    if degree == 2:
        l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
        return np.stack(
            [
                l0 * (2 * l0 - 1),
                l1 * (2 * l1 - 1),
                l2 * (2 * l2 - 1),
                4 * l1 * l2,
                4 * l2 * l0,
                4 * l0 * l1,
            ],
            axis=1,
        )
    raise ValueError(f"unsupported degree {degree}")


def ref_basis_grad(degree: int, ref_pts: np.ndarray) -> np.ndarray:
    """Reference basis gradients, shape (npts, ndofs, 2)."""
    ref_pts = np.atleast_2d(ref_pts)
    n = len(ref_pts)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    if degree == 1:
        return np.broadcast_to(dlam, (n, 3, 2)).copy()
    if degree == 2:
        xi, eta = ref_pts[:, 0], ref_pts[:, 1]
        lam = np.stack([1.0 - xi - eta, xi, eta], axis=1)
        g = np.empty((n, 6, 2))
        for i in range(3):
            g[:, i] = (4 * lam[:, i, None] - 1) * dlam[i]
        pairs = [(1, 2), (2, 0), (0, 1)]
        for k, (i, j) in enumerate(pairs):
            g[:, 3 + k] = 4 * (lam[:, i, None] * dlam[j] + lam[:, j, None] * dlam[i])
        return g
    raise ValueError(f"unsupported degree {degree}")


@dataclass
class FeSpace:
    """Continuous Lagrange space of degree 1 or 2 on a TriMesh.

    Degree 2 adds one dof per mesh edge at the midpoint; local dof k >= 3 sits
    on the edge opposite local vertex k - 3.
    """

    mesh: TriMesh
    degree: int
    cell_dofs: np.ndarray = field(default=None)
    dof_coords: np.ndarray = field(default=None)
    dim: int = 0

    def __init__(self, mesh: TriMesh, degree: int):
        if degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {degree}")
        self.mesh = mesh
        self.degree = degree
        if degree == 1:
            self.cell_dofs = mesh.cells.copy()
            self.dof_coords = mesh.nodes.copy()
        else:
            edges = np.concatenate(
                [mesh.cells[:, [1, 2]], mesh.cells[:, [2, 0]], mesh.cells[:, [0, 1]]]
            )
            keys = np.sort(edges, axis=1)
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            nn = len(mesh.nodes)
            m = len(mesh.cells)
            edge_dof = nn + inverse.reshape(3, m).T  # (m, 3): edges opp. v0, v1, v2
            self.cell_dofs = np.concatenate([mesh.cells, edge_dof], axis=1)
            mids = 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])
            self.dof_coords = np.concatenate([mesh.nodes, mids])
        self.dim = len(self.dof_coords)

    @property
    def ndof_local(self) -> int:
        return 3 if self.degree == 1 else 6

    def eval_in_cell(self, coeffs: np.ndarray, cell: int, pts: np.ndarray) -> np.ndarray:
        ref = self.mesh.ref_coords(cell, pts)
        phi = ref_basis(self.degree, ref)
        return phi @ coeffs[self.cell_dofs[cell]]

    def grad_in_cell(self, coeffs: np.ndarray, cell: int, pts: np.ndarray) -> np.ndarray:
        """Physical gradients of the FE function, shape (npts, 2)."""
        _, _, invJ, _ = self.mesh.geometry()
        ref = self.mesh.ref_coords(cell, pts)
        gref = ref_basis_grad(self.degree, ref)
        gphys = gref @ invJ[cell]  # chain rule: grad_x = J^{-T} grad_ref
        return np.einsum("qdk,d->qk", gphys, coeffs[self.cell_dofs[cell]])

    def facet_dofs(self, cell: int, ledge: int) -> np.ndarray:
        """Dofs whose basis functions are nonzero on a boundary facet."""
        tri = self.cell_dofs[cell]
        a, b = ledge, (ledge + 1) % 3
        if self.degree == 1:
            return np.array([tri[a], tri[b]])
        opp = 3 - a - b  # local vertex opposite the edge
        return np.array([tri[a], tri[b], tri[3 + opp]])

    def boundary_dofs(self, marker: int | None = None) -> np.ndarray:
        """Sorted unique dofs on boundary facets (optionally of one marker)."""
        out = []
        for (cell, ledge), mk in zip(self.mesh.boundary_facets, self.mesh.boundary_markers):
            if marker is not None and mk != marker:
                continue
            out.extend(self.facet_dofs(int(cell), int(ledge)).tolist())
        return np.unique(np.array(out, dtype=np.int64)) if out else np.zeros(0, dtype=np.int64)


def nodal_interpolate(space: FeSpace, f) -> np.ndarray:
    """Coefficients of the nodal interpolant: f sampled at the dof coordinates."""
    c = space.dof_coords
    return np.asarray(f(c[:, 0], c[:, 1]), dtype=float)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _rectangle_frame(polygon: ConvexPolygon):
    v = polygon.vertices
    if len(v) != 4:
        raise GeometryError("structured meshing needs a rectangle (4 vertices)")
    u = v[1] - v[0]
    w = v[3] - v[0]
    lu, lw = np.hypot(*u), np.hypot(*w)
    if abs(float(np.dot(u, w))) > 1e-9 * lu * lw:
        raise GeometryError("structured meshing needs a rectangle (right angles)")
    return v[0], u, w, float(lu), float(lw)


def build_structured_mesh(polygon: ConvexPolygon, target_h: float) -> TriMesh:
    """Crossed-diagonal grid on a (possibly rotated) rectangle.

    Each grid square is split along a diagonal whose direction alternates in
    a checkerboard; achieved h is at most sqrt(2) * target_h and all cells
    are congruent right triangles.
    """
    if target_h <= 0:
        raise ValueError("target_h must be positive")
    v0, u, w, lu, lw = _rectangle_frame(polygon)
    if target_h > lu and target_h > lw:
        warnings.warn("target_h exceeds rectangle extent; falling back to a single cell pair")
    nx = max(1, math.ceil(lu / target_h - 1e-12))
    ny = max(1, math.ceil(lw / target_h - 1e-12))
    xi = np.linspace(0.0, 1.0, nx + 1)
    eta = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xi, eta, indexing="ij")
    nodes = v0[None, :] + X.reshape(-1, 1) * u[None, :] + Y.reshape(-1, 1) * w[None, :]

    def nid(i, j):
        return i * (ny + 1) + j

    cells = []
    for i in range(nx):
        for j in range(ny):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            if (i + j) % 2 == 0:
                cells.append((n00, n10, n11))
                cells.append((n00, n11, n01))
            else:
                cells.append((n00, n10, n01))
                cells.append((n10, n11, n01))
    return TriMesh(nodes, np.array(cells, dtype=np.int64))


def build_band_mesh(inner: ConvexPolygon, width: float, target_h: float) -> TriMesh:
    """Annular band between a convex polygon and its outward offset.

    The band is meshed in rings: the inner boundary (marker 1, Dirichlet
    data) is subdivided edge by edge, matched to the corresponding offset
    edge, and layered radially. Outer-loop facets carry marker 0.
    """
    if width <= 0:
        raise GeometryError("band width must be positive")
    if target_h <= 0:
        raise ValueError("target_h must be positive")
    outer = offset_polygon(inner, width)
    vin = inner.vertices
    vout = outer.vertices
    nedge = len(vin)
    nlay = max(1, math.ceil(width / target_h - 1e-12))

    ring_in, ring_out = [], []
    for k in range(nedge):
        a_in, b_in = vin[k], vin[(k + 1) % nedge]
        a_out, b_out = vout[k], vout[(k + 1) % nedge]
        mseg = max(1, math.ceil(np.hypot(*(b_out - a_out)) / target_h - 1e-12))
        t = np.arange(mseg) / mseg
        ring_in.append(a_in[None, :] + t[:, None] * (b_in - a_in)[None, :])
        ring_out.append(a_out[None, :] + t[:, None] * (b_out - a_out)[None, :])
    ring_in = np.concatenate(ring_in)
    ring_out = np.concatenate(ring_out)
    M = len(ring_in)

    layers = np.arange(nlay + 1) / nlay
    nodes = (
        ring_in[None, :, :] * (1.0 - layers[:, None, None])
        + ring_out[None, :, :] * layers[:, None, None]
    ).reshape(-1, 2)

    cells = []
    for l in range(nlay):
        base0 = l * M
        base1 = (l + 1) * M
        for r in range(M):
            r2 = (r + 1) % M
            c00, c10 = base0 + r, base0 + r2
            c01, c11 = base1 + r, base1 + r2
            cells.append((c00, c10, c11))
            cells.append((c00, c11, c01))
    cells = np.array(cells, dtype=np.int64)

    # ensure positive orientation regardless of ring direction
    v = nodes[cells]
    cross = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (
        v[:, 1, 1] - v[:, 0, 1]
    ) * (v[:, 2, 0] - v[:, 0, 0])
    flip = cross < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]

    mesh = TriMesh(nodes, cells)
    markers = np.full(len(mesh.boundary_facets), MARKER_OUTER, dtype=np.int64)
    for idx, (cell, ledge) in enumerate(mesh.boundary_facets):
        a, b = mesh.cells[cell][ledge], mesh.cells[cell][(ledge + 1) % 3]
        if a < M and b < M:
            markers[idx] = MARKER_INNER
    mesh.boundary_markers = markers
    return mesh


# ---------------------------------------------------------------------------
# ASCII mesh format
# ---------------------------------------------------------------------------

def write_mesh(mesh: TriMesh, path) -> None:
    """Write the ASCII format: 'ntrimesh 2' header, nodes, 0-based cells."""
    with open(path, "w") as fh:
        fh.write("ntrimesh 2\n")
        fh.write(f"{len(mesh.nodes)}\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g}\n")
        fh.write(f"{len(mesh.cells)}\n")
        for a, b, c in mesh.cells:
            fh.write(f"{a} {b} {c}\n")


def read_mesh(path) -> TriMesh:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["ntrimesh", "2"]:
            raise MeshError(f"bad mesh header: {header}")
        nn = int(fh.readline())
        nodes = np.array([[float(t) for t in fh.readline().split()] for _ in range(nn)])
        mc = int(fh.readline())
        cells = np.array(
            [[int(t) for t in fh.readline().split()] for _ in range(mc)], dtype=np.int64
        )
    return TriMesh(nodes, cells)
