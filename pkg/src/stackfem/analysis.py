"""Evaluation and norms of multimesh functions, plus run diagnostics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import nodal_interpolate, ref_basis, ref_basis_grad
from .multimesh import CutTopology, point_locate

__all__ = [
    "MultimeshFunction",
    "EnergyBreakdown",
    "Diagnostics",
    "ErrorReport",
    "eval_function",
    "eval_or_nan",
    "error_norms",
    "energy_norm",
    "h_norm",
    "global_interpolant",
    "diagnostics",
    "csv_header",
    "csv_row",
]


@dataclass
class MultimeshFunction:
    """Tuple of per-mesh coefficient vectors."""

    coeffs: list[np.ndarray]

    @classmethod
    def from_global(cls, topology: CutTopology, vec: np.ndarray) -> "MultimeshFunction":
        off = topology.block_offsets()
        return cls([np.array(vec[off[i]:off[i + 1]]) for i in range(topology.nparts)])

    def to_global(self) -> np.ndarray:
        return np.concatenate(self.coeffs)


def eval_function(u: MultimeshFunction, topology: CutTopology, x) -> float:
    """Value of the composite function: the topmost visible mesh wins."""
    loc = point_locate(topology, x)
    if loc is None:
        raise ValueError(f"point {x} lies outside the composite domain")
    i, cell = loc
    space = topology.parts[i].space
    return float(space.eval_in_cell(u.coeffs[i], cell, np.asarray(x, dtype=float)[None, :])[0])


def eval_or_nan(u: MultimeshFunction, topology: CutTopology, x) -> float:
    loc = point_locate(topology, x)
    if loc is None:
        return float("nan")
    i, cell = loc
    space = topology.parts[i].space
    return float(space.eval_in_cell(u.coeffs[i], cell, np.asarray(x, dtype=float)[None, :])[0])


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def _ref_rule(order: int):
    from .geom2d import triangle_rule

    bary, w = triangle_rule(order)
    return bary, bary[:, 1:], w


def error_norms(
    u_h: MultimeshFunction,
    topology: CutTopology,
    u_exact,
    grad_exact,
    order: int | None = None,
) -> tuple[float, float]:
    """(L2, H1-seminorm) errors against analytic fields, integrated piecewise
    over every visible region. grad_exact(x, y) returns an (n, 2) array."""
    if order is None:
        order = 2 * max(p.space.degree for p in topology.parts) + 2
    l2 = 0.0
    h1 = 0.0
    bary, ref_pts, w = _ref_rule(order)
    for i, part in enumerate(topology.parts):
        space = part.space
        deg = space.degree
        ci = u_h.coeffs[i]
        cells = topology.uncut_active(i)
        if len(cells):
            phi = ref_basis(deg, ref_pts)
            gref = ref_basis_grad(deg, ref_pts)
            verts = part.mesh.nodes[part.mesh.cells[cells]]
            pts = np.einsum("qv,cvk->cqk", bary, verts)
            _, _, invJ, _ = part.mesh.geometry()
            areas = part.mesh.cell_areas()[cells]
            cf = ci[space.cell_dofs[cells]]                        # (nc, nd)
            uh = np.einsum("qa,ca->cq", phi, cf)
            guh = np.einsum("qak,ckl,ca->cql", gref, invJ[cells], cf)
            x = pts[..., 0].ravel()
            y = pts[..., 1].ravel()
            ue = np.broadcast_to(np.asarray(u_exact(x, y), dtype=float), x.shape).reshape(uh.shape)
            ge = np.asarray(grad_exact(x, y), dtype=float).reshape(guh.shape)
            l2 += float(np.einsum("q,cq,c->", w, (uh - ue) ** 2, areas))
            h1 += float(np.einsum("q,cql,c->", w, (guh - ge) ** 2, areas))
        for cell, cc in topology.cut_cells[i].items():
            quad = topology.visible_quadrature(i, cell, order)
            if not len(quad.points):
                continue
            pts, wq = quad.points, quad.weights
            uh = space.eval_in_cell(ci, cell, pts)
            guh = space.grad_in_cell(ci, cell, pts)
            ue = np.broadcast_to(np.asarray(u_exact(pts[:, 0], pts[:, 1]), dtype=float), uh.shape)
            ge = np.asarray(grad_exact(pts[:, 0], pts[:, 1]), dtype=float).reshape(guh.shape)
            l2 += float(np.dot(wq, (uh - ue) ** 2))
            h1 += float(np.dot(wq, ((guh - ge) ** 2).sum(axis=1)))
    return float(np.sqrt(l2)), float(np.sqrt(h1))


@dataclass
class EnergyBreakdown:
    """The four contributions of the mesh-dependent energy norm (squared):
    visible gradients, overlap gradient jumps, scaled interface fluxes,
    scaled interface value jumps."""

    term_I: float
    term_II: float
    term_III: float
    term_IV: float

    @property
    def total(self) -> float:
        return self.term_I + self.term_II + self.term_III + self.term_IV

    @property
    def norm(self) -> float:
        return float(np.sqrt(self.total))


def energy_norm(u: MultimeshFunction, topology: CutTopology) -> EnergyBreakdown:
    """Energy norm breakdown; all terms are beta-independent."""
    h = topology.mesh_sizes()
    term_I = 0.0
    for i, part in enumerate(topology.parts):
        space = part.space
        ci = u.coeffs[i]
        for cell in topology.active[i]:
            quad = topology.visible_quadrature(i, int(cell))
            if not len(quad.points):
                continue
            g = space.grad_in_cell(ci, int(cell), quad.points)
            term_I += float(np.dot(quad.weights, (g ** 2).sum(axis=1)))

    term_II = 0.0
    for o in topology.overlaps:
        gl = topology.parts[o.lower_mesh].space.grad_in_cell(
            u.coeffs[o.lower_mesh], o.lower_cell, o.quad.points
        )
        gu = topology.parts[o.upper_mesh].space.grad_in_cell(
            u.coeffs[o.upper_mesh], o.upper_cell, o.quad.points
        )
        term_II += float(np.dot(o.quad.weights, ((gl - gu) ** 2).sum(axis=1)))

    term_III = 0.0
    term_IV = 0.0
    for f in topology.facets:
        i, j = f.upper_mesh, f.lower_mesh
        su = topology.parts[i].space
        sl = topology.parts[j].space
        gu = su.grad_in_cell(u.coeffs[i], f.upper_cell, f.quad.points)
        gl = sl.grad_in_cell(u.coeffs[j], f.lower_cell, f.quad.points)
        vu = su.eval_in_cell(u.coeffs[i], f.upper_cell, f.quad.points)
        vl = sl.eval_in_cell(u.coeffs[j], f.lower_cell, f.quad.points)
        wq = f.quad.weights
        term_III += float(
            h[i] * np.dot(wq, (gu ** 2).sum(axis=1)) + h[j] * np.dot(wq, (gl ** 2).sum(axis=1))
        )
        term_IV += float(np.dot(wq, (vu - vl) ** 2) / (h[i] + h[j]))
    return EnergyBreakdown(term_I, term_II, term_III, term_IV)


def h_norm(u: MultimeshFunction, topology: CutTopology) -> float:
    """L2 norm over the full active domains (overlaps counted per mesh)."""
    total = 0.0
    for i, part in enumerate(topology.parts):
        space = part.space
        bary, ref_pts, w = _ref_rule(2 * space.degree)
        cells = topology.active[i]
        if not len(cells):
            continue
        phi = ref_basis(space.degree, ref_pts)
        cf = u.coeffs[i][space.cell_dofs[cells]]
        vals = np.einsum("qa,ca->cq", phi, cf)
        areas = part.mesh.cell_areas()[cells]
        total += float(np.einsum("q,cq,c->", w, vals ** 2, areas))
    return float(np.sqrt(total))


def global_interpolant(topology: CutTopology, f) -> MultimeshFunction:
    """Per-mesh nodal interpolation over each full active mesh."""
    return MultimeshFunction([nodal_interpolate(p.space, f) for p in topology.parts])


# ---------------------------------------------------------------------------
# Diagnostics and reports
# ---------------------------------------------------------------------------

@dataclass
class Diagnostics:
    N_O: int
    N_Oi: np.ndarray
    C_hN: float
    C_P: float
    gamma_len: np.ndarray


def diagnostics(topology: CutTopology) -> Diagnostics:
    """Overlap counts and the interpolation/conditioning constants (d = 2)."""
    h = topology.mesh_sizes()
    n_oi = topology.N_Oi.astype(float)
    c_hn = 1.0 + float(np.max(h ** 2 * n_oi)) + float(np.max(h * topology.gamma_len))
    c_p = 1.0 + float(np.max(h * n_oi)) + float(np.max(h ** 2 * n_oi))
    return Diagnostics(topology.N_O, topology.N_Oi.copy(), c_hn, c_p, topology.gamma_len.copy())


@dataclass
class ErrorReport:
    config: str
    degree: int
    h: tuple[float, ...]
    dofs: int
    l2_err: float
    h1_err: float
    energy: EnergyBreakdown
    N_O: int
    C_hN: float
    C_P: float
    kappa: float | None = None


def csv_header(nparts: int) -> list[str]:
    return (
        ["config", "p"]
        + [f"h{i}" for i in range(nparts)]
        + [
            "dofs",
            "l2_err",
            "h1_err",
            "energy_I",
            "energy_II",
            "energy_III",
            "energy_IV",
            "kappa",
            "N_O",
            "C_hN",
            "C_P",
        ]
    )


def csv_row(report: ErrorReport) -> list[str]:
    fmt = lambda v: f"{v:.17g}"
    return (
        [report.config, str(report.degree)]
        + [fmt(v) for v in report.h]
        + [
            str(report.dofs),
            fmt(report.l2_err),
            fmt(report.h1_err),
            fmt(report.energy.term_I),
            fmt(report.energy.term_II),
            fmt(report.energy.term_III),
            fmt(report.energy.term_IV),
            "" if report.kappa is None else fmt(report.kappa),
            str(report.N_O),
            fmt(report.C_hN),
            fmt(report.C_P),
        ]
    )
