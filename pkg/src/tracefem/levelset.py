"""Continuous level-set interpolant, cut classification and surface normals.

The discrete surface is the zero set of the degree-k Lagrange interpolant of
the level-set function; hanging-node constraints make the interpolant (and
hence the surface) gap-free across coarse-fine interfaces.  The interpolant
degree always equals the solution degree.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import basis, quadrature, space
from .errors import GeometryError

INTERIOR, CUT, EXTERIOR = -1, 0, 1


class LevelSetField:
    """Per-cell polynomial coefficients of the constrained interpolant."""

    def __init__(self, mesh, degree, dofmap, values):
        self.mesh = mesh
        self.degree = degree
        self.dofmap = dofmap
        self.values = values
        self._coef = values[dofmap.cell_dofs]  # (ncells, nloc)

    def cell_coef(self, cell):
        return self._coef[self.dofmap.cell_index[cell]]

    def cell_coef_tensor(self, cells):
        """(nc, n1, n1, n1) coefficient blocks ordered [z, y, x]."""
        n1 = self.degree + 1
        rows = np.array([self.dofmap.cell_index[c] for c in cells], dtype=np.int64)
        return self._coef[rows].reshape(len(cells), n1, n1, n1)

    def _locate(self, x):
        cell = self.mesh.active_cell_at(x)
        h = self.mesh.cell_size(cell[0])
        ref = (np.asarray(x, dtype=float) - self.mesh.cell_lo(cell)) / h
        return cell, h, ref

    def __call__(self, x):
        cell, _, ref = self._locate(x)
        vals, _, _ = basis.tensor_basis(self.degree, ref[None, :])
        return float(self.cell_coef(cell) @ vals[0])

    def gradient(self, x):
        cell, h, ref = self._locate(x)
        _, grads, _ = basis.tensor_basis(self.degree, ref[None, :])
        return (self.cell_coef(cell) @ grads[0]) / h

    def hessian(self, x):
        cell, h, ref = self._locate(x)
        _, _, hess = basis.tensor_basis(self.degree, ref[None, :], hessians=True)
        return np.einsum("l,lij->ij", self.cell_coef(cell), hess[0]) / h ** 2

    def normal(self, x):
        """Unit normal grad(phi)/|grad(phi)| at ``x``."""
        cell, h, _ = self._locate(x)
        g = self.gradient(x)
        norm = np.linalg.norm(g)
        if norm <= 1e-10 / h:
            raise GeometryError(f"degenerate level-set gradient at {x}", cell=cell)
        return g / norm

    def normal_jacobian(self, x):
        """grad(n) = (I - n n^T) hess(phi) / |grad(phi)| at ``x``."""
        n = self.normal(x)
        g = self.gradient(x)
        hessm = self.hessian(x)
        return (np.eye(3) - np.outer(n, n)) @ hessm / np.linalg.norm(g)


@dataclass
class CutClassification:
    """Cell tags against the discrete surface plus the cut-cell quadratures.

    ``tags`` maps every active cell to INTERIOR/CUT/EXTERIOR; ``cut_cells``
    is sorted; the flat quadrature arrays are ordered by ``cut_cells`` with
    ``offsets[i]:offsets[i+1]`` the slice of cell i.
    """

    tags: dict
    cut_cells: list
    offsets: np.ndarray
    qpoints: np.ndarray
    qref: np.ndarray
    qweights: np.ndarray
    field: LevelSetField = dc_field(repr=False, default=None)

    def rule(self, cell):
        i = self.cut_cells.index(cell)
        s = slice(self.offsets[i], self.offsets[i + 1])
        return quadrature.SurfaceQuadrature(cell, self.qpoints[s], self.qref[s], self.qweights[s])


def interpolate(phi, mesh, degree):
    """Constrained Lagrange interpolant of ``phi`` over all active cells.

    ``phi`` is evaluated at the unconstrained support points; hanging-node
    coefficients are then overwritten from the coarse side so the field is
    continuous (no gaps in the discrete surface).
    """
    dofmap = space.build(mesh, mesh.sorted_active(), degree)
    pts = dofmap.points
    try:
        values = np.asarray(phi(pts), dtype=float)
        if values.shape != (len(pts),):
            raise TypeError
    except TypeError:
        values = np.array([float(phi(p)) for p in pts])
    if not np.all(np.isfinite(values)):
        raise ValueError("level-set function must be finite on the domain")
    constraints = space.build_constraints(mesh, dofmap)
    constraints.apply_to_values(values)
    return LevelSetField(mesh, degree, dofmap, values)


def classify(fld, mesh, order=None, axis_clearance=0.0):
    """Tag every active cell as interior, exterior or cut.

    A cell is cut iff its support values change sign or the surface
    quadrature generator returns a nonempty rule for it; Bernstein bounds
    prune cells that certifiably do not touch the zero level.
    """
    cells = mesh.sorted_active()
    ct = fld.cell_coef_tensor(cells)
    bern = basis.lagrange_to_bernstein(fld.degree, ct)
    bmin, bmax = basis.bernstein_range(bern)
    tags = {}
    candidates = []
    for i, cell in enumerate(cells):
        if bmax[i] < 0.0:
            tags[cell] = INTERIOR
        elif bmin[i] > 0.0:
            tags[cell] = EXTERIOR
        else:
            candidates.append(cell)
    offsets, pts, ref, w = quadrature.surface_rules_flat(
        fld, candidates, order=order, axis_clearance=axis_clearance)
    centers = np.mean(ct.reshape(len(cells), -1), axis=1)
    cut_cells = []
    keep = []
    for j, cell in enumerate(candidates):
        if offsets[j + 1] > offsets[j]:
            tags[cell] = CUT
            cut_cells.append(cell)
            keep.append(j)
        else:
            i = fld.dofmap.cell_index[cell]
            tags[cell] = INTERIOR if centers[i] < 0.0 else EXTERIOR
    # candidates are sorted, so cut_cells is sorted and slices stay ordered
    if keep:
        parts = [np.arange(offsets[j], offsets[j + 1]) for j in keep]
        sel = np.concatenate(parts)
        counts = np.array([offsets[j + 1] - offsets[j] for j in keep])
        new_offsets = np.concatenate([[0], np.cumsum(counts)])
        cls = CutClassification(tags, cut_cells, new_offsets, pts[sel], ref[sel], w[sel])
    else:
        cls = CutClassification(tags, [], np.zeros(1, dtype=np.int64),
                                np.empty((0, 3)), np.empty((0, 3)), np.empty(0))
    cls.field = fld
    return cls


def face_is_cut(fld, face):
    """Whether the discrete surface may intersect the face rectangle.

    Uses the fine-side restriction of the level set in Bernstein form; mixed
    coefficient signs count as cut (a certified overestimate).
    """
    fine_is_minus = face.minus_cell[0] >= face.plus_cell[0]
    fine = face.minus_cell if fine_is_minus else face.plus_cell
    side = 1 if fine_is_minus else 0
    k = fld.degree
    ct = fld.cell_coef_tensor([fine])[0]
    tdim = {0: 2, 1: 1, 2: 0}[face.axis]
    sl = [slice(None)] * 3
    sl[tdim] = -1 if side == 1 else 0
    fvals = ct[tuple(sl)]
    m = basis._l2b_matrix(k)
    b = m @ fvals @ m.T
    return bool(b.min() < 0.0 < b.max())
