"""Assembly of the stabilized trace finite element system.

The bilinear form is the surface H1 product on the discrete surface plus a
stabilization: either the normal-gradient volume penalty integrated over the
full cut cells ("nv"), or the gradient-jump face penalty on internal faces
between cut cells ("jf").  For degree 2 the face variant additionally
penalizes the surface normal derivative and second-order jumps, which is
required for optimal conditioning of the richer trace space.

Everything is vectorized across cells in chunks; per-chunk local matrices go
through a sparse accumulator so peak memory stays bounded.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import basis
from .errors import ConfigError

STAB_KINDS = ("nv", "jf")
_CHUNK_ELEMS = 4_000_000  # target float elements of the largest chunk buffer


@dataclass
class StabilizationConfig:
    """Stabilization choice and strengths.

    ``rho_scale`` enters the volume penalty as ``rho_scale / h_S``; ``sigma``
    is the O(1) face penalty, also used for the degree-2 extra terms.
    ``sigma_face``, when set, overrides ``sigma`` for the first-order
    gradient-jump face term only, so the face penalty can be swept while the
    extra degree-2 weights stay fixed.
    """

    kind: str
    rho_scale: float = 10.0
    sigma: float = 1.0
    sigma_face: float = None

    def __post_init__(self):
        if self.kind not in STAB_KINDS:
            raise ConfigError(f"unknown stabilization {self.kind!r}, expected one of {STAB_KINDS}")
        if self.sigma_face is None:
            self.sigma_face = self.sigma
        if self.rho_scale <= 0 or self.sigma <= 0 or self.sigma_face <= 0:
            raise ConfigError("stabilization parameters must be positive")


@dataclass
class TraceSystem:
    """Condensed linear system with the hanging-node prolongation."""

    matrix: sp.csr_matrix      # nfree x nfree, symmetric positive definite
    rhs: np.ndarray            # (nfree,)
    prolongation: sp.csr_matrix  # ndof x nfree
    free_dofs: np.ndarray
    ndof: int
    # polynomial values at the free dof nodes; low-energy modes of the
    # stabilized operator, passed to the multigrid setup as aggregation
    # candidates (jump penalties vanish on polynomials of full degree)
    candidates: np.ndarray = None

    @property
    def nfree(self):
        return self.matrix.shape[0]

    def expand(self, u_free):
        """Full coefficient vector (constrained dofs filled in)."""
        return self.prolongation @ u_free

    def restrict(self, u_full):
        return u_full[self.free_dofs]


class _SparseAccumulator:
    def __init__(self, ndof):
        self.ndof = ndof
        self.mat = sp.csr_matrix((ndof, ndof))
        self._rows, self._cols, self._vals = [], [], []
        self._pending = 0

    def add_block(self, dofs, local):
        """dofs (nc, m), local (nc, m, m)."""
        nc, m = dofs.shape
        self._rows.append(np.repeat(dofs, m, axis=1).ravel())
        self._cols.append(np.tile(dofs, (1, m)).ravel())
        self._vals.append(local.reshape(-1))
        self._pending += nc * m * m
        if self._pending > 8_000_000:
            self.flush()

    def flush(self):
        if not self._vals:
            return
        coo = sp.coo_matrix(
            (np.concatenate(self._vals),
             (np.concatenate(self._rows), np.concatenate(self._cols))),
            shape=(self.ndof, self.ndof))
        self.mat = self.mat + coo.tocsr()
        self._rows, self._cols, self._vals = [], [], []
        self._pending = 0

    def result(self):
        self.flush()
        return self.mat


def _chunks(n, size):
    for c0 in range(0, n, size):
        yield c0, min(c0 + size, n)


def _levelset_coef(cls, cells):
    """Level-set Lagrange coefficients (nc, nloc) for the given cut cells."""
    nc = len(cells)
    return cls.field.cell_coef_tensor(cells).reshape(nc, -1)


def _cell_sizes(mesh, cells):
    return np.array([mesh.cell_size(c[0]) for c in cells])


def _unit_normals(g):
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norms


# ---------------------------------------------------------------------------
# face machinery (shared with the error indicator)

def _grouped_faces(mesh, cells):
    """Internal faces between ``cells`` grouped by axis.

    Returns a list of (axis, minus list, plus list, centers (nf,3), h_f (nf,)).
    """
    fminus, fplus, faxis, fcenter, fh = mesh.internal_face_arrays(cells)
    groups = []
    for axis in range(3):
        sel = faxis == axis
        if not np.any(sel):
            continue
        groups.append((axis,
                       [tuple(c) for c in fminus[sel].tolist()],
                       [tuple(c) for c in fplus[sel].tolist()],
                       fcenter[sel],
                       fh[sel]))
    return groups


def _face_point_grid(axis, centers, h_f, order):
    """Physical quadrature points (nf, P, 3) and weights (nf, P) on faces."""
    g, w = basis.gauss_1d(order)
    t1, t2 = np.meshgrid(g, g, indexing="ij")
    w2 = np.outer(w, w).ravel()
    b1, b2 = [a for a in range(3) if a != axis]
    nf = len(h_f)
    pts = np.broadcast_to(centers[:, None, :], (nf, order ** 2, 3)).copy()
    pts[:, :, b1] += (t1.ravel()[None, :] - 0.5) * h_f[:, None]
    pts[:, :, b2] += (t2.ravel()[None, :] - 0.5) * h_f[:, None]
    return pts, w2[None, :] * h_f[:, None] ** 2


def _face_jump_data(mesh, dofmap, group, order, need_hess):
    """Jump operators on one axis group of faces.

    Returns ``(dofs (nf, 2*nloc), w (nf, P), J (nf, P, 2*nloc, 3), J2)``
    where ``J @ u`` is the gradient jump at each face point and ``J2 @ u``
    (present when ``need_hess``) is the n_F.hess.n_F jump.
    """
    axis, minus, plus, centers, h_f = group
    pts, w = _face_point_grid(axis, centers, h_f, order)
    nf, P, _ = pts.shape
    mrows = np.array([dofmap.cell_index[c] for c in minus])
    prows = np.array([dofmap.cell_index[c] for c in plus])
    dofs = np.concatenate([dofmap.cell_dofs[mrows], dofmap.cell_dofs[prows]], axis=1)
    k = dofmap.degree
    J_sides, J2_sides = [], []
    for rows, cell_list, sign in ((mrows, minus, 1.0), (prows, plus, -1.0)):
        h = _cell_sizes(mesh, cell_list)
        lo = np.array([mesh.cell_lo(c) for c in cell_list])
        ref = (pts - lo[:, None, :]) / h[:, None, None]
        _, grads, hess = basis.tensor_basis(k, ref.reshape(-1, 3), hessians=need_hess)
        grads = grads.reshape(nf, P, -1, 3) / h[:, None, None, None]
        J_sides.append(sign * grads)
        if need_hess:
            haa = hess.reshape(nf, P, -1, 3, 3)[..., axis, axis] / h[:, None, None] ** 2
            J2_sides.append(sign * haa)
    J = np.concatenate(J_sides, axis=2)
    J2 = np.concatenate(J2_sides, axis=2) if need_hess else None
    return dofs, w, J, J2


# ---------------------------------------------------------------------------
# global system

def assemble(cls, dofmap, constraints, stab, f, quad_order=None):
    """Assemble the condensed stabilized trace system.

    ``cls`` supplies the cut cells and their surface quadratures, ``dofmap``
    is the solution space over exactly those cells and ``f`` maps physical
    points (n, 3) to source values (n,), already composed with the
    closest-point projection.
    """
    mesh = dofmap.mesh
    k = dofmap.degree
    if quad_order is None:
        quad_order = k + 1
    cells = cls.cut_cells
    if list(dofmap.cells) != list(cells):
        raise ValueError("dofmap must be built over the cut cells")
    nc = len(cells)
    nloc = (k + 1) ** 3
    acc = _SparseAccumulator(dofmap.ndof)
    b = np.zeros(dofmap.ndof)
    lsc = _levelset_coef(cls, cells)
    hs = _cell_sizes(mesh, cells)
    jf2 = stab.kind == "jf" and k == 2
    npts = np.diff(cls.offsets)
    chunk = max(1, int(_CHUNK_ELEMS / (max(1, npts.max()) * nloc ** 2)))

    for c0, c1 in _chunks(nc, chunk):
        s = slice(cls.offsets[c0], cls.offsets[c1])
        ref = cls.qref[s]
        w = cls.qweights[s]
        pidx = np.repeat(np.arange(c0, c1), npts[c0:c1])
        vals, grads, hess = basis.tensor_basis(k, ref, hessians=jf2)
        hp = hs[pidx]
        gphys = grads / hp[:, None, None]
        g = np.einsum("pl,plk->pk", lsc[pidx], grads) / hp[:, None]
        n = _unit_normals(g)
        ngrad = np.einsum("pk,plk->pl", n, gphys)
        tg = gphys - n[:, None, :] * ngrad[:, :, None]
        local = np.einsum("p,pl,pm->plm", w, vals, vals)
        local += np.einsum("p,plk,pmk->plm", w, tg, tg)
        if jf2:
            local += stab.sigma * np.einsum("p,pl,pm->plm", w, ngrad, ngrad)
            hphys = hess / hp[:, None, None, None] ** 2
            nhn = np.einsum("pi,plij,pj->pl", n, hphys, n)
            local += stab.sigma * np.einsum("p,pl,pm->plm", w * hp ** 2, nhn, nhn)
        seg = (cls.offsets[c0:c1] - cls.offsets[c0]).astype(np.intp)
        acc.add_block(dofmap.cell_dofs[c0:c1], np.add.reduceat(local, seg, axis=0))
        fv = np.asarray(f(cls.qpoints[s]), dtype=float)
        np.add.at(b, dofmap.cell_dofs[c0:c1].ravel(),
                  np.add.reduceat(w[:, None] * fv[:, None] * vals, seg, axis=0).ravel())

    if stab.kind == "nv":
        _assemble_nv(acc, mesh, dofmap, lsc, hs, stab, quad_order)
    else:
        _assemble_jf(acc, mesh, dofmap, stab, quad_order, jf2)

    A = acc.result()
    C = constraints.matrix()
    A_ff = (C.T @ A @ C).tocsr()
    free = constraints.free_dofs()
    return TraceSystem(A_ff, C.T @ b, C, free, dofmap.ndof,
                       candidates=_poly_candidates(dofmap.points[free], k))


def _poly_candidates(pts, k):
    cols = [np.ones(len(pts)), pts]
    if k >= 2:
        cols += [pts ** 2, pts[:, [0]] * pts[:, [1]],
                 pts[:, [0]] * pts[:, [2]], pts[:, [1]] * pts[:, [2]]]
    return np.column_stack(cols)


def _nv_point_ops(mesh, dofmap, lsc, hs, sel, order):
    """Normal-derivative operator on a tensor Gauss grid of full cells.

    Returns (w_phys (nc, G), nd (nc, G, nloc)) for cell rows ``sel``.
    """
    k = dofmap.degree
    g, w1 = basis.gauss_1d(order)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    gpts = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])
    wz, wy, wx = np.meshgrid(w1, w1, w1, indexing="ij")
    wg = (wx * wy * wz).ravel()
    _, gref, _ = basis.tensor_basis(k, gpts)
    h = hs[sel]
    gls = np.einsum("cl,plk->cpk", lsc[sel], gref) / h[:, None, None]
    n = _unit_normals(gls)
    nd = np.einsum("cpk,plk->cpl", n, gref) / h[:, None, None]
    return wg[None, :] * h[:, None] ** 3, nd


def _assemble_nv(acc, mesh, dofmap, lsc, hs, stab, order):
    nc = len(dofmap.cells)
    G = order ** 3
    nloc = (dofmap.degree + 1) ** 3
    chunk = max(1, int(_CHUNK_ELEMS / (G * nloc ** 2)))
    for c0, c1 in _chunks(nc, chunk):
        sel = np.arange(c0, c1)
        w, nd = _nv_point_ops(mesh, dofmap, lsc, hs, sel, order)
        rho = stab.rho_scale / hs[sel]
        local = np.einsum("cp,cpl,cpm->clm", rho[:, None] * w, nd, nd)
        acc.add_block(dofmap.cell_dofs[c0:c1], local)


def _assemble_jf(acc, mesh, dofmap, stab, order, jf2):
    # each face is visited once here, while the bilinear form sums it from
    # both adjacent cells, hence the factor 2
    for group in _grouped_faces(mesh, dofmap.cells):
        dofs, w, J, J2 = _face_jump_data(mesh, dofmap, group, order, jf2)
        nf = len(dofs)
        chunk = max(1, int(_CHUNK_ELEMS / (w.shape[1] * (2 * J.shape[2]) ** 2)))
        for f0, f1 in _chunks(nf, chunk):
            local = 2.0 * stab.sigma_face * np.einsum(
                "fp,fplk,fpmk->flm", w[f0:f1], J[f0:f1], J[f0:f1])
            if jf2:
                h_f = group[4][f0:f1]
                local += 2.0 * stab.sigma * np.einsum(
                    "fp,fpl,fpm->flm", w[f0:f1] * h_f[:, None] ** 2, J2[f0:f1], J2[f0:f1])
            acc.add_block(dofs[f0:f1], local)


# ---------------------------------------------------------------------------
# per-cell stabilization energies (single-count faces), used by the indicator

def stab_energies(cls, dofmap, stab, u, quad_order=None):
    """s*_S(u, u) for every cut cell, as an array aligned with ``cls.cut_cells``.

    Face contributions are counted once per adjacent cell, matching the
    cell-local definition of the stabilization form.
    """
    mesh = dofmap.mesh
    k = dofmap.degree
    if quad_order is None:
        quad_order = k + 1
    cells = cls.cut_cells
    nc = len(cells)
    out = np.zeros(nc)
    lsc = _levelset_coef(cls, cells)
    hs = _cell_sizes(mesh, cells)
    jf2 = stab.kind == "jf" and k == 2

    if stab.kind == "nv":
        chunk = max(1, int(_CHUNK_ELEMS / (quad_order ** 3 * (k + 1) ** 3)))
        for c0, c1 in _chunks(nc, chunk):
            sel = np.arange(c0, c1)
            w, nd = _nv_point_ops(mesh, dofmap, lsc, hs, sel, quad_order)
            uv = u[dofmap.cell_dofs[c0:c1]]
            du = np.einsum("cpl,cl->cp", nd, uv)
            out[c0:c1] = (stab.rho_scale / hs[sel]) * np.einsum("cp,cp->c", w, du ** 2)
        return out

    for group in _grouped_faces(mesh, cells):
        dofs, w, J, J2 = _face_jump_data(mesh, dofmap, group, quad_order, jf2)
        ju = np.einsum("fplk,fl->fpk", J, u[dofs])
        e = stab.sigma_face * np.einsum("fp,fp->f", w, np.sum(ju ** 2, axis=-1))
        if jf2:
            j2u = np.einsum("fpl,fl->fp", J2, u[dofs])
            e += stab.sigma * np.einsum("fp,fp->f", w * group[4][:, None] ** 2, j2u ** 2)
        _, minus, plus, _, _ = group
        for clist in (minus, plus):
            rows = np.array([dofmap.cell_index[c] for c in clist])
            np.add.at(out, rows, e)
    if jf2:
        npts = np.diff(cls.offsets)
        pidx = np.repeat(np.arange(nc), npts)
        chunk = max(1, int(_CHUNK_ELEMS / ((k + 1) ** 3 * 9)))
        for c0, c1 in _chunks(nc, chunk):
            s = slice(cls.offsets[c0], cls.offsets[c1])
            ref = cls.qref[s]
            w = cls.qweights[s]
            pi = pidx[s]
            vals, grads, hess = basis.tensor_basis(k, ref, hessians=True)
            hp = hs[pi]
            uv = u[dofmap.cell_dofs[pi]]
            g = np.einsum("pl,plk->pk", lsc[pi], grads) / hp[:, None]
            n = _unit_normals(g)
            du = np.einsum("pl,plk->pk", uv, grads) / hp[:, None]
            ndu = np.einsum("pk,pk->p", n, du)
            hu = np.einsum("pl,plij->pij", uv, hess) / hp[:, None, None] ** 2
            nhun = np.einsum("pi,pij,pj->p", n, hu, n)
            e = stab.sigma * w * (ndu ** 2 + hp ** 2 * nhun ** 2)
            seg = (cls.offsets[c0:c1] - cls.offsets[c0]).astype(np.intp)
            out[c0:c1] += np.add.reduceat(e, seg)
    return out


def face_jump_energies(cls, dofmap, u, quad_order=None):
    """Unweighted gradient-jump energies per cut cell (both sides credited).

    This is the face part of the error indicator: for each cell the sum of
    ``|[[grad u]]|^2`` integrals over its internal faces shared with other
    cut cells.
    """
    k = dofmap.degree
    if quad_order is None:
        quad_order = k + 1
    mesh = dofmap.mesh
    cells = cls.cut_cells
    out = np.zeros(len(cells))
    for group in _grouped_faces(mesh, cells):
        dofs, w, J, _ = _face_jump_data(mesh, dofmap, group, quad_order, False)
        ju = np.einsum("fplk,fl->fpk", J, u[dofs])
        e = np.einsum("fp,fp->f", w, np.sum(ju ** 2, axis=-1))
        _, minus, plus, _, _ = group
        for clist in (minus, plus):
            rows = np.array([dofmap.cell_index[c] for c in clist])
            np.add.at(out, rows, e)
    return out
