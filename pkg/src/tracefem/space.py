"""Continuous Q1/Q2 Lagrangian spaces on a subset of active octree cells.

Support points are deduplicated by exact dyadic integer keys, so dofs shared
between cells (including across refinement levels) carry one global index
without any floating-point comparisons.
"""

import numpy as np
import scipy.sparse as sp

from . import basis

KEY_LEVEL = 40  # canonical dyadic scale for node keys


class DofMap:
    """Global dof enumeration over ``cells`` for the Q_k element."""

    def __init__(self, mesh, cells, degree, cell_dofs, ndof, keys, points):
        self.mesh = mesh
        self.cells = cells            # sorted list of Cell
        self.degree = degree
        self.cell_dofs = cell_dofs    # (ncells, (k+1)^3) int
        self.ndof = ndof
        self.keys = keys              # (ndof, 3) canonical integer keys
        self.points = points          # (ndof, 3) physical support points
        self.cell_index = {c: i for i, c in enumerate(cells)}

    def node_scale(self):
        return self.mesh.n0 * self.degree * (1 << KEY_LEVEL)


def _cell_node_keys(cells_arr, degree):
    """Canonical node keys for cells (nc, 4) -> (nc, nloc, 3) int64."""
    k = degree
    n1 = k + 1
    levels = cells_arr[:, 0]
    shift = (KEY_LEVEL - levels).astype(np.int64)
    m = np.arange(n1, dtype=np.int64)
    mz, my, mx = np.meshgrid(m, m, m, indexing="ij")
    local = np.stack([mx.ravel(), my.ravel(), mz.ravel()], axis=-1)  # (nloc, 3)
    anchors = cells_arr[:, 1:4].astype(np.int64)
    keys = (anchors[:, None, :] * k + local[None, :, :]) << shift[:, None, None]
    return keys


def build(mesh, cells, degree):
    """Enumerate the dofs of the Q_k space over ``cells``."""
    if degree not in basis.SUPPORTED_DEGREES:
        raise ValueError(f"degree must be one of {basis.SUPPORTED_DEGREES}")
    cells = sorted(cells)
    if not cells:
        raise ValueError("empty cell set")
    cells_arr = np.array(cells, dtype=np.int64)
    keys = _cell_node_keys(cells_arr, degree)  # (nc, nloc, 3)
    flat = keys.reshape(-1, 3)
    # node keys share the factor 2^(KEY_LEVEL - finest level); packing the
    # reduced keys into plain integers keeps the dedup sort type-specialized
    ds = KEY_LEVEL - int(cells_arr[:, 0].max())
    red = flat >> ds
    bits = max(1, int(red.max()).bit_length())
    if 3 * bits <= 62:
        packed = (red[:, 0] << (2 * bits)) | (red[:, 1] << bits) | red[:, 2]
        order = np.argsort(packed, kind="stable")
        sp_ = packed[order]
        new = np.empty(len(order), dtype=bool)
        new[0] = True
        new[1:] = sp_[1:] != sp_[:-1]
    else:
        if 2 * bits > 62:
            raise ValueError("mesh refinement exceeds the node key range")
        ka, kb = red[:, 0], (red[:, 1] << bits) | red[:, 2]
        order = np.lexsort((kb, ka))
        sa, sb = ka[order], kb[order]
        new = np.empty(len(order), dtype=bool)
        new[0] = True
        new[1:] = (sa[1:] != sa[:-1]) | (sb[1:] != sb[:-1])
    gid = np.cumsum(new) - 1
    inv = np.empty(len(order), dtype=np.int64)
    inv[order] = gid
    cell_dofs = inv.reshape(keys.shape[:2])
    ukeys = flat[order[new]]
    scale = mesh.n0 * degree * (1 << KEY_LEVEL)
    points = mesh.lo[None, :] + (ukeys / scale) * mesh.width
    return DofMap(mesh, cells, degree, cell_dofs, len(ukeys), ukeys, points)


class ConstraintSet:
    """Hanging-node constraints, closed under substitution.

    ``rows`` maps a constrained dof to its list of (master, coefficient);
    masters are never constrained themselves.
    """

    def __init__(self, rows, ndof):
        self.rows = rows
        self.ndof = ndof
        self._matrix = None
        self._free = None

    def __len__(self):
        return len(self.rows)

    def free_dofs(self):
        self._build()
        return self._free

    def matrix(self):
        """Sparse prolongation C (ndof x nfree) with u_full = C @ u_free."""
        self._build()
        return self._matrix

    def _build(self):
        if self._matrix is not None:
            return
        constrained = set(self.rows)
        free = np.array([d for d in range(self.ndof) if d not in constrained], dtype=np.int64)
        col_of = {int(d): c for c, d in enumerate(free)}
        ri, ci, vv = [], [], []
        for c, d in enumerate(free):
            ri.append(d)
            ci.append(c)
            vv.append(1.0)
        for d, terms in self.rows.items():
            for m, a in terms:
                ri.append(d)
                ci.append(col_of[int(m)])
                vv.append(a)
        self._matrix = sp.csr_matrix((vv, (ri, ci)), shape=(self.ndof, len(free)))
        self._free = free

    def apply_to_values(self, values):
        """Overwrite constrained entries from their masters, in place."""
        for d, terms in self.rows.items():
            values[d] = sum(a * values[m] for m, a in terms)
        return values


def build_constraints(mesh, dofmap):
    """Constraints gluing fine-side dofs to coarse faces of the dof cells.

    Requires a 2:1 balanced mesh (level gap one across every interface).
    """
    k = dofmap.degree
    n1 = k + 1
    fminus, fplus, faxis, _, _ = mesh.internal_face_arrays(dofmap.cells)
    hang = fminus[:, 0] != fplus[:, 0]
    rows = {}
    # local indices of the fine-side nodes lying on a face: axis coordinate 0 or k
    face_locals = {}
    for axis in range(3):
        for side in (0, 1):
            sel = []
            for mz in range(n1):
                for my in range(n1):
                    for mx in range(n1):
                        m = (mx, my, mz)
                        if m[axis] == (0 if side == 0 else k):
                            sel.append((mz * n1 + my) * n1 + mx)
            face_locals[axis, side] = np.array(sel, dtype=np.int64)
    cells_arr = np.array(dofmap.cells, dtype=np.int64)
    all_keys = _cell_node_keys(cells_arr, k)
    for mc, pc, fx in zip(fminus[hang].tolist(), fplus[hang].tolist(),
                          faxis[hang].tolist()):
        lm, lp = mc[0], pc[0]
        if abs(lm - lp) != 1:
            raise ValueError("mesh is not 2:1 balanced")
        if lm > lp:
            fine, coarse, side = tuple(mc), tuple(pc), 1
        else:
            fine, coarse, side = tuple(pc), tuple(mc), 0
        fi = dofmap.cell_index[fine]
        ci = dofmap.cell_index[coarse]
        sel = face_locals[fx, side]
        fkeys = all_keys[fi][sel]                      # (nsel, 3)
        fdofs = dofmap.cell_dofs[fi][sel]
        lc = coarse[0]
        denom = 1 << (KEY_LEVEL - lc)
        origin = np.array(coarse[1:4], dtype=np.int64) * k * denom
        rel = fkeys - origin[None, :]                  # in units of denom/k per cell
        on_lattice = (rel % denom == 0).all(axis=1)
        t = rel / (denom * k)                          # coarse reference coords
        vals, _, _ = basis.tensor_basis(k, t)
        masters = dofmap.cell_dofs[ci]
        for idx in range(len(sel)):
            if on_lattice[idx]:
                continue  # geometrically shared node, same key, same dof
            d = int(fdofs[idx])
            if d in rows:
                continue
            terms = [(int(masters[j]), float(vals[idx, j]))
                     for j in range(len(masters)) if abs(vals[idx, j]) > 1e-13]
            rows[d] = terms
    # close under substitution so no master is itself constrained
    for _ in range(10):
        dirty = False
        for d, terms in rows.items():
            if any(m in rows for m, _ in terms):
                agg = {}
                for m, a in terms:
                    if m in rows:
                        for mm, aa in rows[m]:
                            agg[mm] = agg.get(mm, 0.0) + a * aa
                    else:
                        agg[m] = agg.get(m, 0.0) + a
                rows[d] = [(m, a) for m, a in agg.items() if abs(a) > 1e-13]
                dirty = True
        if not dirty:
            break
    else:
        raise RuntimeError("constraint substitution did not terminate")
    return ConstraintSet(rows, dofmap.ndof)


def evaluate(dofmap, cell, point):
    """Basis values, physical gradients and Hessians at a point in ``cell``."""
    mesh = dofmap.mesh
    h = mesh.cell_size(cell[0])
    ref = (np.asarray(point, dtype=float) - mesh.cell_lo(cell)) / h
    if np.any(ref < -1e-12) or np.any(ref > 1 + 1e-12):
        raise ValueError(f"point {point} outside cell {cell}")
    vals, grads, hess = basis.tensor_basis(dofmap.degree, ref[None, :], hessians=True)
    return vals[0], grads[0] / h, hess[0] / h ** 2
