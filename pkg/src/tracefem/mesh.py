"""Balanced octree tessellation of an axis-aligned cube.

Cells are addressed by ``(level, i, j, k)`` with integer anchors in
``[0, n0 * 2**level)`` per axis, so refinement histories are exactly
reproducible.  Face-adjacent active cells differ by at most one level
(2:1 balance); edge/corner neighbors are not constrained.
"""

from dataclasses import dataclass

import numpy as np

Cell = tuple  # (level, i, j, k)


@dataclass(frozen=True)
class Face:
    """An end-level internal face between two active cells.

    ``minus_cell`` is on the lower-coordinate side of ``axis``.  The face
    rectangle always equals the geometric face of the finer adjacent cell,
    and ``h_f`` is the finer cell size.
    """

    minus_cell: Cell
    plus_cell: Cell
    axis: int
    center: tuple
    h_f: float

    @property
    def extent(self):
        lo = np.array(self.center)
        hi = np.array(self.center)
        for a in range(3):
            if a != self.axis:
                lo[a] -= 0.5 * self.h_f
                hi[a] += 0.5 * self.h_f
        return lo, hi


class OctreeMesh:
    def __init__(self, lo, width, n0, active):
        self.lo = np.asarray(lo, dtype=float)
        self.width = float(width)
        self.n0 = int(n0)
        self.active = active  # set of Cell
        self.max_level = max(c[0] for c in active) if active else 0

    # -- construction -------------------------------------------------------

    @classmethod
    def create_uniform(cls, bounds, n0):
        """Uniform n0^3 grid over a cubic domain ``bounds = (lo, hi)``.

        ``lo``/``hi`` may be scalars or 3-vectors; the domain must be a cube.
        """
        lo, hi = bounds
        lo = np.full(3, lo, dtype=float) if np.isscalar(lo) else np.asarray(lo, dtype=float)
        hi = np.full(3, hi, dtype=float) if np.isscalar(hi) else np.asarray(hi, dtype=float)
        widths = hi - lo
        if not np.allclose(widths, widths[0]) or widths[0] <= 0:
            raise ValueError("domain must be a cube with positive extent")
        if n0 < 1:
            raise ValueError("n0 must be >= 1")
        active = {(0, i, j, k) for i in range(n0) for j in range(n0) for k in range(n0)}
        return cls(lo, widths[0], n0, active)

    # -- basic queries -------------------------------------------------------

    def cell_size(self, level):
        return self.width / (self.n0 << level)

    def cells_per_axis(self, level):
        return self.n0 << level

    def cell_lo(self, cell):
        level, i, j, k = cell
        h = self.cell_size(level)
        return self.lo + h * np.array([i, j, k], dtype=float)

    def cell_geometry(self, cell):
        """(center, size, vertices) of an active cell in physical coordinates."""
        if cell not in self.active:
            raise ValueError(f"cell {cell} is not active")
        h = self.cell_size(cell[0])
        lo = self.cell_lo(cell)
        center = lo + 0.5 * h
        verts = lo + h * np.array(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
             [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=float)
        return center, h, verts

    @staticmethod
    def parent(cell):
        level, i, j, k = cell
        return (level - 1, i >> 1, j >> 1, k >> 1)

    @staticmethod
    def children(cell):
        level, i, j, k = cell
        return [(level + 1, 2 * i + a, 2 * j + b, 2 * k + c)
                for c in (0, 1) for b in (0, 1) for a in (0, 1)]

    def sorted_active(self):
        return sorted(self.active)

    def active_ancestor(self, cell):
        """The active cell equal to or containing ``cell``, or None if finer."""
        level, i, j, k = cell
        while level >= 0:
            c = (level, i, j, k)
            if c in self.active:
                return c
            level, i, j, k = level - 1, i >> 1, j >> 1, k >> 1
        return None

    def active_cell_at(self, x):
        """The active cell containing the physical point ``x``."""
        x = np.asarray(x, dtype=float)
        rel = (x - self.lo) / self.width
        if np.any(rel < -1e-12) or np.any(rel > 1 + 1e-12):
            raise ValueError(f"point {x} outside the domain")
        for level in range(self.max_level, -1, -1):
            n = self.cells_per_axis(level)
            idx = np.clip((rel * n).astype(int), 0, n - 1)
            c = (level, int(idx[0]), int(idx[1]), int(idx[2]))
            if c in self.active:
                return c
        raise ValueError(f"no active cell found at {x}")

    # -- refinement ----------------------------------------------------------

    def refine_with_closure(self, marked):
        """Refine ``marked`` cells and restore the 2:1 face balance.

        Returns a new mesh; the closure is the minimal transitive one and the
        result is independent of iteration order.
        """
        marked = set(marked)
        if not marked <= self.active:
            raise ValueError("marked cells must be active")
        active = set(self.active)
        queue = []
        for c in marked:
            active.remove(c)
            kids = self.children(c)
            active.update(kids)
            queue.extend(kids)
        # Frontier sweep: a violation always involves a newly created cell.
        while queue:
            cell = queue.pop()
            if cell not in active:
                continue
            level, i, j, k = cell
            n = self.cells_per_axis(level)
            for axis in range(3):
                for step in (-1, 1):
                    ni, nj, nk = i, j, k
                    if axis == 0:
                        ni += step
                    elif axis == 1:
                        nj += step
                    else:
                        nk += step
                    if not (0 <= ni < n and 0 <= nj < n and 0 <= nk < n):
                        continue
                    if (level, ni, nj, nk) in active:
                        continue
                    # walk up to the active ancestor of the neighbor
                    al, ai, aj, ak = level, ni, nj, nk
                    anc = None
                    while al > 0:
                        al, ai, aj, ak = al - 1, ai >> 1, aj >> 1, ak >> 1
                        if (al, ai, aj, ak) in active:
                            anc = (al, ai, aj, ak)
                            break
                    if anc is not None and level - anc[0] >= 2:
                        active.remove(anc)
                        kids = self.children(anc)
                        active.update(kids)
                        queue.extend(kids)
        return OctreeMesh(self.lo, self.width, self.n0, active)

    # -- faces ---------------------------------------------------------------

    @staticmethod
    def _pack(cells_arr):
        """Order-preserving fixed-width byte key of (level, i, j, k) rows.

        Big-endian encoding makes bytewise comparison agree with the
        lexicographic cell order at any refinement depth.
        """
        a = np.ascontiguousarray(cells_arr.astype(">i8"))
        return a.view("S32").ravel()

    @staticmethod
    def _member(sorted_keys, q):
        pos = np.searchsorted(sorted_keys, q)
        hit = pos < len(sorted_keys)
        pos = np.minimum(pos, max(len(sorted_keys) - 1, 0))
        return hit & (sorted_keys[pos] == q) if len(sorted_keys) else hit & False

    def _active_keys(self):
        if not hasattr(self, "_akeys"):
            self._akeys = np.sort(self._pack(np.array(sorted(self.active), dtype=np.int64)))
        return self._akeys

    def internal_face_arrays(self, cells):
        """End-level internal faces with both active cells in ``cells``, as arrays.

        Across a coarse-fine interface the faces are the fine sub-faces.
        Returns ``(minus, plus, axis, center, h_f)`` where minus/plus are
        (nf, 4) cell rows with minus on the lower-coordinate side, center is
        (nf, 3) physical and ``h_f`` the finer cell size.
        """
        ca = np.array(sorted(cells), dtype=np.int64).reshape(-1, 4)
        ckeys = self._pack(ca)  # sorted, since pack is lexicographic
        akeys = self._active_keys()
        if not np.all(self._member(akeys, ckeys)):
            raise ValueError("cells must be a subset of the active cells")
        lev = ca[:, 0]
        h = self.width / (self.n0 << lev).astype(float)
        centers = self.lo[None, :] + h[:, None] * (ca[:, 1:4] + 0.5)
        nax = (self.n0 << lev)
        out = []
        for axis in range(3):
            for step in (-1, 1):
                nb = ca.copy()
                nb[:, 1 + axis] += step
                rows = np.nonzero((nb[:, 1 + axis] >= 0) & (nb[:, 1 + axis] < nax))[0]
                nbr = nb[rows]
                act = self._member(akeys, self._pack(nbr))
                par = nbr.copy()
                par[:, 0] -= 1
                par[:, 1:4] >>= 1
                pk = self._pack(par)
                # equal-level faces are added once, from the minus side;
                # against a coarse neighbor the fine cell owns its sub-face
                same = act & self._member(ckeys, self._pack(nbr)) if step > 0 \
                    else np.zeros(len(rows), dtype=bool)
                coarse = ~act & self._member(akeys, pk) & self._member(ckeys, pk)
                for sel, other in ((same, nbr), (coarse, par)):
                    idx = np.nonzero(sel)[0]
                    if len(idx) == 0:
                        continue
                    own = rows[idx]
                    fc = centers[own].copy()
                    fc[:, axis] += 0.5 * step * h[own]
                    if step > 0:
                        mi, pl = ca[own], other[idx]
                    else:
                        mi, pl = other[idx], ca[own]
                    out.append((mi, pl, np.full(len(idx), axis), fc, h[own]))
        if not out:
            z = np.empty((0, 4), dtype=np.int64)
            return z, z.copy(), np.empty(0, dtype=int), np.empty((0, 3)), np.empty(0)
        return tuple(np.concatenate([o[i] for o in out]) for i in range(5))

    def internal_faces(self, cells):
        """Like :meth:`internal_face_arrays`, as a list of :class:`Face`."""
        minus, plus, axis, center, h_f = self.internal_face_arrays(cells)
        return [Face(tuple(m), tuple(p), int(a), tuple(c), float(hf))
                for m, p, a, c, hf in zip(minus.tolist(), plus.tolist(),
                                          axis.tolist(), center.tolist(), h_f.tolist())]

    def is_balanced(self):
        """Full-scan check of the 2:1 face balance (test helper)."""
        for cell in self.active:
            level, i, j, k = cell
            n = self.cells_per_axis(level)
            for axis in range(3):
                for step in (-1, 1):
                    ni, nj, nk = i, j, k
                    if axis == 0:
                        ni += step
                    elif axis == 1:
                        nj += step
                    else:
                        nk += step
                    if not (0 <= ni < n and 0 <= nj < n and 0 <= nk < n):
                        continue
                    anc = self.active_ancestor((level, ni, nj, nk))
                    if anc is not None and level - anc[0] >= 2:
                        return False
        return True

    # -- export --------------------------------------------------------------

    def write_vtk(self, path, cell_data=None):
        """Legacy-VTK unstructured grid of the active cells.

        ``cell_data`` maps a field name to a dict ``cell -> value``; cells
        missing from a field are written as 0.
        """
        cells = self.sorted_active()
        verts = {}
        conn = []
        for cell in cells:
            _, _, vv = self.cell_geometry(cell)
            ids = []
            for v in vv[[0, 1, 3, 2, 4, 5, 7, 6]]:  # VTK hexahedron ordering
                key = tuple(np.round(v, 12))
                if key not in verts:
                    verts[key] = len(verts)
                ids.append(verts[key])
            conn.append(ids)
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 2.0\noctree mesh\nASCII\n")
            fh.write("DATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {len(verts)} double\n")
            for key in verts:
                fh.write("%.12g %.12g %.12g\n" % key)
            fh.write(f"CELLS {len(conn)} {9 * len(conn)}\n")
            for ids in conn:
                fh.write("8 " + " ".join(map(str, ids)) + "\n")
            fh.write(f"CELL_TYPES {len(conn)}\n")
            fh.write("12\n" * len(conn))
            fields = {"level": {c: c[0] for c in cells}}
            if cell_data:
                fields.update(cell_data)
            fh.write(f"CELL_DATA {len(conn)}\n")
            for name, data in fields.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for cell in cells:
                    fh.write("%.12g\n" % float(data.get(cell, 0.0)))


def create_uniform(bounds, n0):
    return OctreeMesh.create_uniform(bounds, n0)
