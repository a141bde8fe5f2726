"""Quadrature on surface cuts, full cells and full faces.

Surface rules follow a dimension-reduction construction: pick a height axis
from the dominant level-set gradient component, certify monotonicity of the
level set along that axis over base sub-columns via Bernstein bounds, then
locate the root above each base quadrature point by bisection.  Nothing in
this module ever integrates along curvilinear edges (surface-face
intersections); that is the point of the face-based indicator design.
"""

from dataclasses import dataclass

import numpy as np

from . import basis
from .errors import GeometryError

TOL_ROOT = 1e-12   # root localization in reference coordinates
TOL_SURF = 1e-10   # |phi| at emitted surface points (O(1)-scaled domain)
MAX_DEPTH = 8      # base-face bisection depth before declaring degeneracy
_BISECT_ITERS = 48


@dataclass
class SurfaceQuadrature:
    """Points/weights on the cut of one cell; empty iff the cell is not cut."""

    cell: tuple
    points: np.ndarray   # (n, 3) physical
    ref: np.ndarray      # (n, 3) cell reference coordinates
    weights: np.ndarray  # (n,) physical area weights

    def __len__(self):
        return len(self.weights)


@dataclass
class TensorQuadrature:
    points: np.ndarray
    weights: np.ndarray


def cell_rule(mesh, cell, order):
    """Tensor Gauss rule over a full cell, exact to degree 2*order-1 per axis."""
    if order < 1:
        raise ValueError("order must be >= 1")
    g, w = basis.gauss_1d(order)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    wz, wy, wx = np.meshgrid(w, w, w, indexing="ij")
    h = mesh.cell_size(cell[0])
    lo = mesh.cell_lo(cell)
    pts = lo[None, :] + h * np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])
    return TensorQuadrature(pts, (wx * wy * wz).ravel() * h ** 3)


def face_rule(face, order):
    """Tensor Gauss rule over the face rectangle (the finer cell's face)."""
    if order < 1:
        raise ValueError("order must be >= 1")
    g, w = basis.gauss_1d(order)
    t1, t2 = np.meshgrid(g, g, indexing="ij")
    w1, w2 = np.meshgrid(w, w, indexing="ij")
    b1, b2 = [a for a in range(3) if a != face.axis]
    pts = np.tile(np.asarray(face.center, dtype=float), (order ** 2, 1))
    pts[:, b1] += (t1.ravel() - 0.5) * face.h_f
    pts[:, b2] += (t2.ravel() - 0.5) * face.h_f
    return TensorQuadrature(pts, (w1 * w2).ravel() * face.h_f ** 2)


# ---------------------------------------------------------------------------
# surface rules

_TDIM = {0: 2, 1: 1, 2: 0}  # physical axis -> tensor dim of a [z,y,x] coefficient block


def _column_points(ct, a, t1, t2, w2d, k):
    """Roots of phi along axis ``a`` above base points, batched over cells.

    ``ct``: (nc, n1, n1, n1) Lagrange coefficients ordered [z, y, x];
    ``t1``/``t2``/``w2d``: (nc, P) base coordinates (lower/upper base axis)
    and reference weights.  Returns flattened (cell_idx, ref, w_ref) where
    w_ref already carries the surface-measure correction but not h^2.
    """
    b1, b2 = [ax for ax in range(3) if ax != a]
    V1, D1, _ = basis.lagrange_1d(k, t1)
    V2, D2, _ = basis.lagrange_1d(k, t2)
    spec = {  # (height axis): einsum reducing the two base tensor dims
        2: "czyx,cpy,cpx->cpz",
        1: "czyx,cpz,cpx->cpy",
        0: "czyx,cpz,cpy->cpx",
    }[a]
    # base-axis order in the einsum: for a=2 -> (y=b2, x=b1); a=1 -> (z=b2, x=b1);
    # a=0 -> (z=b2, y=b1).  Second operand is the upper base axis.
    c_val = np.einsum(spec, ct, V2, V1)
    c_d1 = np.einsum(spec, ct, V2, D1)
    c_d2 = np.einsum(spec, ct, D2, V1)

    f0 = c_val[..., 0]
    f1 = c_val[..., -1]
    hit = f0 * f1 < 0.0
    ci, pi = np.nonzero(hit)
    if len(ci) == 0:
        return ci, np.empty((0, 3)), np.empty(0)
    cv = c_val[ci, pi]
    lo = np.zeros(len(ci))
    hi = np.ones(len(ci))
    flo = cv[:, 0]
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        fm = basis.eval_1d(k, cv, mid)
        left = flo * fm <= 0.0
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
    t = 0.5 * (lo + hi)
    dfa = basis.eval_1d_deriv(k, cv, t)
    g1 = basis.eval_1d(k, c_d1[ci, pi], t)
    g2 = basis.eval_1d(k, c_d2[ci, pi], t)
    grad_norm = np.sqrt(dfa ** 2 + g1 ** 2 + g2 ** 2)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            ratio = grad_norm / np.abs(dfa)
        except FloatingPointError:
            raise GeometryError("vanishing height derivative at a surface root")
    ref = np.empty((len(ci), 3))
    ref[:, a] = t
    ref[:, b1] = t1[ci, pi]
    ref[:, b2] = t2[ci, pi]
    return ci, ref, w2d[ci, pi] * ratio


def _base_grid(order):
    g, w = basis.gauss_1d(order)
    t1, t2 = np.meshgrid(g, g, indexing="ij")
    w1, w2 = np.meshgrid(w, w, indexing="ij")
    return t1.ravel(), t2.ravel(), (w1 * w2).ravel()


def _monotone(bern, a):
    d = basis.bernstein_derivative(bern, _TDIM[a] - 3)
    dmin, dmax = basis.bernstein_range(d)
    return (dmin > 0.0) | (dmax < 0.0)


def _full_cut(bern, a):
    """Certify that every column along ``a`` crosses the zero level.

    True when the two cell faces normal to ``a`` are sign-definite with
    opposite signs, so a tensor base grid sees the whole cut.
    """
    td = _TDIM[a] - 3
    bot = np.take(bern, 0, axis=td)
    top = np.take(bern, -1, axis=td)
    bflat = bot.reshape(bot.shape[:-2] + (-1,))
    tflat = top.reshape(top.shape[:-2] + (-1,))
    return (((bflat.max(-1) < 0.0) & (tflat.min(-1) > 0.0))
            | ((bflat.min(-1) > 0.0) & (tflat.max(-1) < 0.0)))


def _face_roots(coef, k, lo, hi):
    """Roots in (lo, hi) of batched 1D Lagrange expansions, as (..., 2).

    ``coef`` has node values along the last axis; missing roots are reported
    as ``lo`` (they collapse into the leading interval breakpoint).
    """
    c0 = coef[..., 0]
    fill = np.broadcast_to(lo, c0.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        if k == 1:
            r1 = -c0 / (coef[..., 1] - c0)
            r2 = np.full_like(r1, np.nan)
        else:
            a1 = -3.0 * c0 + 4.0 * coef[..., 1] - coef[..., 2]
            a2 = 2.0 * c0 - 4.0 * coef[..., 1] + 2.0 * coef[..., 2]
            scale = np.maximum(np.abs(c0), np.maximum(np.abs(a1), 1e-300))
            quadratic = np.abs(a2) > 1e-14 * scale
            disc = a1 * a1 - 4.0 * a2 * c0
            sq = np.sqrt(np.where(disc >= 0.0, disc, np.nan))
            q = -0.5 * (a1 + np.where(a1 >= 0.0, 1.0, -1.0) * sq)
            r1 = np.where(quadratic, q / a2, -c0 / a1)
            r2 = np.where(quadratic, c0 / q, np.nan)
    out = np.stack([r1, r2], axis=-1)
    inside = np.isfinite(out) & (out > lo[..., None]) & (out < hi[..., None])
    return np.where(inside, out, fill[..., None])


def _smooth_faces(bern, a):
    """Certify single-valued cut boundaries on the two faces normal to ``a``.

    Each face polynomial must be sign-definite or strictly monotone along
    the lower base axis, so its zero set is a graph over the other axis.
    """
    td = _TDIM[a] - 3
    ok = None
    for pick in (0, -1):
        face = np.take(bern, pick, axis=td)  # (..., t2, t1) Bernstein
        flat = face.reshape(face.shape[:-2] + (-1,))
        signdef = (flat.min(-1) > 0.0) | (flat.max(-1) < 0.0)
        d = np.diff(face, axis=-1)
        dflat = d.reshape(d.shape[:-2] + (-1,))
        monod = (dflat.min(-1) > 0.0) | (dflat.max(-1) < 0.0)
        cur = signdef | monod
        ok = cur if ok is None else (ok & cur)
    return ok


_PART_DEPTH = 2  # bisection levels before switching to interval integration


def _partial_columns(ct_rows, a, u0, u1, v0, v1, k, order):
    """Base rule of partially cut monotone column bundles, batched over boxes.

    For each Gauss line (fixed upper base coordinate) the crossing set along
    the lower base axis is where the two cell faces normal to ``a`` have
    opposite signs; its breakpoints are closed-form roots of the degree-k
    face polynomials.  Returns flat ``(box_idx, t1, t2, w2d)`` arrays.
    """
    empty = (np.empty(0, dtype=np.int64), np.empty((0, order)),
             np.empty((0, order)), np.empty((0, order)))
    td = _TDIM[a] - 3
    bot = np.take(ct_rows, 0, axis=td)   # (m, t2-nodes, t1-nodes)
    top = np.take(ct_rows, -1, axis=td)
    g1, w1 = basis.gauss_1d(order)
    # crossing intervals get clipped at the t1 box edges; the resulting kinks
    # in t2 sit at the roots of the face polynomials restricted to those
    # edges, so the t2 quadrature is split there to stay smooth per segment
    le, _, _ = basis.lagrange_1d(k, np.stack([u0, u1], axis=-1))  # (m, 2, n1)
    vlo = np.broadcast_to(v0[:, None], (len(v0), 2))
    vhi = np.broadcast_to(v1[:, None], (len(v1), 2))
    ebot = np.einsum("mij,mej->mei", bot, le)                     # (m, 2, n1)
    etop = np.einsum("mij,mej->mei", top, le)
    bp2 = np.concatenate([v0[:, None],
                          _face_roots(ebot, k, vlo, vhi).reshape(len(v0), -1),
                          _face_roots(etop, k, vlo, vhi).reshape(len(v0), -1),
                          v1[:, None]], axis=-1)
    bp2.sort(axis=-1)
    a2, b2 = bp2[..., :-1], bp2[..., 1:]                          # (m, 9)
    bi2, si = np.nonzero(b2 - a2 > 1e-14)
    if len(bi2) == 0:
        return empty
    sa, sb = a2[bi2, si][:, None], b2[bi2, si][:, None]
    t2 = (sa + (sb - sa) * g1[None, :]).ravel()                   # (L,)
    wline = ((sb - sa) * w1[None, :]).ravel()
    lidx = np.repeat(bi2, order)
    l2, _, _ = basis.lagrange_1d(k, t2)                           # (L, n1)
    cb = np.einsum("li,lij->lj", l2, bot[lidx])
    ctp = np.einsum("li,lij->lj", l2, top[lidx])
    lo = u0[lidx]
    hi = u1[lidx]
    bp = np.concatenate([lo[:, None], _face_roots(cb, k, lo, hi),
                         _face_roots(ctp, k, lo, hi), hi[:, None]], axis=-1)
    bp.sort(axis=-1)
    alpha, beta = bp[..., :-1], bp[..., 1:]                       # (L, 5)
    mid = 0.5 * (alpha + beta)
    fb = basis.eval_1d(k, cb[:, None, :], mid)
    ft = basis.eval_1d(k, ctp[:, None, :], mid)
    valid = (beta - alpha > 1e-14) & (fb * ft < 0.0)
    li, ii = np.nonzero(valid)
    if len(li) == 0:
        return empty
    al, be = alpha[li, ii][:, None], beta[li, ii][:, None]
    t1s = al + (be - al) * g1[None, :]
    t2s = np.broadcast_to(t2[li][:, None], t1s.shape)
    ws = (be - al) * wline[li][:, None] * w1[None, :]
    return lidx[li], t1s, t2s, ws


def _subdivide_batch(ct, bern, a, order, k, max_depth=None):
    """Breadth-first base-face bisection for cells without a whole-cell certificate.

    Operates on all cells of one height axis at once.  Base boxes are pruned
    when sign-definite, integrated when certified monotone with a fully
    crossing column bundle and split in the two base directions otherwise;
    monotone boxes surviving to ``max_depth`` keep their crossing columns
    (the uncovered remainder is below base resolution).

    Returns ``(idx, ref, w, failed)``: flat quadrature entries with ``idx``
    into ``ct`` rows, plus the set of rows with a non-monotone box at max
    depth (to retry along another axis).
    """
    if max_depth is None:
        max_depth = MAX_DEPTH
    t1g, t2g, wg = _base_grid(order)
    b1, b2 = [ax for ax in range(3) if ax != a]
    d1, d2 = _TDIM[b1] - 3, _TDIM[b2] - 3
    B = bern
    rows = np.arange(len(bern))
    u0 = np.zeros(len(B))
    u1 = np.ones(len(B))
    v0 = np.zeros(len(B))
    v1 = np.ones(len(B))
    out_idx, out_ref, out_w = [], [], []
    failed = set()
    for depth in range(max_depth + 1):
        if len(B) == 0:
            break
        bmin, bmax = basis.bernstein_range(B)
        keep = ~((bmin > 0.0) | (bmax < 0.0))
        B, rows, u0, u1, v0, v1 = B[keep], rows[keep], u0[keep], u1[keep], v0[keep], v1[keep]
        if len(B) == 0:
            break
        mono = _monotone(B, a)
        full = _full_cut(B, a)
        emit_fast = mono & full
        # partial bundles need single-valued cut boundaries on both faces so
        # the per-line interval decomposition is exact; otherwise keep
        # splitting.  A couple of extra levels for k=2 shrink the boxes where
        # the two face root curves cross, whose kinks the line rule misses;
        # for k=1 that error sits far below the geometric one.
        pd = _PART_DEPTH if k > 1 else 0
        emit_part = mono & ~full & ((_smooth_faces(B, a) & (depth >= pd))
                                    | (depth == max_depth))
        if np.any(emit_fast):
            eb = np.nonzero(emit_fast)[0]
            du = (u1[eb] - u0[eb])[:, None]
            dv = (v1[eb] - v0[eb])[:, None]
            T1 = u0[eb][:, None] + du * t1g[None, :]
            T2 = v0[eb][:, None] + dv * t2g[None, :]
            ci, ref, w = _column_points(ct[rows[eb]], a, T1, T2, wg[None, :] * du * dv, k)
            out_idx.append(rows[eb][ci])
            out_ref.append(ref)
            out_w.append(w)
        if np.any(emit_part):
            eb = np.nonzero(emit_part)[0]
            cte = ct[rows[eb]]
            bi, t1s, t2s, ws = _partial_columns(
                cte, a, u0[eb], u1[eb], v0[eb], v1[eb], k, order)
            if len(bi):
                ci, ref, w = _column_points(cte[bi], a, t1s, t2s, ws, k)
                out_idx.append(rows[eb][bi][ci])
                out_ref.append(ref)
                out_w.append(w)
        if depth == max_depth:
            failed.update(rows[~mono].tolist())
            break
        rest = ~(emit_fast | emit_part)
        B, rows, u0, u1, v0, v1 = B[rest], rows[rest], u0[rest], u1[rest], v0[rest], v1[rest]
        if len(B) == 0:
            break
        um = 0.5 * (u0 + u1)
        vm = 0.5 * (v0 + v1)
        lo1, hi1 = basis.bernstein_split(B, d1)
        quads = []
        for Bh, uu0, uu1 in ((lo1, u0, um), (hi1, um, u1)):
            lo2, hi2 = basis.bernstein_split(Bh, d2)
            quads.append((lo2, uu0, uu1, v0, vm))
            quads.append((hi2, uu0, uu1, vm, v1))
        B = np.concatenate([q[0] for q in quads])
        u0 = np.concatenate([q[1] for q in quads])
        u1 = np.concatenate([q[2] for q in quads])
        v0 = np.concatenate([q[3] for q in quads])
        v1 = np.concatenate([q[4] for q in quads])
        rows = np.concatenate([rows] * 4)
    if out_idx:
        idx = np.concatenate(out_idx)
        ref = np.concatenate(out_ref)
        w = np.concatenate(out_w)
    else:
        idx, ref, w = np.empty(0, dtype=np.int64), np.empty((0, 3)), np.empty(0)
    if failed:
        ok = ~np.isin(idx, list(failed))
        idx, ref, w = idx[ok], ref[ok], w[ok]
    return idx, ref, w, failed


def surface_rules_flat(field, cells, order=None, axis_clearance=0.0):
    """Surface quadrature for all ``cells`` at once, in flat-array form.

    Returns ``(offsets, points, ref, weights)`` where the slice
    ``offsets[i]:offsets[i+1]`` holds the rule of ``cells[i]``.
    ``axis_clearance`` > 0 nudges base points so that no emitted physical
    point lies within that distance of the z-axis (keeps singular data
    evaluable at the sphere's poles).
    """
    k = field.degree
    if order is None:
        order = k + 1
    if order < 1:
        raise ValueError("order must be >= 1")
    cells = list(cells)
    nc = len(cells)
    if nc == 0:
        return np.zeros(1, dtype=np.int64), np.empty((0, 3)), np.empty((0, 3)), np.empty(0)
    mesh = field.mesh
    ct = field.cell_coef_tensor(cells)           # (nc, n1, n1, n1)
    bern = basis.lagrange_to_bernstein(k, ct)
    bmin, bmax = basis.bernstein_range(bern)
    maybe_cut = ~((bmin > 0.0) | (bmax < 0.0))

    # dominant-gradient axis preference at the cell center
    _, gref, _ = basis.tensor_basis(k, np.full((1, 3), 0.5))
    gc = np.einsum("cl,lk->ck", ct.reshape(nc, -1), gref[0])
    pref = np.argsort(-np.abs(gc), axis=1)
    mono = np.stack([_monotone(bern, a) & _full_cut(bern, a) for a in range(3)], axis=1)

    axis_of = np.full(nc, -1, dtype=int)
    for slot in range(3):
        cand = pref[np.arange(nc), slot]
        ok = mono[np.arange(nc), cand] & (axis_of < 0) & maybe_cut
        axis_of[ok] = cand[ok]

    t1g, t2g, wg = _base_grid(order)
    idx_parts, ref_parts, w_parts = [], [], []
    for a in range(3):
        sel = np.nonzero(axis_of == a)[0]
        if len(sel) == 0:
            continue
        t1 = np.broadcast_to(t1g, (len(sel), len(t1g)))
        t2 = np.broadcast_to(t2g, (len(sel), len(t2g)))
        w2 = np.broadcast_to(wg, (len(sel), len(wg)))
        ci, ref, w = _column_points(ct[sel], a, t1, t2, w2, k)
        idx_parts.append(sel[ci])
        ref_parts.append(ref)
        w_parts.append(w)
    # fallback: vectorized base subdivision, retrying along less dominant axes
    todo = np.nonzero(maybe_cut & (axis_of < 0))[0]
    for slot in range(3):
        if len(todo) == 0:
            break
        next_todo = []
        for a in range(3):
            grp = todo[pref[todo, slot] == a]
            if len(grp) == 0:
                continue
            li, ref, w, failed = _subdivide_batch(ct[grp], bern[grp], a, order, k)
            if failed:
                bad = np.array(sorted(failed), dtype=np.int64)
                next_todo.append(grp[bad])
            idx_parts.append(grp[li])
            ref_parts.append(ref)
            w_parts.append(w)
        todo = np.concatenate(next_todo) if next_todo else np.empty(0, dtype=np.int64)
    if len(todo):
        raise GeometryError("degenerate cut: base recursion exceeded max depth",
                            cell=cells[int(todo[0])])

    if idx_parts:
        idx = np.concatenate(idx_parts)
        ref = np.concatenate(ref_parts)
        w = np.concatenate(w_parts)
        order_ix = np.argsort(idx, kind="stable")
        idx, ref, w = idx[order_ix], ref[order_ix], w[order_ix]
    else:
        idx = np.empty(0, dtype=np.int64)
        ref = np.empty((0, 3))
        w = np.empty(0)
    offsets = np.searchsorted(idx, np.arange(nc + 1))
    hs = np.array([mesh.cell_size(c[0]) for c in cells])
    los = np.array([mesh.cell_lo(c) for c in cells])
    pts = los[idx] + hs[idx, None] * ref
    w = w * hs[idx] ** 2
    if axis_clearance > 0.0 and len(w):
        rho = np.hypot(pts[:, 0], pts[:, 1])
        for i in np.unique(idx[rho < axis_clearance]):
            s = slice(offsets[i], offsets[i + 1])
            pts[s], ref[s], w[s] = _enforce_axis_clearance(
                field, cells[i], pts[s], ref[s], w[s], order, axis_clearance)
    return offsets, pts, ref, w


def surface_rules(field, cells, order=None, axis_clearance=0.0):
    """Per-cell :class:`SurfaceQuadrature` objects (see surface_rules_flat)."""
    offsets, pts, ref, w = surface_rules_flat(field, cells, order, axis_clearance)
    return [SurfaceQuadrature(c, pts[offsets[i]:offsets[i + 1]],
                              ref[offsets[i]:offsets[i + 1]],
                              w[offsets[i]:offsets[i + 1]])
            for i, c in enumerate(cells)]


def _enforce_axis_clearance(field, cell, pts, ref, w, order, clearance):
    """Re-root points that landed within ``clearance`` of the z-axis.

    The base point is nudged by one small step and the root recomputed; the
    original weight is kept (the shift is far below quadrature accuracy).
    """
    rho = np.hypot(pts[:, 0], pts[:, 1])
    bad = np.nonzero(rho < clearance)[0]
    if len(bad) == 0:
        return pts, ref, w
    mesh = field.mesh
    k = field.degree
    h = mesh.cell_size(cell[0])
    lo = mesh.cell_lo(cell)
    ct = field.cell_coef_tensor([cell])[0]
    a = _dominant_axis(field, cell)
    b1, b2 = [ax for ax in range(3) if ax != a]
    shift = max(16.0 * clearance / h, 1e-9)
    for idx in bad:
        t1 = np.array([[ref[idx, b1] + shift]])
        t2 = np.array([[ref[idx, b2] + shift]])
        _, nref, nw = _column_points(ct[None], a, t1, t2, np.array([[1.0]]), k)
        if len(nw) != 1:
            raise GeometryError("axis-clearance perturbation lost the root", cell=cell)
        ref[idx] = nref[0]
        pts[idx] = lo + h * nref[0]
    return pts, ref, w


def _dominant_axis(field, cell):
    ct = field.cell_coef_tensor([cell])
    _, gref, _ = basis.tensor_basis(field.degree, np.full((1, 3), 0.5))
    gc = ct.reshape(1, -1) @ gref[0]
    return int(np.argmax(np.abs(gc[0])))


def surface_rule(field, cell, order=None, axis_clearance=0.0):
    """Surface quadrature over the cut of one cell (empty if not cut)."""
    return surface_rules(field, [cell], order=order, axis_clearance=axis_clearance)[0]
