"""Cell-wise error indicator and bulk marking for the adaptive loop.

The indicator combines a surface residual term, a gradient-jump term over the
internal square faces between cut cells and the cell-local stabilization
energy.  No quantity is ever integrated along the curved intersections of the
discrete surface with cell faces.
"""

from dataclasses import dataclass

import numpy as np

from . import assembly, basis
from .errors import ConfigError


@dataclass
class IndicatorWeights:
    alpha_r: float = 1.0
    alpha_e: float = 1.0
    alpha_s: float = 1.0

    def __post_init__(self):
        if min(self.alpha_r, self.alpha_e, self.alpha_s) < 0:
            raise ConfigError("indicator weights must be nonnegative")


def default_weights(stab_kind):
    """Face-jump stabilization already penalizes the bulk jumps, so the
    separate face term is dropped there."""
    if stab_kind == "jf":
        return IndicatorWeights(1.0, 0.0, 1.0)
    return IndicatorWeights(1.0, 1.0, 1.0)


def surface_laplacian_values(cls, dofmap, u):
    """(u_h, lap_G u_h) at every surface quadrature point, flat arrays.

    The surface Laplacian of the bulk polynomial is evaluated through the
    discrete normal field: lap_G u = tr(P hess_u) - (n . grad u) * div(n).
    """
    mesh = dofmap.mesh
    k = dofmap.degree
    cells = cls.cut_cells
    nc = len(cells)
    lsc = assembly._levelset_coef(cls, cells)
    hs = assembly._cell_sizes(mesh, cells)
    npts = np.diff(cls.offsets)
    uh_out = np.empty(cls.offsets[-1])
    lap_out = np.empty(cls.offsets[-1])
    nloc = (k + 1) ** 3
    chunk = max(1, int(assembly._CHUNK_ELEMS / (max(1, npts.max()) * nloc * 9)))
    for c0, c1 in assembly._chunks(nc, chunk):
        s = slice(cls.offsets[c0], cls.offsets[c1])
        ref = cls.qref[s]
        pidx = np.repeat(np.arange(c0, c1), npts[c0:c1])
        hp = hs[pidx]
        vals, grads, hess = basis.tensor_basis(k, ref, hessians=True)
        lsloc = lsc[pidx]
        g = np.einsum("pl,plk->pk", lsloc, grads) / hp[:, None]
        gnorm = np.linalg.norm(g, axis=1)
        n = g / gnorm[:, None]
        hphi = np.einsum("pl,plij->pij", lsloc, hess) / hp[:, None, None] ** 2
        div_n = (np.trace(hphi, axis1=1, axis2=2)
                 - np.einsum("pi,pij,pj->p", n, hphi, n)) / gnorm
        uloc = u[dofmap.cell_dofs[pidx]]
        uh_out[s] = np.einsum("pl,pl->p", uloc, vals)
        du = np.einsum("pl,plk->pk", uloc, grads) / hp[:, None]
        hu = np.einsum("pl,plij->pij", uloc, hess) / hp[:, None, None] ** 2
        lap_out[s] = (np.trace(hu, axis1=1, axis2=2)
                      - np.einsum("pi,pij,pj->p", n, hu, n)
                      - np.einsum("pk,pk->p", n, du) * div_n)
    return uh_out, lap_out


def residual_energies(cls, dofmap, u, f):
    """h_S^2 * ||f + lap_G u_h - u_h||^2 over the surface cut, per cut cell."""
    hs = assembly._cell_sizes(dofmap.mesh, cls.cut_cells)
    uh, lap = surface_laplacian_values(cls, dofmap, u)
    fv = np.asarray(f(cls.qpoints), dtype=float)
    r2 = cls.qweights * (fv + lap - uh) ** 2
    return hs ** 2 * np.add.reduceat(r2, cls.offsets[:-1].astype(np.intp))


def compute_indicators(cls, dofmap, stab, u, f, weights=None):
    """Squared indicator eta^2 per cut cell, aligned with ``cls.cut_cells``."""
    if weights is None:
        weights = default_weights(stab.kind)
    eta2 = np.zeros(len(cls.cut_cells))
    if weights.alpha_r > 0:
        eta2 += weights.alpha_r * residual_energies(cls, dofmap, u, f)
    if weights.alpha_e > 0:
        eta2 += weights.alpha_e * assembly.face_jump_energies(cls, dofmap, u)
    if weights.alpha_s > 0:
        eta2 += weights.alpha_s * assembly.stab_energies(cls, dofmap, stab, u)
    return eta2


def total_indicator(eta2):
    return float(np.sqrt(np.sum(eta2)))


def dorfler_mark(cells, eta2, theta):
    """Smallest cell set whose summed eta^2 strictly exceeds theta * total.

    Cells are taken in decreasing eta^2 order; equal indicators are broken by
    the cell id, so marking is deterministic.
    """
    if not 0.0 < theta < 1.0:
        raise ConfigError("marking fraction theta must lie in (0, 1)")
    eta2 = np.asarray(eta2)
    if len(cells) != len(eta2):
        raise ValueError("cells and indicators differ in length")
    total = eta2.sum()
    if total <= 0.0:
        return []
    order = sorted(range(len(cells)), key=lambda i: (-eta2[i], cells[i]))
    acc = 0.0
    marked = []
    for i in order:
        marked.append(cells[i])
        acc += eta2[i]
        if acc > theta * total:
            return marked
    return marked
