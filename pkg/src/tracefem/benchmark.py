"""Convergence and efficiency experiments on the unit sphere.

Drives the solve-estimate-mark-refine loop for the manufactured low-regularity
solution u = sin^lambda(theta) sin(phi), whose surface gradient blows up at
the sphere's poles for lambda < 1.  All exact quantities are extended off the
surface along radii (closest-point projection x -> x/|x|), so they can be
evaluated at quadrature points of the discrete surface directly.
"""

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from . import assembly, basis, estimator, levelset, mesh as meshmod, solver, space
from .errors import ConfigError

AXIS_CLEARANCE = 1e-8  # keep quadrature nodes off the polar axis
_RHO_FLOOR = 1e-12

CSV_FIELDS = ("cycle", "dofs", "l2_error", "h1_error", "estimator",
              "I1", "I2", "I3", "cg_iters", "wall_seconds")


def sphere_levelset(pts):
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return np.sum(pts ** 2, axis=1) - 1.0


class ManufacturedCase:
    """Radially extended exact solution, source and surface gradient.

    In Cartesian form with s = x/|x| and rho = sqrt(s_0^2 + s_1^2):
    u = rho^(lambda-1) s_1, which equals sin^lambda(theta) sin(phi).
    """

    def __init__(self, lam):
        if lam <= 0:
            raise ConfigError("lambda must be positive")
        self.lam = lam

    def _project(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        s = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        rho = np.maximum(np.hypot(s[:, 0], s[:, 1]), _RHO_FLOOR)
        return s, rho

    def exact(self, pts):
        s, rho = self._project(pts)
        return rho ** (self.lam - 1.0) * s[:, 1]

    def source(self, pts):
        lam = self.lam
        s, rho = self._project(pts)
        return ((1.0 + lam + lam ** 2) * rho ** (lam - 1.0)
                + (1.0 - lam ** 2) * rho ** (lam - 3.0)) * s[:, 1]

    def exact_surface_gradient(self, pts):
        """(grad_G u)^e, the tangential gradient carried along radii."""
        lam = self.lam
        s, rho = self._project(pts)
        x, y = s[:, 0], s[:, 1]
        grad = np.zeros_like(s)
        grad[:, 0] = (lam - 1.0) * rho ** (lam - 3.0) * x * y
        grad[:, 1] = (lam - 1.0) * rho ** (lam - 3.0) * y ** 2 + rho ** (lam - 1.0)
        sn = np.einsum("pk,pk->p", grad, s)
        return grad - s * sn[:, None]


# ---------------------------------------------------------------------------
# error measurement

def surface_errors(cls, dofmap, u, case):
    """(l2, h1, per-cell squared h1 error) on the discrete surface.

    The H1 part measures xi = grad_Gh u_h - (grad_G u)^e, comparing the
    discrete tangential gradient with the extended exact one.
    """
    mesh = dofmap.mesh
    k = dofmap.degree
    cells = cls.cut_cells
    nc = len(cells)
    lsc = assembly._levelset_coef(cls, cells)
    hs = assembly._cell_sizes(mesh, cells)
    npts = np.diff(cls.offsets)
    l2_cells = np.zeros(nc)
    h1_cells = np.zeros(nc)
    nloc = (k + 1) ** 3
    chunk = max(1, int(assembly._CHUNK_ELEMS / (max(1, npts.max()) * nloc * 3)))
    for c0, c1 in assembly._chunks(nc, chunk):
        s = slice(cls.offsets[c0], cls.offsets[c1])
        ref = cls.qref[s]
        w = cls.qweights[s]
        pidx = np.repeat(np.arange(c0, c1), npts[c0:c1])
        hp = hs[pidx]
        vals, grads, _ = basis.tensor_basis(k, ref)
        uloc = u[dofmap.cell_dofs[pidx]]
        uh = np.einsum("pl,pl->p", uloc, vals)
        du = np.einsum("pl,plk->pk", uloc, grads) / hp[:, None]
        g = np.einsum("pl,plk->pk", lsc[pidx], grads) / hp[:, None]
        n = g / np.linalg.norm(g, axis=1, keepdims=True)
        tdu = du - n * np.einsum("pk,pk->p", n, du)[:, None]
        xi = tdu - case.exact_surface_gradient(cls.qpoints[s])
        e0 = w * (uh - case.exact(cls.qpoints[s])) ** 2
        e1 = w * np.sum(xi ** 2, axis=1)
        seg = (cls.offsets[c0:c1] - cls.offsets[c0]).astype(np.intp)
        l2_cells[c0:c1] = np.add.reduceat(e0, seg)
        h1_cells[c0:c1] = np.add.reduceat(e1, seg)
    return float(np.sqrt(l2_cells.sum())), float(np.sqrt(h1_cells.sum())), h1_cells


# ---------------------------------------------------------------------------
# efficiency indexes

def _vertex_patches(mesh, cut_cells):
    """For each cut cell, indices of cut cells touching it (vertex, edge or
    face contact), itself included."""
    index = {c: i for i, c in enumerate(cut_cells)}
    adj = [set((i,)) for i in range(len(cut_cells))]
    for i, cell in enumerate(cut_cells):
        level, ci, cj, ck = cell
        n = mesh.cells_per_axis(level)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    if di == dj == dk == 0:
                        continue
                    ni, nj, nk = ci + di, cj + dj, ck + dk
                    if not (0 <= ni < n and 0 <= nj < n and 0 <= nk < n):
                        continue
                    anc = mesh.active_ancestor((level, ni, nj, nk))
                    j = index.get(anc)
                    if j is not None:
                        adj[i].add(j)
                        adj[j].add(i)  # finer neighbors seen from the fine side
    return adj


def _face_patches(mesh, cut_cells, field):
    """Patches of cells sharing a surface-intersected face, itself included."""
    index = {c: i for i, c in enumerate(cut_cells)}
    adj = [set((i,)) for i in range(len(cut_cells))]
    for face in mesh.internal_faces(cut_cells):
        if not levelset.face_is_cut(field, face):
            continue
        i, j = index[face.minus_cell], index[face.plus_cell]
        adj[i].add(j)
        adj[j].add(i)
    return adj


@dataclass
class EfficiencyReport:
    I1: float
    I2: float
    I3: float
    skipped: int = 0  # cells whose error denominator was below tolerance


def efficiency_indexes(mesh, cls, field, eta2, eta2_residual, err2_cells, tol=1e-14):
    """Worst-cell ratios of indicator to patch-accumulated energy error.

    I1 uses the vertex-neighbor patch, I2 the patch across surface-cut faces
    and I3 compares the residual part against the cell's own error.
    """
    cut_cells = cls.cut_cells
    skipped = 0
    vals = [0.0, 0.0, 0.0]
    patches = (_vertex_patches(mesh, cut_cells), _face_patches(mesh, cut_cells, field))
    for i in range(len(cut_cells)):
        for slot, adj in enumerate(patches):
            denom = sum(err2_cells[j] for j in adj[i])
            if denom < tol:
                skipped += 1
                continue
            vals[slot] = max(vals[slot], np.sqrt(eta2[i] / denom))
        if err2_cells[i] < tol:
            skipped += 1
        else:
            vals[2] = max(vals[2], np.sqrt(eta2_residual[i] / err2_cells[i]))
    return EfficiencyReport(vals[0], vals[1], vals[2], skipped)


# ---------------------------------------------------------------------------
# the experiment loop

@dataclass
class RunConfig:
    degree: int = 1
    stab: str = "nv"
    lam: float = 1.0
    theta: float = 0.5
    mode: str = "adaptive"
    cycles: int = 5
    rho_scale: float = 10.0
    sigma: float = 10.0
    sigma_face: float = None
    out: str = None
    vtk_dir: str = None
    n0: int = 8
    bounds: tuple = (-2.0, 2.0)

    def __post_init__(self):
        if self.degree not in basis.SUPPORTED_DEGREES:
            raise ConfigError(f"degree must be one of {basis.SUPPORTED_DEGREES}")
        if self.stab not in assembly.STAB_KINDS:
            raise ConfigError(f"stab must be one of {assembly.STAB_KINDS}")
        if self.mode not in ("uniform", "adaptive"):
            raise ConfigError("mode must be 'uniform' or 'adaptive'")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if self.rho_scale <= 0 or self.sigma <= 0:
            raise ConfigError("stabilization parameters must be positive")
        if self.sigma_face is not None and self.sigma_face <= 0:
            raise ConfigError("stabilization parameters must be positive")


@dataclass
class CycleRecord:
    cycle: int
    dofs: int
    l2_error: float
    h1_error: float
    estimator: float
    I1: float
    I2: float
    I3: float
    cg_iters: int
    wall_seconds: float

    def as_row(self):
        return [getattr(self, f) for f in CSV_FIELDS]


def run(config, progress=None, inspect=None):
    """Run the experiment; returns the list of per-cycle records.

    With ``config.out`` set, a CSV row is appended after every cycle so
    partial results survive interruption.  ``inspect``, when given, is called
    once per cycle with ``(mesh, cls, eta2)`` before refinement, exposing the
    mesh state for validation.
    """
    case = ManufacturedCase(config.lam)
    stab = assembly.StabilizationConfig(config.stab, rho_scale=config.rho_scale,
                                        sigma=config.sigma,
                                        sigma_face=config.sigma_face)
    mesh = meshmod.create_uniform(config.bounds, config.n0)
    writer = _CsvWriter(config.out) if config.out else None
    records = []
    for cycle in range(config.cycles):
        t0 = time.perf_counter()
        field = levelset.interpolate(sphere_levelset, mesh, config.degree)
        cls = levelset.classify(field, mesh, axis_clearance=AXIS_CLEARANCE)
        dofmap = space.build(mesh, cls.cut_cells, config.degree)
        constraints = space.build_constraints(mesh, dofmap)
        system = assembly.assemble(cls, dofmap, constraints, stab, case.source)
        u, report = solver.solve(system)
        eta2_res = estimator.residual_energies(cls, dofmap, u, case.source)
        weights = estimator.default_weights(stab.kind)
        eta2 = weights.alpha_r * eta2_res
        if weights.alpha_e > 0:
            eta2 = eta2 + weights.alpha_e * assembly.face_jump_energies(cls, dofmap, u)
        eta2 = eta2 + weights.alpha_s * assembly.stab_energies(cls, dofmap, stab, u)
        l2, h1, err2_cells = surface_errors(cls, dofmap, u, case)
        eff = efficiency_indexes(mesh, cls, field, eta2, eta2_res, err2_cells)
        rec = CycleRecord(cycle, system.nfree, l2, h1, estimator.total_indicator(eta2),
                          eff.I1, eff.I2, eff.I3, report.iterations,
                          time.perf_counter() - t0)
        records.append(rec)
        if writer:
            writer.write(rec)
        if config.vtk_dir:
            _write_cycle_vtk(config.vtk_dir, cycle, mesh, cls, eta2)
        if progress:
            progress(rec)
        if inspect:
            inspect(mesh, cls, eta2)
        if cycle + 1 < config.cycles:
            if config.mode == "uniform":
                marked = list(cls.cut_cells)
            else:
                marked = estimator.dorfler_mark(cls.cut_cells, eta2, config.theta)
            mesh = mesh.refine_with_closure(marked)
    return records


class _CsvWriter:
    def __init__(self, path):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CSV_FIELDS)
        self._fh.flush()

    def write(self, rec):
        self._writer.writerow(rec.as_row())
        self._fh.flush()


def _write_cycle_vtk(vtk_dir, cycle, mesh, cls, eta2):
    os.makedirs(vtk_dir, exist_ok=True)
    data = {
        "cut": {c: 1.0 for c in cls.cut_cells},
        "indicator2": {c: float(e) for c, e in zip(cls.cut_cells, eta2)},
    }
    mesh.write_vtk(os.path.join(vtk_dir, f"cycle_{cycle:03d}.vtk"), data)


def fit_rate(dofs, errors, tail=None):
    """Least-squares slope of log(error) against log(dofs).

    ``tail`` restricts the fit to the last so many data points.
    """
    dofs = np.asarray(dofs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if tail is not None:
        dofs, errors = dofs[-tail:], errors[-tail:]
    if len(dofs) < 2:
        raise ValueError("need at least two points for a rate")
    return float(np.polyfit(np.log(dofs), np.log(errors), 1)[0])
