import numpy as np
import pytest
import scipy.sparse.linalg as spla

from tracefem import assembly, benchmark, solver

from conftest import rng


def _assemble(setup, stab):
    m, fld, cls, dofmap, constraints = setup
    case = benchmark.ManufacturedCase(1.0)
    return assembly.assemble(cls, dofmap, constraints, stab, case.source)


@pytest.mark.parametrize("kind", ["nv", "jf"])
def test_matrix_symmetric(hanging_setup_q1, kind):
    sysm = _assemble(hanging_setup_q1, assembly.StabilizationConfig(kind, sigma=10.0))
    A = sysm.matrix
    asym = abs(A - A.T).max()
    assert asym <= 1e-12 * abs(A).max()


def test_matrix_symmetric_q2(hanging_setup_q2):
    sysm = _assemble(hanging_setup_q2, assembly.StabilizationConfig("jf", sigma=10.0))
    A = sysm.matrix
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


@pytest.mark.parametrize("kind", ["nv", "jf"])
def test_stabilization_psd_random_vectors(hanging_setup_q1, kind):
    """The stabilization is linear in its strength, so the difference of two
    assemblies isolates it; it must be positive semidefinite."""
    m, fld, cls, dofmap, constraints = hanging_setup_q1
    case = benchmark.ManufacturedCase(1.0)
    if kind == "nv":
        s1 = assembly.StabilizationConfig("nv", rho_scale=1.0)
        s2 = assembly.StabilizationConfig("nv", rho_scale=2.0)
    else:
        s1 = assembly.StabilizationConfig("jf", sigma=1.0)
        s2 = assembly.StabilizationConfig("jf", sigma=2.0)
    A1 = assembly.assemble(cls, dofmap, constraints, s1, case.source).matrix
    A2 = assembly.assemble(cls, dofmap, constraints, s2, case.source).matrix
    S = (A2 - A1).tocsr()
    r = rng(41)
    scale = abs(S).max()
    for _ in range(20):
        v = r.standard_normal(S.shape[0])
        assert v @ (S @ v) >= -1e-12 * scale * (v @ v)


def test_stab_matrix_energy_matches_per_cell_sum(hanging_setup_q1):
    """u^T S u accumulated from the global matrix equals the sum of the
    cell-local stabilization energies (faces counted from both sides)."""
    m, fld, cls, dofmap, constraints = hanging_setup_q1
    case = benchmark.ManufacturedCase(1.0)
    for kind, mk in (("jf", lambda s: assembly.StabilizationConfig("jf", sigma=s)),
                     ("nv", lambda s: assembly.StabilizationConfig("nv", rho_scale=s))):
        A1 = assembly.assemble(cls, dofmap, constraints, mk(1.0), case.source).matrix
        A2 = assembly.assemble(cls, dofmap, constraints, mk(2.0), case.source).matrix
        S = A2 - A1  # the unit-strength stabilization, condensed
        u_free = rng(42).standard_normal(S.shape[0])
        u = constraints.matrix() @ u_free
        energies = assembly.stab_energies(cls, dofmap, mk(1.0), u)
        assert np.all(energies >= -1e-14)
        assert np.isclose(u_free @ (S @ u_free), energies.sum(), rtol=1e-10)


def test_face_jump_energy_zero_for_smooth_field(hanging_setup_q1):
    """A globally linear function has a continuous gradient, so every face
    jump energy vanishes."""
    m, fld, cls, dofmap, constraints = hanging_setup_q1
    p = dofmap.points
    u = 0.3 * p[:, 0] - 1.2 * p[:, 1] + 0.7 * p[:, 2] + 0.5
    e = assembly.face_jump_energies(cls, dofmap, u)
    assert np.max(e) < 1e-20
    s = assembly.stab_energies(
        cls, dofmap, assembly.StabilizationConfig("jf", sigma=10.0), u)
    assert np.max(s) < 1e-20


def test_nv_energy_vanishes_only_for_constants(hanging_setup_q1):
    m, fld, cls, dofmap, constraints = hanging_setup_q1
    stab = assembly.StabilizationConfig("nv", rho_scale=10.0)
    u = np.full(dofmap.ndof, 3.7)
    assert np.max(assembly.stab_energies(cls, dofmap, stab, u)) < 1e-20
    v = dofmap.points[:, 0].copy()  # radial component somewhere on the band
    assert assembly.stab_energies(cls, dofmap, stab, v).sum() > 1e-3


@pytest.mark.parametrize("kind", ["nv", "jf"])
def test_constant_reproduced_exactly(hanging_setup_q1, kind):
    """f = 1 forces u = 1: the discrete system must reproduce it to
    round-off, stabilization included."""
    m, fld, cls, dofmap, constraints = hanging_setup_q1
    stab = assembly.StabilizationConfig(kind, rho_scale=10.0, sigma=10.0)
    sysm = assembly.assemble(cls, dofmap, constraints, stab,
                             lambda p: np.ones(len(np.atleast_2d(p))))
    u, rep = solver.solve(sysm, rtol=1e-13)
    assert rep.converged
    assert np.max(np.abs(u - 1.0)) < 1e-9


def test_rhs_matches_direct_quadrature(sphere_setup_q1):
    m, fld, cls = sphere_setup_q1
    from tracefem import space
    dofmap = space.build(m, cls.cut_cells, 1)
    constraints = space.build_constraints(m, dofmap)
    case = benchmark.ManufacturedCase(1.0)
    sysm = assembly.assemble(cls, dofmap, constraints,
                             assembly.StabilizationConfig("nv"), case.source)
    # sum of the condensed rhs = integral of f over the discrete surface:
    # the constraint weights are a partition of unity, so condensation
    # preserves the total
    total = np.sum(cls.qweights * case.source(cls.qpoints))
    assert np.isclose(sysm.rhs.sum(), total, rtol=1e-10)


def test_rejects_unknown_stabilization():
    from tracefem.errors import ConfigError
    with pytest.raises(ConfigError):
        assembly.StabilizationConfig("upwind")
    with pytest.raises(ConfigError):
        assembly.StabilizationConfig("nv", rho_scale=-1.0)
