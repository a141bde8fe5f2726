import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from tracefem import assembly, benchmark, solver, space
from tracefem.errors import SolverError

from conftest import rng


def _system(setup, kind="nv"):
    m, fld, cls, dofmap, constraints = setup
    case = benchmark.ManufacturedCase(1.0)
    stab = assembly.StabilizationConfig(kind, rho_scale=10.0, sigma=10.0)
    return assembly.assemble(cls, dofmap, constraints, stab, case.source)


def test_cg_matches_direct_solver(hanging_setup_q1):
    sysm = _system(hanging_setup_q1)
    u, rep = solver.solve(sysm, rtol=1e-12)
    assert rep.converged and rep.residual < 1e-12
    u_direct = sysm.expand(spla.spsolve(sysm.matrix.tocsc(), sysm.rhs))
    scale = np.max(np.abs(u_direct))
    assert np.max(np.abs(u - u_direct)) < 1e-8 * scale


def _toy_system(A, b):
    n = A.shape[0]
    eye = sp.identity(n, format="csr")
    return assembly.TraceSystem(sp.csr_matrix(A), b, eye, np.arange(n), n)


def test_zero_rhs_short_circuits():
    A = sp.diags([2.0, 3.0]).tocsr()
    u, rep = solver.solve(_toy_system(A, np.zeros(2)))
    assert rep.iterations == 0 and rep.converged
    assert np.all(u == 0)


def test_nonpositive_diagonal_rejected():
    A = sp.diags([1.0, -1.0]).tocsr()
    with pytest.raises(SolverError):
        solver.solve(_toy_system(A, np.ones(2)))


def test_indefinite_matrix_rejected():
    # positive diagonal but an indefinite matrix: CG hits negative curvature
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(SolverError):
        solver.solve(_toy_system(A, np.array([1.0, -0.3])))


def test_iteration_cap_raises(hanging_setup_q1):
    sysm = _system(hanging_setup_q1)
    with pytest.raises(SolverError):
        solver.solve(sysm, rtol=1e-14, max_iter=2)


def test_report_counts_iterations():
    r = rng(55)
    Q = r.standard_normal((40, 40))
    A = sp.csr_matrix(Q @ Q.T + 40 * np.eye(40))
    b = r.standard_normal(40)
    u, rep = solver.solve(_toy_system(A, b), rtol=1e-11)
    assert rep.converged
    assert 0 < rep.iterations <= 40
    assert np.allclose(A @ u, b, atol=1e-8 * np.linalg.norm(b))
