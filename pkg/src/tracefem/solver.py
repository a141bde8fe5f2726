"""Preconditioned conjugate gradients for the condensed trace system."""

from dataclasses import dataclass

import numpy as np
import pyamg
from scipy.sparse import diags

from .errors import SolverError

# below this size an algebraic multigrid hierarchy costs more than it saves
_AMG_MIN_DOFS = 2000


@dataclass
class SolveReport:
    iterations: int
    residual: float        # final relative residual |b - A x| / |b|
    converged: bool


def _preconditioner(A, diag, candidates=None):
    if A.shape[0] < _AMG_MIN_DOFS:
        inv_diag = 1.0 / diag
        return lambda r: inv_diag * r
    # symmetric diagonal scaling first: strong stabilization penalties spread
    # the row scales over many orders of magnitude, which smoothed
    # aggregation handles poorly on its own
    d = 1.0 / np.sqrt(diag)
    D = diags(d)
    if candidates is None:
        B = np.ones((A.shape[0], 1))
    else:
        B = candidates / d[:, None]  # same scaling as the operator
    ml = pyamg.smoothed_aggregation_solver((D @ A @ D).tocsr(), B=B,
                                           max_coarse=400)
    M = ml.aspreconditioner(cycle="V")
    return lambda r: d * (M @ (d * r))


def solve(system, rtol=1e-8, max_iter=20000):
    """CG with a smoothed-aggregation multigrid preconditioner (plain Jacobi
    for small systems); polynomial candidate vectors supplied by the system
    seed the aggregation.  Returns (full coefficient vector, report).

    Raises SolverError on an indefinite matrix (negative curvature) or a
    non-positive diagonal; non-convergence also raises, with the reached
    residual in the message.
    """
    A = system.matrix
    b = system.rhs
    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise SolverError("system diagonal is not positive; assembly or stabilization is broken")
    apply_m = _preconditioner(A, diag, getattr(system, "candidates", None))
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return system.expand(x), SolveReport(0, 0.0, True)
    z = apply_m(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        curv = p @ Ap
        if curv <= 0.0:
            raise SolverError(f"negative curvature at iteration {it}: matrix is not positive definite")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res < rtol:
            return system.expand(x), SolveReport(it, res, True)
        z = apply_m(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iter} iterations (residual {res:.3e})")
