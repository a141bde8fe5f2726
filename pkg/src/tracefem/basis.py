"""Tensor-product Lagrange bases on the unit cube and Bernstein-form bounds.

Local node ordering is lexicographic with x fastest:
``local = (mz*(k+1) + my)*(k+1) + mx``.  All evaluation routines are
vectorized over an arbitrary leading shape of reference points.
"""

import numpy as np

SUPPORTED_DEGREES = (1, 2)


def gauss_1d(n):
    """Gauss-Legendre points/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def lagrange_1d(k, t):
    """Values, first and second derivatives of the 1D equispaced Lagrange basis.

    Returns three arrays of shape ``t.shape + (k+1,)``.
    """
    t = np.asarray(t, dtype=float)
    if k == 1:
        one = np.ones_like(t)
        v = np.stack([1.0 - t, t], axis=-1)
        d = np.stack([-one, one], axis=-1)
        dd = np.zeros_like(v)
    elif k == 2:
        t2 = t * t
        v = np.stack([2.0 * t2 - 3.0 * t + 1.0, 4.0 * t - 4.0 * t2, 2.0 * t2 - t], axis=-1)
        d = np.stack([4.0 * t - 3.0, 4.0 - 8.0 * t, 4.0 * t - 1.0], axis=-1)
        one = np.ones_like(t)
        dd = np.stack([4.0 * one, -8.0 * one, 4.0 * one], axis=-1)
    else:
        raise ValueError(f"unsupported degree {k}")
    return v, d, dd


def eval_1d(k, coef, t):
    """Evaluate a 1D Lagrange expansion ``coef`` (..., k+1) at ``t`` (...)."""
    v, _, _ = lagrange_1d(k, t)
    return np.sum(coef * v, axis=-1)


def eval_1d_deriv(k, coef, t):
    _, d, _ = lagrange_1d(k, t)
    return np.sum(coef * d, axis=-1)


def tensor_basis(k, pts, hessians=False):
    """Shape functions of the Q_k element at reference points ``pts`` (N, 3).

    Returns ``(values, grads, hess)`` with shapes (N, nloc), (N, nloc, 3) and
    (N, nloc, 3, 3); ``hess`` is None unless requested.  Derivatives are with
    respect to reference coordinates.
    """
    pts = np.asarray(pts, dtype=float)
    n1 = k + 1
    vx, dx, ddx = lagrange_1d(k, pts[..., 0])
    vy, dy, ddy = lagrange_1d(k, pts[..., 1])
    vz, dz, ddz = lagrange_1d(k, pts[..., 2])

    def combine(fz, fy, fx):
        out = fz[..., :, None, None] * fy[..., None, :, None] * fx[..., None, None, :]
        return out.reshape(out.shape[:-3] + (n1 ** 3,))

    vals = combine(vz, vy, vx)
    grads = np.stack([combine(vz, vy, dx), combine(vz, dy, vx), combine(dz, vy, vx)], axis=-1)
    hess = None
    if hessians:
        hxx = combine(vz, vy, ddx)
        hyy = combine(vz, ddy, vx)
        hzz = combine(ddz, vy, vx)
        hxy = combine(vz, dy, dx)
        hxz = combine(dz, vy, dx)
        hyz = combine(dz, dy, vx)
        hess = np.empty(vals.shape + (3, 3))
        hess[..., 0, 0] = hxx
        hess[..., 1, 1] = hyy
        hess[..., 2, 2] = hzz
        hess[..., 0, 1] = hess[..., 1, 0] = hxy
        hess[..., 0, 2] = hess[..., 2, 0] = hxz
        hess[..., 1, 2] = hess[..., 2, 1] = hyz
    return vals, grads, hess


def local_nodes(k):
    """Reference coordinates of the (k+1)^3 local nodes, ordering as above."""
    t = np.linspace(0.0, 1.0, k + 1)
    zz, yy, xx = np.meshgrid(t, t, t, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


# ---------------------------------------------------------------------------
# Bernstein form: certified bounds and dyadic subdivision.

def _l2b_matrix(k):
    if k == 1:
        return np.eye(2)
    # values at 0, 1/2, 1 -> Bernstein coefficients of degree 2
    return np.array([[1.0, 0.0, 0.0], [-0.5, 2.0, -0.5], [0.0, 0.0, 1.0]])


def lagrange_to_bernstein(k, coef):
    """Convert tensor Lagrange coefficients (..., n1, n1, n1) to Bernstein form."""
    m = _l2b_matrix(k)
    out = np.asarray(coef, dtype=float)
    for axis in (-3, -2, -1):
        out = np.moveaxis(np.tensordot(out, m, axes=([axis], [1])), -1, axis)
    return out


def bernstein_range(bern):
    """Certified (min, max) bound of the polynomial over the box.

    Reduces over the last three axes.
    """
    flat = bern.reshape(bern.shape[:-3] + (-1,))
    return flat.min(axis=-1), flat.max(axis=-1)


def bernstein_derivative(bern, axis):
    """Bernstein coefficients (degree lowered along ``axis``) of the derivative."""
    k = bern.shape[axis] - 1
    upper = np.take(bern, range(1, k + 1), axis=axis)
    lower = np.take(bern, range(0, k), axis=axis)
    return k * (upper - lower)


def bernstein_split(bern, axis):
    """de Casteljau split at the midpoint along ``axis``; returns (left, right)."""
    rows = [np.moveaxis(bern, axis, 0)]
    while rows[-1].shape[0] > 1:
        prev = rows[-1]
        rows.append(0.5 * (prev[:-1] + prev[1:]))
    left = np.stack([r[0] for r in rows], axis=0)
    right = np.stack([r[-1] for r in reversed(rows)], axis=0)
    return np.moveaxis(left, 0, axis), np.moveaxis(right, 0, axis)
