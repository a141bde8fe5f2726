import numpy as np
import pytest

from tracefem import basis, benchmark, levelset, mesh as meshmod

from conftest import rng


@pytest.mark.parametrize("k", [1, 2])
def test_interpolation_reproduces_degree_k(k):
    m = meshmod.create_uniform((-2.0, 2.0), 3)

    def poly(p):
        p = np.atleast_2d(p)
        out = 0.3 + p[:, 0] - 0.5 * p[:, 1] + 0.25 * p[:, 2]
        if k == 2:
            out = out + p[:, 0] * p[:, 1] - p[:, 2] ** 2
        return out

    fld = levelset.interpolate(poly, m, k)
    pts = rng(21).random((40, 3)) * 3.6 - 1.8
    for p in pts:
        assert abs(fld(p) - poly(p)[0]) < 1e-12


def test_sphere_values_and_normals(sphere_setup_q2):
    m, fld, cls = sphere_setup_q2
    r = rng(22)
    # quadratic interpolant of a quadratic is exact
    pts = r.random((30, 3)) * 3.0 - 1.5
    for p in pts:
        assert abs(fld(p) - (p @ p - 1.0)) < 1e-11
        g = fld.gradient(p)
        assert np.allclose(g, 2.0 * p, atol=1e-10)
        assert np.allclose(fld.hessian(p), 2.0 * np.eye(3), atol=1e-9)
    p = np.array([0.8, 0.3, 0.1])
    n = fld.normal(p)
    assert np.allclose(n, p / np.linalg.norm(p), atol=1e-12)
    # curvature of the level sets of |x|^2: grad n = (I - nn^T)/|x|
    jn = fld.normal_jacobian(p)
    nn = np.outer(n, n)
    assert np.allclose(jn, (np.eye(3) - nn) / np.linalg.norm(p), atol=1e-10)


def test_normal_rejects_degenerate_gradient():
    m = meshmod.create_uniform((-2.0, 2.0), 2)
    fld = levelset.interpolate(benchmark.sphere_levelset, m, 2)
    from tracefem.errors import GeometryError
    with pytest.raises(GeometryError):
        fld.normal(np.zeros(3))


def test_rejects_nonfinite_levelset():
    m = meshmod.create_uniform((-2.0, 2.0), 2)
    with pytest.raises(ValueError):
        levelset.interpolate(lambda p: np.full(len(np.atleast_2d(p)), np.nan), m, 1)


@pytest.mark.parametrize("k", [1, 2])
def test_classification_tags_sphere(k):
    m = meshmod.create_uniform((-2.0, 2.0), 8)
    fld = levelset.interpolate(benchmark.sphere_levelset, m, k)
    cls = levelset.classify(fld, m, axis_clearance=benchmark.AXIS_CLEARANCE)
    tags = cls.tags
    assert set(tags) == m.active
    # the cell at the origin is interior, a corner cell exterior
    assert tags[m.active_cell_at([0.01, 0.01, 0.01])] == levelset.INTERIOR
    assert tags[m.active_cell_at([1.9, 1.9, 1.9])] == levelset.EXTERIOR
    # any cell containing a surface point is cut
    for p in rng(23).standard_normal((50, 3)):
        p = p / np.linalg.norm(p)
        assert tags[m.active_cell_at(p)] == levelset.CUT, p
    assert sorted(cls.cut_cells) == cls.cut_cells
    assert len(cls.cut_cells) == len(cls.offsets) - 1


def test_quadrature_points_lie_on_discrete_surface(sphere_setup_q1, sphere_setup_q2):
    for m, fld, cls in (sphere_setup_q1, sphere_setup_q2):
        assert np.all(cls.qweights > 0)
        idx = rng(24).choice(len(cls.qpoints), size=200, replace=False)
        for p in cls.qpoints[idx]:
            assert abs(fld(p)) < 1e-10


def test_rule_slices_match_cells(sphere_setup_q1):
    m, fld, cls = sphere_setup_q1
    cell = cls.cut_cells[3]
    rule = cls.rule(cell)
    lo = m.cell_lo(cell)
    h = m.cell_size(cell[0])
    assert np.all(rule.points >= lo - 1e-12)
    assert np.all(rule.points <= lo + h + 1e-12)
    s = slice(cls.offsets[3], cls.offsets[4])
    assert np.allclose(rule.weights, cls.qweights[s])


def test_face_is_cut_plane():
    m = meshmod.create_uniform((-2.0, 2.0), 4)
    fld = levelset.interpolate(lambda p: np.atleast_2d(p)[:, 2] - 0.25, m, 1)
    faces = m.internal_faces(m.sorted_active())
    for f in faces:
        expect = (f.axis != 2
                  and abs(f.center[2] - 0.25) < 0.5)  # z in (−0.25, 0.75)
        if f.axis == 2:
            expect = False  # faces normal to z are level sets of phi
        assert levelset.face_is_cut(fld, f) == expect, (f.center, f.axis)


def test_gapfree_surface_across_hanging_faces(hanging_setup_q1):
    """phi_h is continuous across coarse-fine interfaces, so cut cells on the
    two sides agree about the surface location on their shared face."""
    m, fld, cls, dofmap, constraints = hanging_setup_q1
    fminus, fplus, faxis, fcenter, fh = m.internal_face_arrays(m.sorted_active())
    hang = np.flatnonzero(fminus[:, 0] != fplus[:, 0])
    r = rng(25)
    checked = 0
    for i in hang[:200]:
        ax = faxis[i]
        b1, b2 = [a for a in range(3) if a != ax]
        for t1, t2 in r.random((5, 2)):
            p = fcenter[i].copy()
            p[b1] += (t1 - 0.5) * fh[i]
            p[b2] += (t2 - 0.5) * fh[i]
            vals = []
            for cell in (tuple(fminus[i]), tuple(fplus[i])):
                lo = m.cell_lo(cell)
                h = m.cell_size(cell[0])
                ref = np.clip((p - lo) / h, 0.0, 1.0)
                v, _, _ = basis.tensor_basis(fld.degree, ref[None])
                vals.append(float(fld.cell_coef(cell) @ v[0]))
            assert abs(vals[0] - vals[1]) < 1e-12
            checked += 1
    assert checked > 0
