import numpy as np
import pytest

from tracefem import basis, mesh as meshmod, space

from conftest import rng


@pytest.mark.parametrize("k", [1, 2])
def test_dof_count_uniform(k):
    n = 3
    m = meshmod.create_uniform((0.0, 3.0), n)
    dm = space.build(m, m.sorted_active(), k)
    assert dm.ndof == (k * n + 1) ** 3
    assert dm.cell_dofs.shape == (n ** 3, (k + 1) ** 3)
    # shared nodes carry one global index: every interior grid point is hit
    assert len(np.unique(dm.cell_dofs)) == dm.ndof


@pytest.mark.parametrize("k", [1, 2])
def test_support_points_physical(k):
    m = meshmod.create_uniform((-2.0, 2.0), 2)
    dm = space.build(m, m.sorted_active(), k)
    step = 2.0 / k
    expect = np.array(sorted(
        (x, y, z)
        for z in np.arange(-2.0, 2.0 + 1e-9, step)
        for y in np.arange(-2.0, 2.0 + 1e-9, step)
        for x in np.arange(-2.0, 2.0 + 1e-9, step)))
    got = np.array(sorted(map(tuple, dm.points)))
    assert np.allclose(got, expect)


@pytest.mark.parametrize("k", [1, 2])
def test_shared_dofs_across_levels(k):
    m = meshmod.create_uniform((0.0, 2.0), 2)
    m = m.refine_with_closure([(0, 0, 0, 0)])
    dm = space.build(m, m.sorted_active(), k)
    # the coarse corner node at (1,1,1) coincides with a fine node
    i = np.flatnonzero(np.all(np.isclose(dm.points, 1.0), axis=1))
    assert len(i) == 1  # deduplicated


@pytest.mark.parametrize("k", [1, 2])
def test_constraint_continuity_at_interfaces(k):
    """A constrained coefficient vector is single-valued across hanging faces."""
    m = meshmod.create_uniform((-2.0, 2.0), 2)
    m = m.refine_with_closure([(0, 0, 0, 0), (0, 1, 1, 1)])
    cells = m.sorted_active()
    dm = space.build(m, cells, k)
    cons = space.build_constraints(m, dm)
    assert len(cons) > 0
    r = rng(11)
    u = r.standard_normal(dm.ndof)
    cons.apply_to_values(u)

    fminus, fplus, faxis, fcenter, fh = m.internal_face_arrays(cells)
    hang = fminus[:, 0] != fplus[:, 0]
    checked = 0
    for mc, pc, ax, c, hf in zip(fminus[hang], fplus[hang], faxis[hang],
                                 fcenter[hang], fh[hang]):
        b1, b2 = [a for a in range(3) if a != ax]
        for t1, t2 in r.random((12, 2)):
            p = np.array(c, dtype=float)
            p[b1] += (t1 - 0.5) * hf
            p[b2] += (t2 - 0.5) * hf
            vals = []
            for cell in (tuple(mc), tuple(pc)):
                v, _, _ = space.evaluate(dm, cell, p)
                vals.append(float(v @ u[dm.cell_dofs[dm.cell_index[cell]]]))
            assert abs(vals[0] - vals[1]) <= 1e-12
            checked += 1
    assert checked >= 100


@pytest.mark.parametrize("k", [1, 2])
def test_prolongation_matrix_consistency(k):
    m = meshmod.create_uniform((-2.0, 2.0), 2)
    m = m.refine_with_closure([(0, 0, 0, 0)])
    dm = space.build(m, m.sorted_active(), k)
    cons = space.build_constraints(m, dm)
    C = cons.matrix()
    free = cons.free_dofs()
    assert C.shape == (dm.ndof, len(free))
    r = rng(12)
    x = r.standard_normal(len(free))
    u = C @ x
    # free entries pass through unchanged
    assert np.allclose(u[free], x)
    # and the expansion satisfies every constraint row
    for d, terms in cons.rows.items():
        assert abs(u[d] - sum(a * u[mast] for mast, a in terms)) < 1e-13
        # masters are themselves unconstrained
        for mast, _ in terms:
            assert mast not in cons.rows


@pytest.mark.parametrize("k", [1, 2])
def test_polynomial_reproduction_through_constraints(k):
    """Nodal interpolation of a degree-k polynomial already satisfies the
    hanging-node constraints, so applying them changes nothing."""
    m = meshmod.create_uniform((-2.0, 2.0), 2)
    m = m.refine_with_closure([(0, 0, 0, 0)])
    dm = space.build(m, m.sorted_active(), k)
    cons = space.build_constraints(m, dm)
    p = dm.points
    vals = p[:, 0] ** k + 2.0 * p[:, 1] - 0.5 * p[:, 2] ** k + 1.0
    before = vals.copy()
    cons.apply_to_values(vals)
    assert np.allclose(vals, before, atol=1e-12)
