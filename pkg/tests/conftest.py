import numpy as np
import pytest

from tracefem import benchmark, levelset, mesh as meshmod, space


@pytest.fixture(scope="session")
def sphere_setup_q1():
    """Classified sphere on a coarse uniform grid, degree 1."""
    m = meshmod.create_uniform((-2.0, 2.0), 8)
    fld = levelset.interpolate(benchmark.sphere_levelset, m, 1)
    cls = levelset.classify(fld, m, axis_clearance=benchmark.AXIS_CLEARANCE)
    return m, fld, cls


@pytest.fixture(scope="session")
def sphere_setup_q2():
    m = meshmod.create_uniform((-2.0, 2.0), 8)
    fld = levelset.interpolate(benchmark.sphere_levelset, m, 2)
    cls = levelset.classify(fld, m, axis_clearance=benchmark.AXIS_CLEARANCE)
    return m, fld, cls


def refine_cut_band(m, degree, rounds=1, every=2):
    """Refine a subset of cut cells to create hanging nodes deterministically."""
    for _ in range(rounds):
        fld = levelset.interpolate(benchmark.sphere_levelset, m, degree)
        cls = levelset.classify(fld, m, axis_clearance=benchmark.AXIS_CLEARANCE)
        m = m.refine_with_closure(cls.cut_cells[::every])
    return m


@pytest.fixture(scope="session")
def hanging_setup_q1():
    """Sphere classification on a non-uniform mesh with hanging nodes."""
    m = refine_cut_band(meshmod.create_uniform((-2.0, 2.0), 8), 1, rounds=2)
    fld = levelset.interpolate(benchmark.sphere_levelset, m, 1)
    cls = levelset.classify(fld, m, axis_clearance=benchmark.AXIS_CLEARANCE)
    dofmap = space.build(m, cls.cut_cells, 1)
    constraints = space.build_constraints(m, dofmap)
    return m, fld, cls, dofmap, constraints


@pytest.fixture(scope="session")
def hanging_setup_q2():
    m = refine_cut_band(meshmod.create_uniform((-2.0, 2.0), 8), 2, rounds=2)
    fld = levelset.interpolate(benchmark.sphere_levelset, m, 2)
    cls = levelset.classify(fld, m, axis_clearance=benchmark.AXIS_CLEARANCE)
    dofmap = space.build(m, cls.cut_cells, 2)
    constraints = space.build_constraints(m, dofmap)
    return m, fld, cls, dofmap, constraints


def rng(seed=0):
    return np.random.default_rng(seed)
