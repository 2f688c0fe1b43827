"""Shared fixtures: reference meshes and default physics."""

import numpy as np
import pytest

from deform_families import apply_bend_twist, canonical_cylinder
from fem_assembly import PhysicsParams
from gradient_sequences import GradientScheme, PgseSequence
from mesh_io import build_mesh


@pytest.fixture
def unit_tet():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return build_mesh(verts, [[0, 1, 2, 3]], name='unit_tet')


@pytest.fixture(scope='session')
def small_cylinder():
    # 1 ring x 5 layers, V = 45
    return canonical_cylinder(1.0, 2.0, 45)


@pytest.fixture(scope='session')
def small_bent(small_cylinder):
    return apply_bend_twist(small_cylinder, 0.3)


@pytest.fixture(scope='session')
def cylinder():
    return canonical_cylinder()


@pytest.fixture(scope='session')
def bent_cylinder(cylinder):
    return apply_bend_twist(cylinder, 0.3)


@pytest.fixture
def physics():
    return PhysicsParams()


@pytest.fixture
def small_scheme():
    """One PGSE (delta=1, Delta=5 ms), the coordinate axes, b = 1000 s/mm^2."""
    return GradientScheme.from_bvalues([PgseSequence(1.0, 5.0)], np.eye(3), [1.0])
