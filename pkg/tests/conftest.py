"""Shared fixtures.

`tiny_*` fixtures are deliberately coarse meshes for unit tests and
brute-force oracles. The desk-scale world used by the acceptance suite is
built once per session in test_acceptance.py.
"""

import numpy as np
import pytest

from eitprobe.forward import (StimPattern, adjacent_schedule, compute_jacobian,
                              homogeneous_field)
from eitprobe.mesh import Mesh, RefinementSpec, TankGeometry, build_mesh

SIGMA_REF = 0.15

TINY_DENSITY = RefinementSpec(near=1.2, far=12.0, growth=2.2)


@pytest.fixture(scope="session")
def tiny_geom() -> TankGeometry:
    return TankGeometry(tank_height=16.0)


@pytest.fixture(scope="session")
def tiny_mesh(tiny_geom) -> Mesh:
    return build_mesh(tiny_geom, TINY_DENSITY)


@pytest.fixture(scope="session")
def tiny_mesh_alt(tiny_geom) -> Mesh:
    """Same geometry, different interior jitter; for provenance tests."""
    return build_mesh(tiny_geom, RefinementSpec(near=1.2, far=12.0,
                                                growth=2.2, seed=5))


@pytest.fixture(scope="session")
def tiny_schedule(tiny_geom):
    return adjacent_schedule(tiny_geom)


@pytest.fixture(scope="session")
def tiny_jacobian(tiny_mesh, tiny_schedule):
    sigma = homogeneous_field(tiny_mesh, SIGMA_REF)
    return compute_jacobian(tiny_mesh, sigma, StimPattern(), tiny_schedule)


@pytest.fixture(scope="session")
def desk_mesh() -> Mesh:
    return build_mesh(TankGeometry(), RefinementSpec())
