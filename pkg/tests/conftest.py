import warnings

import numpy as np
import pytest

from hcsaddle.assembly import assemble
from hcsaddle.experiments import Geometry, mesh_for_target
from hcsaddle.mesh import DomainSpec, generate_mesh, rectangle
from hcsaddle.spectral import desk_blocks, desk_geometries


@pytest.fixture(scope="session")
def square_mesh():
    """Unit square at h=0.5: eight triangles around one free node."""
    return generate_mesh(DomainSpec(rectangle(0, 0, 1, 1), [], target_h=0.5))


@pytest.fixture(scope="session")
def two_box_mesh():
    incs = [rectangle(0.25, 0.25, 0.5, 0.5), rectangle(0.625, 0.5, 0.875, 0.75)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_mesh(DomainSpec(rectangle(0, 0, 1, 1), incs, target_h=1 / 16))


@pytest.fixture(scope="session")
def desk_one():
    return desk_blocks(desk_geometries()["one"], 300)[0]


@pytest.fixture(scope="session")
def desk_four():
    return desk_blocks(desk_geometries()["four"], 300)[0]


@pytest.fixture(scope="session", params=["one", "four"])
def desk(request, desk_one, desk_four):
    return {"one": desk_one, "four": desk_four}[request.param]


@pytest.fixture(scope="session")
def small_rings():
    """Seven disks in a radius-2.5 disk, about 600 free nodes."""
    geo = Geometry(outer_radius=2.5, rings=(1, 6))
    return assemble(mesh_for_target(geo, 600))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
