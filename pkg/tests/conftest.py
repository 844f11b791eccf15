import math

import numpy as np
import pytest

from fcm import assembly, basis, geometry


@pytest.fixture(scope="session")
def slab_config():
    """Small trimmed Poisson setup: a rectangle whose right edge cuts one
    cell column at a 2% volume fraction, Dirichlet only on that edge."""
    h = 0.25
    x_cut = 0.5 + 0.02 * h
    domain = geometry.RotatedRectangle((x_cut - 1.0, 0.5), 2.0, 3.0, 0.0)
    mesh = geometry.CartesianMesh.covering((0.0, 0.0, 1.0, 1.0), h)
    cells = geometry.tessellate(domain, mesh, 2, 3)
    space = basis.build_space(mesh, "bspline", 2, active_cells=cells)
    bc = {"edge1": ("dirichlet", None), "edge0": ("neumann", None),
          "edge2": ("neumann", None), "edge3": ("neumann", None)}
    return domain, mesh, cells, space, bc


@pytest.fixture(scope="session")
def slab_system(slab_config):
    domain, mesh, cells, space, bc = slab_config
    return assembly.assemble_poisson(cells, space, bc)


@pytest.fixture(scope="session")
def rotating_setup():
    """One rotating-square configuration at desk scale (h=1/16 keeps dense
    oracles comfortable)."""
    h = 1.0 / 16.0
    half = math.sqrt(2.0) / 2.0
    mesh = geometry.CartesianMesh.covering((-half, -half, half, half), h)
    domain = geometry.square_with_circular_exclusion(45.0, h)
    cells = geometry.tessellate(domain, mesh, 2, 3)
    space = basis.build_space(mesh, "bspline", 2, active_cells=cells)
    bc = {c.curve_id: ("dirichlet", None) for c in domain.curves}
    system = assembly.assemble_poisson(cells, space, bc)
    return domain, mesh, cells, space, system


def rng(seed=0):
    return np.random.default_rng(seed)
