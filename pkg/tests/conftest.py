"""Shared fixtures. BLAS threading is pinned to one thread before numpy
loads so results are reproducible and timed criteria measure single-threaded
performance."""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from frnf import scene_field as sf
from frnf.renderer import Camera


@pytest.fixture(scope="session")
def basis():
    return sf.make_basis("axes_plus_icosahedron", 6)


@pytest.fixture(scope="session")
def small_cfg():
    return sf.FieldConfig(hidden_dim=32, latent_dim=32, target_feature_dim=16,
                          max_classes=4, n_hidden_layers=4, skip_layer=2)


@pytest.fixture(scope="session")
def small_basis():
    return sf.make_basis("axes_plus_icosahedron", 2)


@pytest.fixture
def small_params(small_cfg, small_basis):
    return sf.init_scene_params(small_cfg, small_basis, seed=11)


@pytest.fixture(scope="session")
def cam():
    return Camera(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120,
                  near=0.2, far=6.0)


@pytest.fixture(scope="session")
def unit_bounds():
    return (np.array([-3.0, -3.0, -3.0]), np.array([3.0, 3.0, 3.0]))
