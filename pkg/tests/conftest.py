"""
Shared fixtures: miniature network geometry, small montages and trial sets
"""
import numpy as np
import pytest

from app.models.schemas import VariantConfig
from app.services.data_service import synth_generate
from app.services.montage_service import project_trials, standard_montage

MINI_GRID = 14  # 12 x 12 mesh after the border crop
MINI_T = 8


def mini_variant(**overrides) -> VariantConfig:
    """C=4, H=2, D=2, P=9 (12x12 mesh, kernel 6, stride 3), T=8, K=3, 64-bit."""
    fields = dict(
        name="custom",
        heads=2,
        projections=2,
        local_features=4,
        expansions=4,
        final_channels=4,
        num_classes=3,
        time_frames=MINI_T,
        mesh_size=12,
        spatial_kernel=6,
        spatial_stride=3,
        hidden_sizes=(8, 6),
        dropout=0.0,
        precision="64",
    )
    fields.update(overrides)
    return VariantConfig(**fields)


@pytest.fixture
def mini_cfg() -> VariantConfig:
    return mini_variant()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_montage():
    return standard_montage(32)


@pytest.fixture(scope="session")
def small_trials(small_montage):
    """72 exemplars x 2 trials, one subject, 32 channels, T=8."""
    return synth_generate(small_montage, n_per_exemplar=2, snr=4.0, seed=7, time_frames=MINI_T)


@pytest.fixture(scope="session")
def small_meshes(small_montage, small_trials):
    return project_trials(small_trials.trials, small_montage, MINI_GRID, dtype=np.float64)
