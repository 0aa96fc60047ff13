import numpy as np
import pytest
import torch

from nerfloc.field import FieldConfig, SceneField
from nerfloc.geometry import CameraIntrinsics, CameraPose
from nerfloc.scene_data import SyntheticSceneSpec, generate_synthetic


def tiny_field_config(**kw) -> FieldConfig:
    base = dict(feature_dim=16, n_layers=4, skip_layer_index=2, pe_x_bands=3, pe_d_bands=2, appearance_dim=4,
                n_sequences=2, near=0.05, far=2.0, n_coarse=8, n_fine=8)
    base.update(kw)
    return FieldConfig(**base)


@pytest.fixture
def tiny_field():
    torch.manual_seed(0)
    return SceneField(tiny_field_config())


@pytest.fixture
def K32():
    return CameraIntrinsics(28.0, 28.0, 16.0, 16.0, 32, 32)


@pytest.fixture(scope="session")
def small_scene():
    """A 32 px synthetic scene with 6 train and 2 test views."""
    spec = SyntheticSceneSpec(seed=3, n_train_views=6, n_test_views=2, image_size=32)
    return generate_synthetic(spec)


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> CameraPose:
    q = rng.normal(size=4)
    return CameraPose(q, rng.normal(size=3) * scale)


TINY_NERF = dict(rays_per_batch=1024, n_coarse=16, n_fine=16, epochs=8, lr=5e-3, feature_dim=32, n_layers=4,
                 skip_layer_index=2, pe_x_bands=6, pe_d_bands=2, appearance_dim=4)


@pytest.fixture(scope="session")
def small_field(small_scene):
    """A briefly trained field on ``small_scene``: opaque renders, rough geometry."""
    from nerfloc.nerf_training import NerfTrainConfig, train_scene

    ds, _ = small_scene
    return train_scene(ds, NerfTrainConfig(**TINY_NERF), seed=0, evaluate=False).field


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
