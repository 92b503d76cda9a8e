import numpy as np
import pytest

from ditquant.diffusion import SyntheticDataset, make_schedule
from ditquant.model import DiTConfig
from ditquant.training import train_fp

# One trained toy model shared by the whole session; every consumer treats it
# as read-only. Shape choices: 16 tokens keep post-softmax rows peaky, eight
# narrow heads give attention sites real weight, two blocks give two of each
# site kind, T=100 matches the calibration grouping used throughout.
TOY_CONFIG = DiTConfig(image_size=16, channels=1, patch_size=4, embed_dim=32,
                       num_blocks=2, num_heads=8, num_classes=8, timesteps=100,
                       mlp_ratio=1)
TOY_TRAIN_STEPS = 2000
TOY_SEED = 11
DATASET_SEED = 5


@pytest.fixture(scope="session")
def toy_dataset():
    return SyntheticDataset(TOY_CONFIG.num_classes, TOY_CONFIG.image_size,
                            TOY_CONFIG.channels, seed=DATASET_SEED)


@pytest.fixture(scope="session")
def toy_schedule():
    return make_schedule(TOY_CONFIG.timesteps)


@pytest.fixture(scope="session")
def toy_train_result(toy_dataset, toy_schedule):
    return train_fp(TOY_CONFIG, toy_dataset, toy_schedule, steps=TOY_TRAIN_STEPS,
                    seed=TOY_SEED, batch_size=64)


@pytest.fixture(scope="session")
def toy_model(toy_train_result):
    return toy_train_result.model


@pytest.fixture(scope="session")
def toy_stats(toy_model, toy_schedule, toy_dataset):
    """Shared calibration statistics (G=10, n=8, forward-corruption mode)."""
    from ditquant.calibration import build_calib_dataset, collect_layer_stats

    calib = build_calib_dataset(toy_model, toy_schedule, toy_dataset,
                                groups=10, per_group=8, mode="forward", seed=401)
    return calib, collect_layer_stats(toy_model, calib)


def rel_err(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-8) -> float:
    """Infinity-norm relative deviation, scaled by the reference tensor's range.

    Central differences carry O(h^2) truncation noise, so elementwise ratios
    on near-zero entries measure oracle noise rather than gradient error; the
    tensor-scale normalization is the standard gradcheck metric.
    """
    scale = max(float(np.max(np.abs(exact))), floor)
    return float(np.max(np.abs(approx - exact)) / scale)
