import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.api.dependencies import get_settings
from app.core.config import Settings
from app.core.numcore import init_params
from app.core.seeding import substream
from app.core.synthgen import default_atlas, default_spec, generate_dataset
from app.main import app
from app.models.params import TrainMode
from app.schemas import LossConfig, SynthConfig, TrainConfig


def make_model(mode=TrainMode.DET, side=4, hidden=5, num_classes=3, seed=0, zero_heads=False):
    """Small randomly initialised predictor."""
    return init_params(mode, side, hidden, num_classes, substream(seed, "init"), zero_heads=zero_heads)


@pytest.fixture
def rng():
    """Seeded generator for test data"""
    return np.random.default_rng(1234)


@pytest.fixture
def bce_config():
    """BCE training config for small, fast runs"""
    return TrainConfig(
        learning_rate=1e-2,
        epochs=2,
        batch_size=8,
        hidden_size=8,
        loss=LossConfig(kind="bce"),
    )


@pytest.fixture
def tiny_synth_config():
    """8 x 8 scenes with 4 x 4 glyphs"""
    return SynthConfig(n_train=24, n_test=16, image_side=8, glyph_side=4, num_classes=6)


@pytest.fixture
def tiny_spec(tiny_synth_config):
    return default_spec(tiny_synth_config)


@pytest.fixture
def tiny_datasets(tiny_synth_config, tiny_spec):
    """(train, test) splits of the tiny benchmark"""
    cfg = tiny_synth_config
    atlas = default_atlas(tiny_spec, cfg, seed=7)
    return generate_dataset(tiny_spec, atlas, cfg.n_train, cfg.n_test, seed=7,
                            noise_sd=cfg.noise_sd, image_side=cfg.image_side)


@pytest.fixture
def checkpoint_dir(tmp_path):
    path = tmp_path / "checkpoints"
    path.mkdir()
    return path


@pytest.fixture
def client(checkpoint_dir):
    """Create test client with checkpoints resolved under a temporary directory"""
    def override_get_settings():
        return Settings(CHECKPOINT_DIR=str(checkpoint_dir))

    app.dependency_overrides[get_settings] = override_get_settings
    with TestClient(app) as test_client:
        yield test_client
    app.dependency_overrides.clear()


@pytest.fixture
def model_factory():
    """Builds small predictors: model_factory(mode, side=4, hidden=5, num_classes=3)"""
    return make_model
