import pytest

from app.core.config import dump_run_config, load_key_values, parse_key_values, resolve_run_config
from app.core.errors import ConfigError
from app.models.bundle import WeightSource
from app.models.params import LossKind, TrainMode
from app.schemas import RunConfig, SynthConfig, TrainConfig


class TestKeyValueFiles:
    """key=value parsing"""

    def test_comments_and_blank_lines_are_skipped(self):
        """Test comments and blank lines are skipped"""
        text = "# run\nmode = pat-t   # trailing\n\n  fusion.lambda=0.5\n"
        assert parse_key_values(text) == {"mode": "pat-t", "fusion.lambda": "0.5"}

    def test_line_without_equals_raises(self):
        """Test line without equals raises"""
        with pytest.raises(ConfigError, match=":2:"):
            parse_key_values("seed = 1\nepochs 3\n")

    def test_empty_key_raises(self):
        """Test empty key raises"""
        with pytest.raises(ConfigError):
            parse_key_values("= 3")

    def test_missing_file_raises(self, tmp_path):
        """Test missing file raises"""
        with pytest.raises(ConfigError):
            load_key_values(tmp_path / "absent.txt")


class TestResolveRunConfig:
    """defaults < file < flags"""

    def test_defaults(self):
        """Test defaults"""
        config = resolve_run_config()
        assert config.mode == TrainMode.DET
        assert config.loss.kind == LossKind.ASL
        assert config.loss.gamma_neg == 4.0
        assert config.loss.clip == 0.05
        assert config.fusion.tau == 1.0
        assert config.fusion.lam == 1.0
        assert config.train.learning_rate == 1e-4

    def test_flags_override_file(self):
        """Test flags override file"""
        config = resolve_run_config({"seed": "3", "train.epochs": "5"}, {"train.epochs": 7, "seed": None})
        assert config.seed == 3
        assert config.train.epochs == 7

    def test_unknown_key_raises(self):
        """Test unknown key raises"""
        with pytest.raises(ConfigError, match="train.momentum"):
            resolve_run_config({"train.momentum": "0.9"})

    def test_invalid_value_raises(self):
        """Test invalid value raises"""
        with pytest.raises(ConfigError):
            resolve_run_config({"fusion.tau": "0"})

    def test_disabled_ema(self):
        """Test disabled EMA"""
        assert resolve_run_config({"train.ema": "none"}).train.ema_decay is None
        assert resolve_run_config({"train.ema": "0.99"}).train.ema_decay == 0.99

    def test_lambda_alias(self):
        """Test lambda alias"""
        assert resolve_run_config({"fusion.lambda": "0.25"}).fusion.lam == 0.25

    def test_weight_source_values(self):
        """Test weight source values"""
        config = resolve_run_config({"fusion.weight_source": "theta_head"})
        assert config.fusion.weight_source == WeightSource.THETA_HEAD

    def test_snapshot_resolves_to_the_same_config(self):
        """Test snapshot resolves to the same config"""
        config = resolve_run_config({
            "mode": "pat-t", "seed": "11", "loss.kind": "bce", "fusion.lambda": "0.5",
            "train.ema": "0.9", "synth.rho": "0.75",
        })
        again = resolve_run_config(parse_key_values(dump_run_config(config)))
        assert again.flatten() == config.flatten()
        assert again.training().model_dump() == config.training().model_dump()

    def test_snapshot_is_sorted(self):
        """Test snapshot is sorted"""
        keys = [line.split(" = ")[0] for line in dump_run_config(RunConfig()).splitlines()]
        assert keys == sorted(keys)
        assert "fusion.lambda" in keys and "train.seed" in keys


class TestRunConfigTraining:
    def test_run_seed_and_sections_fold_in(self):
        """Test run seed and sections fold in"""
        config = resolve_run_config({"seed": "9", "loss.kind": "bce", "fusion.tau": "0.5"})
        cfg = config.training()
        assert cfg.seed == 9
        assert cfg.loss.kind == LossKind.BCE
        assert cfg.fusion.tau == 0.5

    def test_explicit_train_seed_wins(self):
        """Test explicit train seed wins"""
        assert resolve_run_config({"seed": "9", "train.seed": "2"}).training().seed == 2


class TestSectionValidation:
    def test_odd_image_side_rejected(self):
        """Test odd image side rejected"""
        with pytest.raises(ValueError):
            SynthConfig(image_side=63)

    def test_glyph_must_fit_quadrant(self):
        """Test glyph must fit quadrant"""
        with pytest.raises(ValueError):
            SynthConfig(image_side=8, glyph_side=5)

    def test_training_fields_accept_aliases(self):
        """Test training fields accept aliases"""
        cfg = TrainConfig(lr=0.5, batch=4, hidden=3, warmup=2)
        assert (cfg.learning_rate, cfg.batch_size, cfg.hidden_size, cfg.warmup_steps) == (0.5, 4, 3, 2)
