import numpy as np
import pandas as pd
import pytest

from app.core.errors import FormatError
from app.core.metrics import PairConditionReport, PairRow, StepwiseRow
from app.models.checkpoint import Checkpoint
from app.models.params import AdamState, EpochRecord, TrainHistory, TrainMode
from app.schemas import TrainConfig
from app.storage.checkpoints import (
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    int_checkpoint_name,
    load_checkpoint,
    save_checkpoint,
)
from app.storage.datasets import dataset_from_bytes, dataset_to_bytes, load_dataset, manifest_path, save_dataset
from app.storage.tables import (
    PredictionTable,
    read_pairs,
    read_predictions,
    read_report,
    write_compare,
    write_pairs,
    write_predictions,
    write_report,
    write_stepwise,
    write_train_log,
)


def _same_params(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays())) and len(a.arrays()) == len(b.arrays())


class TestCheckpoints:
    """PATC binary checkpoints"""

    def test_round_trip_is_bit_exact(self, model_factory):
        """Test round trip is bit exact"""
        params = model_factory(TrainMode.PAT_T, seed=1)
        ema = model_factory(TrainMode.PAT_T, seed=2)
        config = TrainConfig(epochs=3, ema_decay=0.99, lr=1e-3)
        checkpoint = Checkpoint(params, config, TrainMode.PAT_T, epoch=3, metrics={"test_map": 0.125}, ema_params=ema)
        restored = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint))
        assert _same_params(restored.params, params)
        assert _same_params(restored.ema_params, ema)
        assert restored.config.model_dump() == config.model_dump()
        assert restored.mode == TrainMode.PAT_T
        assert restored.epoch == 3
        assert restored.metrics == {"test_map": 0.125}
        assert set(restored.params.networks[0].heads) == {"phi", "psi", "theta"}

    def test_independent_model_keeps_class_index(self, model_factory, tmp_path):
        """Test independent model keeps class index"""
        params = model_factory(TrainMode.INT, num_classes=1)
        checkpoint = Checkpoint(params, TrainConfig(), TrainMode.INT, epoch=1, class_index=4)
        path = save_checkpoint(checkpoint, tmp_path / int_checkpoint_name(4))
        assert path.name == "int_class_04.patc"
        restored = load_checkpoint(path)
        assert restored.class_index == 4
        assert restored.ema_params is None
        assert _same_params(restored.params, params)

    def test_optimizer_state_round_trip(self, model_factory):
        """Test that Adam moments and step count survive the file"""
        params = model_factory(TrainMode.INT, num_classes=1, seed=1)
        state = AdamState(model_factory(TrainMode.INT, num_classes=1, seed=2),
                          model_factory(TrainMode.INT, num_classes=1, seed=3), step=17, beta2=0.99)
        checkpoint = Checkpoint(params, TrainConfig(), TrainMode.INT, epoch=2, class_index=0, optimizer=state)
        restored = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint)).optimizer
        assert restored.step == 17
        assert (restored.beta1, restored.beta2, restored.eps) == (0.9, 0.99, 1e-8)
        assert _same_params(restored.first_moment, state.first_moment)
        assert _same_params(restored.second_moment, state.second_moment)

    def test_checkpoint_without_optimizer_state(self, model_factory):
        """Test checkpoint without optimizer state"""
        data = checkpoint_to_bytes(Checkpoint(model_factory(), TrainConfig(), TrainMode.DET, epoch=1))
        assert checkpoint_from_bytes(data).optimizer is None

    def test_patch_only_heads_survive(self, model_factory):
        """Test patch-only heads survive"""
        params = model_factory(TrainMode.PATCH_ONLY)
        checkpoint = Checkpoint(params, TrainConfig(), TrainMode.PATCH_ONLY, epoch=2)
        restored = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint))
        assert set(restored.params.networks[0].heads) == set(params.networks[0].heads)

    def test_bad_magic_raises(self, model_factory):
        """Test bad magic raises"""
        data = checkpoint_to_bytes(Checkpoint(model_factory(), TrainConfig(), TrainMode.DET, epoch=1))
        with pytest.raises(FormatError):
            checkpoint_from_bytes(b"XXXX" + data[4:])

    def test_unknown_version_raises(self, model_factory):
        """Test unknown version raises"""
        data = bytearray(checkpoint_to_bytes(Checkpoint(model_factory(), TrainConfig(), TrainMode.DET, epoch=1)))
        data[4] = 9
        with pytest.raises(FormatError):
            checkpoint_from_bytes(bytes(data))

    def test_truncated_file_raises(self, model_factory):
        """Test truncated file raises"""
        data = checkpoint_to_bytes(Checkpoint(model_factory(), TrainConfig(), TrainMode.DET, epoch=1))
        with pytest.raises(FormatError):
            checkpoint_from_bytes(data[:60])

    def test_missing_file_raises(self, tmp_path):
        """Test missing file raises"""
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "absent.patc")


class TestDatasets:
    """PATD dataset files and their manifest"""

    def test_round_trip_with_manifest(self, tiny_datasets, tmp_path):
        """Test round trip with manifest"""
        train, _ = tiny_datasets
        path = save_dataset(train, tmp_path / "train.dsb")
        assert manifest_path(path).exists()
        restored = load_dataset(path)
        assert np.array_equal(restored.images, train.images)
        assert np.array_equal(restored.labels, train.labels)
        assert restored.split == "train"
        assert restored.seed == 7
        assert restored.noise_sd == train.noise_sd
        assert restored.spec.model_dump() == train.spec.model_dump()

    def test_without_manifest_split_comes_from_file_name(self, tiny_datasets, tmp_path):
        """Test without manifest split comes from file name"""
        _, test = tiny_datasets
        path = tmp_path / "holdout.dsb"
        path.write_bytes(dataset_to_bytes(test))
        restored = load_dataset(path)
        assert restored.split == "holdout"
        assert restored.spec is None

    def test_header_layout(self, tiny_datasets):
        """Test header layout"""
        train, _ = tiny_datasets
        data = dataset_to_bytes(train)
        assert data[:4] == b"PATD"
        assert len(data) == 4 + 16 + len(train) * (train.num_classes + 4 * 64)

    def test_length_mismatch_raises(self, tiny_datasets):
        """Test length mismatch raises"""
        data = dataset_to_bytes(tiny_datasets[0])
        with pytest.raises(FormatError):
            dataset_from_bytes(data[:-1])

    def test_bad_magic_raises(self):
        """Test bad magic raises"""
        with pytest.raises(FormatError):
            dataset_from_bytes(b"NOPE" + bytes(16))


class TestPredictionTables:
    def test_fused_table_round_trip_is_exact(self, rng, tmp_path):
        """Test fused table round trip is exact"""
        table = PredictionTable(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.random((5, 3)))
        restored = read_predictions(write_predictions(table, tmp_path / "predictions.csv"))
        assert restored.has_fusion
        assert np.array_equal(restored.image_logits, table.image_logits)
        assert np.array_equal(restored.aggregated, table.aggregated)
        assert np.array_equal(restored.tde, table.tde)

    def test_plain_table_scores_are_logits(self, rng, tmp_path):
        """Test plain table scores are logits"""
        table = PredictionTable(rng.normal(size=(4, 2)))
        restored = read_predictions(write_predictions(table, tmp_path / "predictions.csv"))
        assert not restored.has_fusion
        assert restored.scores_are_logits
        assert np.array_equal(restored.scores(), table.image_logits)

    def test_columns_are_one_based(self, rng, tmp_path):
        """Test columns are one based"""
        path = write_predictions(PredictionTable(rng.normal(size=(2, 2)), np.zeros((2, 2)), np.zeros((2, 2))),
                                 tmp_path / "p.csv")
        assert list(pd.read_csv(path).columns) == ["image_index", "p_1", "p_2", "q_agg_1", "q_agg_2", "tde_1", "tde_2"]

    def test_missing_columns_raise(self, tmp_path):
        """Test missing columns raise"""
        path = tmp_path / "p.csv"
        path.write_text("image_index,score\n0,1.0\n")
        with pytest.raises(FormatError):
            read_predictions(path)

    def test_half_fused_table_raises(self, tmp_path):
        """Test half fused table raises"""
        path = tmp_path / "p.csv"
        path.write_text("image_index,p_1,q_agg_1\n0,1.0,0.5\n")
        with pytest.raises(FormatError):
            read_predictions(path)


class TestReports:
    def test_pairs_round_trip_keeps_undefined_rates(self, tmp_path):
        """Test pairs round trip keeps undefined rates"""
        report = PairConditionReport([
            PairRow(0, 3, 0.9, 0.75, None, 4, 0),
            PairRow(1, 4, 0.5, None, 0.125, 0, 8),
        ])
        restored = read_pairs(write_pairs(report, tmp_path / "pairs.csv"))
        assert restored.rows == report.rows

    def test_key_value_report_round_trip(self, tmp_path):
        """Test key value report round trip"""
        path = write_report({"mAP": 0.5, "pairs": 3, "coupled_mean_cfpr": None}, tmp_path / "metrics.txt")
        assert read_report(path) == {"mAP": "0.5", "pairs": "3", "coupled_mean_cfpr": "none"}

    def test_train_log_adds_class_index_for_independent_models(self, model_factory, tmp_path):
        """Test train log adds class index for independent models"""
        history = TrainHistory([EpochRecord(1, 0.7), EpochRecord(2, 0.6)])
        checkpoints = [
            Checkpoint(model_factory(TrainMode.INT, num_classes=1), TrainConfig(), TrainMode.INT, 2,
                       class_index=k, history=history)
            for k in range(2)
        ]
        frame = pd.read_csv(write_train_log(checkpoints, tmp_path / "train_log.csv"))
        assert list(frame.columns[:3]) == ["class_index", "epoch", "loss"]
        assert frame["class_index"].tolist() == [0, 0, 1, 1]

    def test_stepwise_and_compare_tables(self, tmp_path):
        """Test stepwise and compare tables"""
        rows = [StepwiseRow(0, 0.5, 0.6, 0.7)]
        frame = pd.read_csv(write_stepwise(rows, tmp_path / "stepwise.csv"), float_precision="round_trip")
        assert frame.iloc[0]["ap_tde"] == 0.7
        frame = pd.read_csv(write_compare({0: 0.5, 1: 0.25}, {0: 0.75, 1: 0.25}, tmp_path / "compare.csv"),
                            float_precision="round_trip")
        assert frame["delta"].tolist() == [0.25, 0.0]
