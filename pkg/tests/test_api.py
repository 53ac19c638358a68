import numpy as np
from scipy.special import expit

from app.models.checkpoint import Checkpoint
from app.models.params import TrainMode
from app.schemas import TrainConfig
from app.storage.checkpoints import int_checkpoint_name, save_checkpoint


class TestRoot:
    def test_root(self, client):
        """Test root"""
        response = client.get("/")
        assert response.status_code == 200
        assert response.json()["docs"] == "/docs"

    def test_health(self, client):
        """Test health"""
        assert client.get("/health").json() == {"status": "healthy"}


class TestCausalCheck:
    """Test /causal/check"""

    def test_check_reports_rows_and_failures(self, client):
        """Test check reports rows and failures"""
        response = client.post("/causal/check", json={"trials": 3, "constructed": 4, "seed": 1})
        assert response.status_code == 200
        data = response.json()
        assert len(data["rows"]) == 7
        assert data["failures"] == 0
        assert {row["kind"] for row in data["rows"]} == {"random", "constructed"}

    def test_too_many_models(self, client):
        """Test too many models"""
        response = client.post("/causal/check", json={"trials": 15000, "constructed": 15000})
        assert response.status_code == 400

    def test_negative_count_is_rejected(self, client):
        """Test negative count is rejected"""
        assert client.post("/causal/check", json={"trials": -1}).status_code == 422


class TestMetrics:
    """Test /metrics/evaluate"""

    def test_perfect_scores(self, client):
        """Test perfect scores"""
        labels = [[1, 0, 1], [0, 1, 1], [1, 1, 0], [0, 0, 1]]
        response = client.post("/metrics/evaluate", json={"scores": labels, "labels": labels})
        assert response.status_code == 200
        data = response.json()
        assert data["mAP"] == 1.0
        assert data["OF1"] == 1.0
        assert set(data["per_class_ap"]) == {"0", "1", "2"}

    def test_no_positive_labels(self, client):
        """Test no positive labels"""
        response = client.post("/metrics/evaluate", json={"scores": [[0.1, 0.2]], "labels": [[0, 0]]})
        assert response.status_code == 400

    def test_shape_mismatch(self, client):
        """Test shape mismatch"""
        response = client.post("/metrics/evaluate", json={"scores": [[0.1, 0.2]], "labels": [[1, 0, 1]]})
        assert response.status_code == 400


class TestFuse:
    """Test /patching/fuse"""

    def test_equal_patches_get_equal_weights(self, client):
        """Test equal patches get equal weights"""
        response = client.post("/patching/fuse", json={
            "image_logits": [0.5, -1.0],
            "patch_logits": [[2.0, 1.0]] * 4,
        })
        assert response.status_code == 200
        data = response.json()
        assert np.allclose(data["weights"], 0.25)
        assert np.allclose(data["aggregated"], [2.0, 1.0])
        assert np.allclose(data["tde"], expit([2.5, 0.0]))

    def test_lambda_zero_is_plain_sigmoid(self, client):
        """Test lambda zero is plain sigmoid"""
        response = client.post("/patching/fuse", json={
            "image_logits": [0.3, -0.7],
            "patch_logits": [[1.0, 2.0], [0.0, 1.0], [3.0, -1.0], [0.5, 0.5]],
            "lambda": 0.0,
        })
        assert np.allclose(response.json()["tde"], expit([0.3, -0.7]))

    def test_wrong_patch_count(self, client):
        """Test wrong patch count"""
        response = client.post("/patching/fuse", json={
            "image_logits": [0.0, 0.0],
            "patch_logits": [[0.0, 0.0]] * 3,
        })
        assert response.status_code == 400


class TestPredict:
    """Test /inference/predict"""

    def _save(self, model_factory, checkpoint_dir, mode=TrainMode.DET, name=None):
        params = model_factory(mode, side=4, num_classes=3)
        path = checkpoint_dir / (name or f"{mode.value}.patc")
        save_checkpoint(Checkpoint(params, TrainConfig(), mode, epoch=1), path)
        return params

    def test_unknown_checkpoint(self, client):
        """Test unknown checkpoint"""
        response = client.post("/inference/predict", json={"checkpoint": "nope", "images": [[[0.0] * 4] * 4]})
        assert response.status_code == 404

    def test_path_outside_the_directory_is_not_found(self, client, checkpoint_dir, model_factory):
        """Test path outside the directory is not found"""
        self._save(model_factory, checkpoint_dir.parent, name="outside.patc")
        response = client.post("/inference/predict", json={"checkpoint": "../outside", "images": [[[0.0] * 4] * 4]})
        assert response.status_code == 404

    def test_pat_i_prediction(self, client, checkpoint_dir, model_factory, rng):
        """Test PAT-I prediction"""
        self._save(model_factory, checkpoint_dir, TrainMode.PAT_T)
        images = rng.random((2, 4, 4)).tolist()
        response = client.post("/inference/predict", json={"checkpoint": "pat-t", "images": images})
        assert response.status_code == 200
        rows = response.json()["rows"]
        assert len(rows) == 2
        assert len(rows[0]["tde"]) == 3
        assert np.allclose(np.sum(rows[0]["weights"], axis=0), 1.0)

    def test_plain_prediction_has_no_fusion(self, client, checkpoint_dir, model_factory, rng):
        """Test plain prediction has no fusion"""
        self._save(model_factory, checkpoint_dir)
        response = client.post("/inference/predict", json={
            "checkpoint": "det.patc", "images": rng.random((1, 4, 4)).tolist(), "mode": "plain",
        })
        assert response.status_code == 200
        row = response.json()["rows"][0]
        assert row["tde"] is None
        assert len(row["image_logits"]) == 3

    def test_independent_directory(self, client, checkpoint_dir, model_factory, rng):
        """Test independent directory"""
        folder = checkpoint_dir / "int-run"
        folder.mkdir()
        for k in range(2):
            params = model_factory(TrainMode.INT, side=4, num_classes=1, seed=k)
            save_checkpoint(Checkpoint(params, TrainConfig(), TrainMode.INT, epoch=1, class_index=k),
                            folder / int_checkpoint_name(k))
        response = client.post("/inference/predict", json={
            "checkpoint": "int-run", "images": rng.random((1, 4, 4)).tolist(), "mode": "plain",
        })
        assert response.status_code == 200
        assert len(response.json()["rows"][0]["image_logits"]) == 2

    def test_wrong_image_size(self, client, checkpoint_dir, model_factory):
        """Test wrong image size"""
        self._save(model_factory, checkpoint_dir)
        response = client.post("/inference/predict", json={"checkpoint": "det", "images": [[[0.0] * 6] * 6]})
        assert response.status_code == 400

    def test_unknown_mode(self, client, checkpoint_dir, model_factory):
        """Test unknown mode"""
        self._save(model_factory, checkpoint_dir)
        response = client.post("/inference/predict", json={
            "checkpoint": "det", "images": [[[0.0] * 4] * 4], "mode": "magic",
        })
        assert response.status_code == 422
