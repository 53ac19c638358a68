import numpy as np
import pytest
from pydantic import ValidationError

from app.core import synthgen
from app.core.config import settings
from app.core.errors import GenerationError
from app.core.seeding import substream
from app.core.synthgen import (
    build_atlas,
    conditional_frequency,
    default_atlas,
    default_spec,
    generate_dataset,
    render_scene,
    sample_label_matrix,
    sample_label_vector,
)
from app.schemas import CooccurrenceSpec, Coupling, SynthConfig


def _pair_spec(rho=0.9):
    return CooccurrenceSpec(
        num_classes=2,
        anchor_probs=[0.5, 0.0],
        solo_probs=[0.0, 0.05],
        couplings=[Coupling(source=0, target=1, rho=rho)],
    )


class TestCooccurrenceSpec:
    """Validation of the coupling structure"""

    def test_default_spec_couples_three_anchors(self):
        """Test default spec couples three anchors"""
        spec = default_spec(SynthConfig(num_classes=8))
        assert spec.partners == [3, 4, 5]
        assert [(c.source, c.target) for c in spec.couplings] == [(0, 3), (1, 4), (2, 5)]
        assert len(spec.anchor_probs) == 8

    def test_cycle_is_rejected(self):
        """Test cycle is rejected"""
        with pytest.raises(ValidationError):
            CooccurrenceSpec(
                num_classes=2,
                anchor_probs=[0.5, 0.5],
                solo_probs=[0.0, 0.0],
                couplings=[Coupling(source=0, target=1, rho=0.5), Coupling(source=1, target=0, rho=0.5)],
            )

    def test_unknown_class_is_rejected(self):
        """Test unknown class is rejected"""
        with pytest.raises(ValidationError):
            CooccurrenceSpec(num_classes=2, anchor_probs=[0.5, 0.5], solo_probs=[0, 0],
                             couplings=[Coupling(source=0, target=5, rho=0.5)])

    def test_probabilities_are_bounded(self):
        """Test probabilities are bounded"""
        with pytest.raises(ValidationError):
            Coupling(source=0, target=1, rho=1.5)


class TestLabelSampling:
    """Anchor, solo and coupled draws"""

    def test_coupled_conditional_matches_rate(self):
        """P(B | A) = 1 - (1 - rho)(1 - solo)"""
        labels = sample_label_matrix(_pair_spec(), substream(3, "mc"), 100_000)
        assert conditional_frequency(labels, 0, 1) == pytest.approx(0.905, abs=0.01)
        assert labels[:, 0].mean() == pytest.approx(0.5, abs=0.01)
        # without the anchor only the solo rate applies
        assert labels[labels[:, 0] == 0, 1].mean() == pytest.approx(0.05, abs=0.01)

    def test_chained_couplings_propagate(self):
        """Test chained couplings propagate"""
        spec = CooccurrenceSpec(
            num_classes=3,
            anchor_probs=[1.0, 0.0, 0.0],
            solo_probs=[0.0, 0.0, 0.0],
            couplings=[Coupling(source=1, target=2, rho=1.0), Coupling(source=0, target=1, rho=1.0)],
        )
        labels = sample_label_matrix(spec, substream(0, "data"), 10)
        assert labels.all()

    def test_no_couplings_means_independent_classes(self):
        """Test that P(b | a) tracks P(b) when nothing is coupled"""
        spec = CooccurrenceSpec(num_classes=4, anchor_probs=[0.5, 0.5, 0.6, 0.4], solo_probs=[0.0] * 4)
        labels = sample_label_matrix(spec, substream(5, "independence"), 10_000)
        for a in range(4):
            for b in range(4):
                if a != b:
                    assert abs(conditional_frequency(labels, a, b) - labels[:, b].mean()) < 0.03

    def test_default_class_counts_are_within_three_sigma(self):
        """Test per-class positives of a default-size training split"""
        spec = default_spec()
        n = SynthConfig().n_train
        counts = np.stack([sample_label_vector(spec, substream(0, "train", i)) for i in range(n)]).sum(axis=0)
        expected = sample_label_matrix(spec, substream(0, "reference"), 400_000).mean(axis=0)
        sigma = np.sqrt(n * expected * (1 - expected))
        assert np.all(np.abs(counts - n * expected) <= 3 * sigma)

    def test_too_many_objects_keep_lowest_classes(self):
        """Test too many objects keep lowest classes"""
        spec = CooccurrenceSpec(num_classes=3, anchor_probs=[1.0] * 3, solo_probs=[0.0] * 3, max_objects=2)
        labels = sample_label_matrix(spec, substream(0, "data"), 5)
        assert labels.tolist() == [[1, 1, 0]] * 5

    def test_labels_are_uint8(self, tiny_spec):
        """Test labels are uint8"""
        labels = sample_label_matrix(tiny_spec, substream(0, "data"), 4)
        assert labels.dtype == np.uint8
        assert labels.shape == (4, tiny_spec.num_classes)

    def test_conditional_frequency_without_anchor_is_nan(self):
        """Test conditional frequency without anchor is nan"""
        assert np.isnan(conditional_frequency(np.zeros((3, 2)), 0, 1))


class TestAtlas:
    def test_glyphs_are_pairwise_distinct(self):
        """Test glyphs are pairwise distinct"""
        atlas = build_atlas(6, 8, seed=1)
        binary = atlas.sprites > 0
        for i in range(6):
            for j in range(i):
                assert np.count_nonzero(binary[i] != binary[j]) >= 8 * 8 / 8

    def test_partners_are_low_contrast(self, tiny_spec, tiny_synth_config):
        """Test partners are low contrast"""
        atlas = default_atlas(tiny_spec, tiny_synth_config, seed=0)
        assert np.all(atlas.contrast[[3, 4, 5]] == tiny_synth_config.hard_contrast)
        assert np.all(atlas.contrast[:3] == 1.0)

    def test_contrast_length_must_match(self):
        """Test contrast length must match"""
        with pytest.raises(GenerationError):
            build_atlas(3, 4, seed=0, contrast=[1.0, 1.0])


class TestRender:
    """Quadrant placement and clamping"""

    def test_glyphs_use_distinct_quadrants(self, rng):
        """Test glyphs use distinct quadrants"""
        atlas = build_atlas(4, 4, seed=0)
        scene = render_scene(np.ones(4, dtype=np.uint8), atlas, rng, noise_sd=0.0, image_side=8)
        assert sorted(p.quadrant for p in scene.placements) == [0, 1, 2, 3]

    def test_single_glyph_stays_inside_its_footprint(self, rng):
        """Test that a lone noiseless glyph lights up one quadrant only"""
        atlas = build_atlas(1, 4, seed=2)
        scene = render_scene(np.ones(1, dtype=np.uint8), atlas, rng, noise_sd=0.0, image_side=16)
        (placement,) = scene.placements
        top = (placement.quadrant // 2) * 8 + placement.row_offset
        left = (placement.quadrant % 2) * 8 + placement.col_offset
        footprint = np.zeros((16, 16), dtype=bool)
        footprint[top:top + 4, left:left + 4] = atlas.sprites[0] > 0
        assert np.array_equal(scene.image > 0, footprint)
        rows, cols = np.nonzero(scene.image)
        assert len(set(zip(rows // 8, cols // 8))) == 1

    def test_pixels_are_clamped_float32(self, rng):
        """Test pixels are clamped float32"""
        atlas = build_atlas(6, 4, seed=0)
        scene = render_scene(np.ones(6, dtype=np.uint8), atlas, rng, noise_sd=0.5, image_side=8)
        assert scene.image.dtype == np.float32
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0

    def test_empty_scene_without_noise_is_black(self, rng):
        """Test empty scene without noise is black"""
        scene = render_scene(np.zeros(3, dtype=np.uint8), build_atlas(3, 4, seed=0), rng, 0.0, 8)
        assert not scene.image.any()
        assert scene.placements == []

    def test_colocation_can_be_refused(self, rng):
        """Test colocation can be refused"""
        with pytest.raises(GenerationError):
            render_scene(np.ones(5, dtype=np.uint8), build_atlas(5, 4, seed=0), rng, image_side=8,
                         allow_colocation=False)

    def test_odd_side_raises(self, rng):
        """Test odd side raises"""
        with pytest.raises(GenerationError):
            render_scene(np.ones(2), build_atlas(2, 2, seed=0), rng, image_side=7)

    def test_glyph_larger_than_quadrant_raises(self, rng):
        """Test glyph larger than quadrant raises"""
        with pytest.raises(GenerationError):
            render_scene(np.ones(2), build_atlas(2, 4, seed=0), rng, image_side=6)


class TestGenerateDataset:
    def test_shapes_and_splits(self, tiny_datasets, tiny_synth_config):
        """Test shapes and splits"""
        train, test = tiny_datasets
        assert train.images.shape == (24, 8, 8)
        assert test.labels.shape == (16, tiny_synth_config.num_classes)
        assert (train.split, test.split) == ("train", "test")

    def test_is_deterministic(self, tiny_spec, tiny_synth_config):
        """Test is deterministic"""
        atlas = default_atlas(tiny_spec, tiny_synth_config, seed=3)
        a, _ = generate_dataset(tiny_spec, atlas, 10, 2, seed=3, image_side=8)
        b, _ = generate_dataset(tiny_spec, atlas, 10, 2, seed=3, image_side=8)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_thread_count_does_not_change_output(self, monkeypatch, tiny_spec, tiny_synth_config):
        """Test thread count does not change output"""
        atlas = default_atlas(tiny_spec, tiny_synth_config, seed=3)
        serial, _ = generate_dataset(tiny_spec, atlas, 12, 2, seed=3, image_side=8)
        monkeypatch.setattr(settings, "WORKERS", 3)
        assert synthgen.settings.WORKERS == 3
        threaded, _ = generate_dataset(tiny_spec, atlas, 12, 2, seed=3, image_side=8)
        assert np.array_equal(serial.images, threaded.images)
        assert np.array_equal(serial.labels, threaded.labels)

    def test_splits_use_disjoint_streams(self, tiny_datasets):
        """Test splits use disjoint streams"""
        train, test = tiny_datasets
        assert not np.array_equal(train.images[:16], test.images)

    def test_atlas_and_spec_must_agree(self, tiny_spec):
        """Test atlas and spec must agree"""
        with pytest.raises(GenerationError):
            generate_dataset(tiny_spec, build_atlas(3, 4, seed=0), 2, 2, seed=0, image_side=8)

    def test_empty_split_raises(self, tiny_spec, tiny_synth_config):
        """Test empty split raises"""
        atlas = default_atlas(tiny_spec, tiny_synth_config)
        with pytest.raises(GenerationError):
            generate_dataset(tiny_spec, atlas, 0, 2, seed=0, image_side=8)
