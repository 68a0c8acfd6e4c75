import numpy as np
import pytest

from placegen.diffusion import make_schedule
from placegen.grounding import rasterize_mask
from placegen.images import resize_bilinear
from placegen.model import DenoiserModel
from placegen.personalize import (AugmentConfig, AugmentedSample, ConceptSpec,
                                  FinetuneConfig, augment, finetune,
                                  load_concept_manifest, rescale_center_crop,
                                  save_concept_manifest)
from placegen.synthdata import make_entanglement_set, ShapeConcept

from conftest import tiny_config


class TestRescaleCenterCrop:
    def test_target_sized_input_unchanged(self):
        x = np.random.default_rng(0).standard_normal((32, 32, 3)).astype(np.float32)
        np.testing.assert_array_equal(rescale_center_crop(x, (32, 32)), x)

    def test_wide_input_center_cropped(self):
        # 64 wide x 32 tall: shorter side already matches, so the result is
        # the horizontally centered 32x32 window
        x = np.arange(64 * 32 * 1, dtype=np.float32).reshape(32, 64, 1)
        out = rescale_center_crop(x, (32, 32))
        np.testing.assert_array_equal(out, x[:, 16:48])

    def test_scaling_preserves_aspect(self):
        x = np.random.default_rng(1).standard_normal((64, 128, 3))
        out = rescale_center_crop(x, (32, 32))
        assert out.shape == (32, 32, 3)

    def test_constant_image_stays_constant(self):
        x = np.full((50, 70, 3), 0.37, dtype=np.float32)
        out = rescale_center_crop(x, (32, 32))
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            rescale_center_crop(np.zeros((0, 4, 3)), (8, 8))


class TestAugment:
    def setup_method(self):
        self.cfg = AugmentConfig()
        rng = np.random.default_rng(0)
        self.x = rng.uniform(-1, 1, size=(32, 32, 3)).astype(np.float32)

    def test_factor_one_is_identity(self):
        s = augment(self.x, self.cfg, np.random.default_rng(1), factor=1.0)
        np.testing.assert_array_equal(s.y, self.x)
        np.testing.assert_array_equal(s.region_mask, np.ones((32, 32)))
        assert s.placed_box.coords == (0.0, 0.0, 1.0, 1.0)

    def test_half_factor_top_left(self):
        s = augment(self.x, self.cfg, np.random.default_rng(1),
                    factor=0.5, position=(0, 0))
        assert s.placed_box.coords == (0.0, 0.0, 0.5, 0.5)
        assert s.region_mask.mean() == pytest.approx(0.25)
        np.testing.assert_allclose(s.y[:16, :16], resize_bilinear(self.x, (16, 16)))

    def test_outside_pixels_equal_canvas_fill_exactly(self):
        for seed in range(5):
            s = augment(self.x, self.cfg, np.random.default_rng(seed))
            outside = s.region_mask == 0
            assert np.all(s.y[outside] == self.cfg.canvas_fill)

    def test_mask_matches_rasterized_box(self):
        for seed in range(5):
            s = augment(self.x, self.cfg, np.random.default_rng(seed))
            np.testing.assert_array_equal(
                s.region_mask, rasterize_mask([s.placed_box], 32, 32))

    def test_factor_law_monte_carlo(self):
        rng = np.random.default_rng(7)
        factors = []
        for _ in range(10_000):
            s = augment(self.x, self.cfg, rng)
            factors.append((s.placed_box.x1 - s.placed_box.x0))
        factors = np.array(factors)
        assert factors.min() >= 0.3 - 1 / 32
        assert factors.max() <= 1.0
        assert factors.mean() == pytest.approx(0.65, abs=0.02)

    def test_position_validation(self):
        with pytest.raises(ValueError, match="outside"):
            augment(self.x, self.cfg, np.random.default_rng(0),
                    factor=0.5, position=(20, 20))

    def test_resize_floor_validated(self):
        with pytest.raises(ValueError):
            AugmentConfig(resize_floor=0.0)
        with pytest.raises(ValueError):
            AugmentConfig(resize_floor=1.0)


@pytest.fixture(scope="module")
def tiny_setup():
    model = DenoiserModel.create(tiny_config(), seed=2)
    sched = make_schedule(40, 1e-3, 0.05)
    images, _ = make_entanglement_set(ShapeConcept("wrench", 37), n=3, image_size=8)
    concept = ConceptSpec("sks", "wrench", images)
    rng = np.random.default_rng(0)
    priors = rng.uniform(-1, 1, size=(6, 8, 8, 1)).astype(np.float32)
    # tiny model is single-channel; collapse concept images
    concept.images = concept.images.mean(axis=3, keepdims=True).astype(np.float32)
    return model, sched, concept, priors


class TestFinetune:
    def test_zero_steps_leaves_model_unchanged(self, tiny_setup):
        model, sched, concept, priors = tiny_setup
        before = model.checksum()
        tuned, losses = finetune(model, concept, priors,
                                 FinetuneConfig(steps=0), AugmentConfig(), sched)
        assert losses == []
        assert tuned.checksum() == before
        assert model.checksum() == before  # input model untouched

    def test_adapters_untouched_by_default(self, tiny_setup):
        model, sched, concept, priors = tiny_setup
        tuned, _ = finetune(model, concept, priors,
                            FinetuneConfig(steps=8, seed=1), AugmentConfig(), sched)
        assert tuned.checksum("adapter.") == model.checksum("adapter.")
        assert tuned.checksum("base.") != model.checksum("base.")

    def test_train_adapters_flag_moves_them(self, tiny_setup):
        model, sched, concept, priors = tiny_setup
        tuned, _ = finetune(model, concept, priors,
                            FinetuneConfig(steps=8, seed=1, train_adapters=True,
                                           prior_prob=0.0),
                            AugmentConfig(), sched)
        assert tuned.checksum("adapter.") != model.checksum("adapter.")

    def test_empty_prior_set_rejected(self, tiny_setup):
        model, sched, concept, _ = tiny_setup
        with pytest.raises(ValueError, match="prior"):
            finetune(model, concept, np.zeros((0, 8, 8, 1)),
                     FinetuneConfig(steps=2), AugmentConfig(), sched)

    def test_deterministic_given_seed(self, tiny_setup):
        model, sched, concept, priors = tiny_setup
        cfg = FinetuneConfig(steps=5, seed=9)
        a, la = finetune(model, concept, priors, cfg, AugmentConfig(), sched)
        b, lb = finetune(model, concept, priors, cfg, AugmentConfig(), sched)
        assert la == lb
        assert a.checksum() == b.checksum()

    def test_log_records_branches(self, tiny_setup, tmp_path):
        import json
        model, sched, concept, priors = tiny_setup
        log = tmp_path / "log.jsonl"
        finetune(model, concept, priors, FinetuneConfig(steps=6, seed=3),
                 AugmentConfig(), sched, log_path=log)
        recs = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(recs) == 6
        assert all(set(r) == {"step", "loss", "branches"} for r in recs)
        branches = {b for r in recs for b in r["branches"]}
        assert branches <= {"concept", "prior"}


class TestConceptManifest:
    def test_roundtrip(self, tmp_path):
        images, _ = make_entanglement_set(ShapeConcept("disc", 5), n=3)
        spec = ConceptSpec("sks", "disc", images)
        manifest = save_concept_manifest(spec, tmp_path)
        loaded = load_concept_manifest(manifest)
        assert loaded.identifier == "sks"
        assert loaded.class_noun == "disc"
        assert loaded.images.shape == images.shape
        assert np.abs(loaded.images - images).max() <= 1 / 127.5
