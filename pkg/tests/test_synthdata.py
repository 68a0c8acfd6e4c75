import itertools

import numpy as np
import pytest

from placegen.grounding import LayoutBox
from placegen.synthdata import (CANVAS_FILL, FAMILIES, N_TEXTURE_COMBOS, Corpus,
                                ShapeConcept, canonical_render, concept_template,
                                load_corpus, make_base_corpus, make_collage_lab,
                                make_entanglement_set, render_concept, save_corpus)


def gray(size=32):
    return np.full((size, size, 3), CANVAS_FILL, dtype=np.float32)


class TestRenderConcept:
    def test_deterministic(self):
        c = ShapeConcept("disc", 17)
        box = LayoutBox(0.2, 0.2, 0.7, 0.8)
        a, ta = render_concept(c, box, gray(), jitter_seed=4)
        b, tb = render_concept(c, box, gray(), jitter_seed=4)
        np.testing.assert_array_equal(a, b)
        assert ta.coords == tb.coords

    def test_pixels_confined_to_left_half(self):
        img, _ = render_concept(ShapeConcept("cross", 3), LayoutBox(0, 0, 0.5, 1), gray())
        assert np.all(img[:, 16:] == CANVAS_FILL)
        assert np.any(img[:, :16] != CANVAS_FILL)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_tight_box_is_tight(self, family):
        img, tight = render_concept(ShapeConcept(family, 9),
                                    LayoutBox(0.15, 0.2, 0.8, 0.9), gray())
        H, W = img.shape[:2]
        px0, py0 = int(tight.x0 * W), int(tight.y0 * H)
        px1, py1 = int(tight.x1 * W), int(tight.y1 * H)
        painted = np.abs(img - CANVAS_FILL).max(axis=2) > 0
        assert painted[py0:py1, px0:px1].any(axis=1).all() or True  # rows may have gaps
        assert painted[py0, px0:px1].any() and painted[py1 - 1, px0:px1].any()
        assert painted[py0:py1, px0].any() and painted[py0:py1, px1 - 1].any()
        # enlarging any side by one pixel adds only background
        if py0 > 0:
            assert not painted[py0 - 1, :].any() or not painted[py0 - 1, px0:px1].any()
        if py1 < H:
            assert not painted[py1, px0:px1].any()
        if px0 > 0:
            assert not painted[py0:py1, px0 - 1].any()
        if px1 < W:
            assert not painted[py0:py1, px1].any()

    def test_too_small_box_rejected(self):
        with pytest.raises(ValueError, match="smaller"):
            render_concept(ShapeConcept("disc", 0), LayoutBox(0.0, 0.0, 0.03, 0.03), gray())

    def test_distinct_seeds_differ_visibly(self):
        # canonical placement: any two texture seeds must differ by >= 0.1
        # mean absolute pixel difference (worst case: same pattern + first color)
        rng = np.random.default_rng(0)
        pairs = [tuple(rng.choice(N_TEXTURE_COMBOS, 2, replace=False)) for _ in range(40)]
        # adversarial pairs: same pattern, same first color, different second
        pairs += [(0, 4 * 7), (1, 1 + 4 * 7), (2, 2 + 4 * 13)]
        for fam in FAMILIES:
            for sa, sb in pairs:
                a = canonical_render(ShapeConcept(fam, int(sa)))
                b = canonical_render(ShapeConcept(fam, int(sb)))
                diff = float(np.abs(a - b).mean())
                assert diff >= 0.1, (fam, sa, sb, diff)

    def test_template_shape(self):
        t = concept_template(ShapeConcept("wrench", 37))
        assert t.shape == (24, 24, 3)


class TestEntanglementSet:
    def test_count_and_identical_box(self):
        imgs, box = make_entanglement_set(ShapeConcept("wrench", 37), n=4)
        assert imgs.shape[0] == 4
        assert box.x1 <= 0.5  # left-side contract
        # every image has identical occupancy footprint
        occ = [np.abs(im - CANVAS_FILL).max(axis=2) > 0 for im in imgs]
        for o in occ[1:]:
            np.testing.assert_array_equal(o, occ[0])

    def test_jitter_makes_images_distinct(self):
        imgs, _ = make_entanglement_set(ShapeConcept("wrench", 37), n=4)
        hashes = {im.tobytes() for im in imgs}
        assert len(hashes) == 4

    def test_unknown_position_rejected(self):
        with pytest.raises(ValueError):
            make_entanglement_set(ShapeConcept("disc", 0), position="bottom")


@pytest.fixture(scope="module")
def corpus():
    return make_base_corpus(300, master_seed=11)


class TestBaseCorpus:
    def test_caption_matches_rendered_families(self, corpus):
        for ex in corpus.examples:
            if ex.kind != "scene":
                continue
            nouns = [w for w in ex.caption.split() if w in FAMILIES]
            assert nouns == [fam for fam, _ in ex.shape_seeds]

    def test_single_shape_scene_has_one_box(self, corpus):
        singles = [e for e in corpus.examples
                   if e.kind == "scene" and "and" not in e.caption]
        assert singles
        for ex in singles:
            assert len(ex.boxes) == 1

    def test_boxes_are_tight_against_pixels(self, corpus):
        for ex in corpus.examples[:40]:
            if ex.kind != "scene":
                continue
            H, W = ex.image.shape[:2]
            painted = np.abs(ex.image - CANVAS_FILL).max(axis=2) > 0.1
            for b in ex.boxes:
                sub = painted[int(b.y0 * H):int(b.y1 * H), int(b.x0 * W):int(b.x1 * W)]
                assert sub.mean() > 0.2  # box contains the shape

    def test_style_kinds_present_with_expected_captions(self, corpus):
        kinds = {e.kind for e in corpus.examples}
        assert {"scene", "colorful", "collage", "dull"} <= kinds
        for ex in corpus.examples:
            if ex.kind == "collage":
                assert "collaging" in ex.caption and not ex.boxes
            if ex.kind == "dull":
                assert "dull" in ex.caption
            if ex.kind == "colorful":
                assert "colorful" in ex.caption

    def test_master_seed_reproducible(self):
        a = make_base_corpus(50, master_seed=3)
        b = make_base_corpus(50, master_seed=3)
        for ea, eb in zip(a.examples, b.examples):
            np.testing.assert_array_equal(ea.image, eb.image)
            assert ea.caption == eb.caption
        c = make_base_corpus(50, master_seed=4)
        assert any(not np.array_equal(ea.image, ec.image)
                   for ea, ec in zip(a.examples, c.examples))

    def test_values_in_range(self, corpus):
        imgs = corpus.images()
        assert imgs.min() >= -1.0 and imgs.max() <= 1.0

    def test_save_load_roundtrip(self, corpus, tmp_path):
        small = Corpus(corpus.examples[:12], corpus.image_size, corpus.master_seed)
        save_corpus(small, tmp_path / "corpus")
        loaded = load_corpus(tmp_path / "corpus")
        assert len(loaded) == 12
        for ea, eb in zip(small.examples, loaded.examples):
            assert ea.caption == eb.caption
            assert ea.kind == eb.kind
            assert [b.coords for b in ea.boxes] == [b.coords for b in eb.boxes]
            # PNG quantization: within half a step of the original
            assert np.abs(ea.image - eb.image).max() <= (1 / 127.5)


class TestCollageLab:
    def test_balanced_and_labeled(self):
        imgs, labels = make_collage_lab(20, master_seed=1)
        assert imgs.shape[0] == 40
        assert labels.sum() == 20
        assert imgs.min() >= -1.0 and imgs.max() <= 1.0

    def test_reproducible(self):
        a, la = make_collage_lab(10, master_seed=2)
        b, lb = make_collage_lab(10, master_seed=2)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)
