"""Procedural synthetic data: textured shape concepts and training scenes.

Concepts are parametric shapes (disc, cross, wrench-like blob) carrying a
two-color texture chosen by a texture seed.  Identity is therefore
measurable by template correlation without any pretrained encoder.  Scenes
place 1-2 shapes on a uniform gray background and record exact ground-truth
boxes, which is what the adapter phase trains against.

Everything is deterministic from a master seed; per-image RNG streams are
derived from (master seed, image index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grounding import LayoutBox
from .images import load_png, resize_bilinear, save_png

FAMILIES = ("disc", "cross", "wrench")
PATTERNS = ("vsplit", "hsplit", "diag", "ring")

# Chromatic corners of the RGB cube at +-0.9: maximally separated saturated
# colors, so any two texture seeds render visibly different concepts.  The
# achromatic corners (white/black) are excluded on purpose: every shape color
# keeps strong inter-channel contrast, which makes a uniformly gray-shifted
# region an unambiguous pasted-patch signature for the collage detector.
PALETTE = np.array([
    [0.9, -0.9, -0.9], [-0.9, 0.9, -0.9], [-0.9, -0.9, 0.9],
    [0.9, 0.9, -0.9], [0.9, -0.9, 0.9], [-0.9, 0.9, 0.9],
], dtype=np.float32)

_COLOR_PAIRS = [(i, j) for i in range(len(PALETTE)) for j in range(len(PALETTE)) if i != j]
N_TEXTURE_COMBOS = len(PATTERNS) * len(_COLOR_PAIRS)

CANVAS_FILL = 0.0
CANONICAL_BOX = (0.05, 0.05, 0.95, 0.95)


@dataclass(frozen=True)
class ShapeConcept:
    """A renderable personal concept: shape family + texture identity."""

    family: str
    texture_seed: int
    canonical_px: int = 24

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def pattern(self) -> str:
        return PATTERNS[self.texture_seed % len(PATTERNS)]

    @property
    def palette(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = _COLOR_PAIRS[(self.texture_seed // len(PATTERNS)) % len(_COLOR_PAIRS)]
        return PALETTE[i], PALETTE[j]


def _shape_mask(family: str, h: int, w: int) -> np.ndarray:
    """Boolean occupancy of the shape inside an h×w pixel box."""
    v = (np.arange(h)[:, None] + 0.5) / h
    u = (np.arange(w)[None, :] + 0.5) / w
    if family == "disc":
        return ((u - 0.5) / 0.5) ** 2 + ((v - 0.5) / 0.5) ** 2 <= 1.0
    if family == "cross":
        return (np.abs(u - 0.5) <= 1 / 6) | (np.abs(v - 0.5) <= 1 / 6)
    # wrench-like blob: vertical handle, wide head, open jaw notch
    handle = (u >= 0.12) & (u <= 0.52) & (v >= 0.05) & (v <= 0.95)
    head = (u >= 0.12) & (u <= 0.95) & (v >= 0.05) & (v <= 0.50)
    jaw = (u >= 0.62) & (u <= 0.95) & (v >= 0.16) & (v <= 0.38)
    return (handle | head) & ~jaw


def _texture(pattern: str, h: int, w: int, color_a, color_b) -> np.ndarray:
    v = (np.arange(h)[:, None] + 0.5) / h
    u = (np.arange(w)[None, :] + 0.5) / w
    if pattern == "vsplit":
        pick_b = u >= 0.5
    elif pattern == "hsplit":
        pick_b = v >= 0.5
    elif pattern == "diag":
        pick_b = (u + v) >= 1.0
    else:  # ring: border band in box coordinates
        pick_b = np.minimum(np.minimum(u, 1 - u), np.minimum(v, 1 - v)) < 0.18
    pick_b = np.broadcast_to(pick_b, (h, w))
    tex = np.where(pick_b[:, :, None], color_b, color_a)
    return tex.astype(np.float32)


def render_concept(concept: ShapeConcept, box: LayoutBox, canvas: np.ndarray,
                   jitter_seed: int | None = None, jitter_amp: float = 0.04,
                   ) -> tuple[np.ndarray, LayoutBox]:
    """Paint the concept into ``box`` on a copy of ``canvas``.

    Returns (image, tight box): the box is recomputed from the painted
    pixels so it is exact to the pixel.  Deterministic given the seeds.
    """
    H, W = canvas.shape[:2]
    px0, px1 = int(round(box.x0 * W)), int(round(box.x1 * W))
    py0, py1 = int(round(box.y0 * H)), int(round(box.y1 * H))
    bw, bh = px1 - px0, py1 - py0
    if bw * bh < 4:
        raise ValueError(f"box {box.coords} smaller than 4 pixels at {H}x{W}")
    mask = _shape_mask(concept.family, bh, bw)
    color_a, color_b = concept.palette
    tex = _texture(concept.pattern, bh, bw, color_a, color_b)
    if jitter_seed is not None and jitter_amp > 0:
        jr = np.random.default_rng(np.random.SeedSequence([jitter_seed, concept.texture_seed]))
        tex = tex + jr.uniform(-jitter_amp, jitter_amp, size=tex.shape).astype(np.float32)
    img = canvas.copy()
    region = img[py0:py1, px0:px1]
    region[mask] = np.clip(tex[mask], -1.0, 1.0)
    ys, xs = np.nonzero(mask)
    tight = LayoutBox((px0 + xs.min()) / W, (py0 + ys.min()) / H,
                      (px0 + xs.max() + 1) / W, (py0 + ys.max() + 1) / H,
                      phrase=concept.family)
    return img, tight


def canonical_render(concept: ShapeConcept, image_size: int = 32) -> np.ndarray:
    """The concept's reference appearance: big centered render, no jitter."""
    canvas = np.full((image_size, image_size, 3), CANVAS_FILL, dtype=np.float32)
    img, _ = render_concept(concept, LayoutBox(*CANONICAL_BOX, phrase=concept.family),
                            canvas, jitter_seed=None)
    return img


def concept_template(concept: ShapeConcept) -> np.ndarray:
    """Tight canonical crop rescaled to canonical_px, for identity scoring."""
    canvas = np.full((64, 64, 3), CANVAS_FILL, dtype=np.float32)
    img, tight = render_concept(concept, LayoutBox(*CANONICAL_BOX), canvas,
                                jitter_seed=None)
    crop = img[int(tight.y0 * 64):int(tight.y1 * 64), int(tight.x0 * 64):int(tight.x1 * 64)]
    return resize_bilinear(crop, (concept.canonical_px, concept.canonical_px))


@dataclass
class SceneExample:
    """One training image plus everything the loss and adapters need."""

    image: np.ndarray
    caption: str
    kind: str                       # scene | colorful | collage | dull
    boxes: list[LayoutBox] = field(default_factory=list)
    shape_seeds: list[tuple[str, int]] = field(default_factory=list)


@dataclass
class Corpus:
    examples: list[SceneExample]
    image_size: int
    master_seed: int

    def __len__(self) -> int:
        return len(self.examples)

    def images(self) -> np.ndarray:
        return np.stack([e.image for e in self.examples])


def _random_box(rng, lo=0.28, hi=0.58) -> LayoutBox:
    s = rng.uniform(lo, hi)
    a = rng.uniform(0.85, 1.2)
    w = min(0.95, s * np.sqrt(a))
    h = min(0.95, s / np.sqrt(a))
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return LayoutBox(x0, y0, x0 + w, y0 + h)


def _boxes_disjoint(a: LayoutBox, b: LayoutBox, max_iou=0.05) -> bool:
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return union == 0 or inter / union <= max_iou


def _render_scene(rng, image_size, families, n_shapes, size_range=(0.28, 0.58),
                  color_scale=1.0, grain=0.02):
    canvas = np.full((image_size, image_size, 3), CANVAS_FILL, dtype=np.float32)
    boxes: list[LayoutBox] = []
    seeds: list[tuple[str, int]] = []
    img = canvas
    for fam in families[:n_shapes]:
        for _ in range(30):
            cand = _random_box(rng, *size_range)
            if all(_boxes_disjoint(cand, b) for b in boxes):
                break
        seed = int(rng.integers(N_TEXTURE_COMBOS))
        concept = ShapeConcept(fam, seed)
        img, tight = render_concept(concept, cand, img, jitter_seed=int(rng.integers(2**31)))
        if color_scale != 1.0:
            sel = np.abs(img - CANVAS_FILL).max(axis=2) > 1e-6
            img[sel] = img[sel] * color_scale
        boxes.append(tight)
        seeds.append((fam, seed))
    if grain > 0:
        img = img + rng.uniform(-grain, grain, size=img.shape).astype(np.float32)
    return np.clip(img, -1.0, 1.0), boxes, seeds


def _paste(base: np.ndarray, patch_src: np.ndarray, factor: float, rng,
           tint: float = 0.0) -> np.ndarray:
    """Resize a whole image and paste it onto another at a random position."""
    H, W = base.shape[:2]
    ph, pw = max(2, int(round(H * factor))), max(2, int(round(W * factor)))
    patch = resize_bilinear(patch_src, (ph, pw)) + tint
    top = int(rng.integers(0, H - ph + 1))
    left = int(rng.integers(0, W - pw + 1))
    out = base.copy()
    out[top:top + ph, left:left + pw] = np.clip(patch, -1.0, 1.0)
    return out


def make_base_corpus(num_images: int, master_seed: int = 0, image_size: int = 32) -> Corpus:
    """Pretraining corpus: captioned shape scenes plus style examples.

    Most images are clean 1-2 shape scenes captioned "a photo of a <noun>
    [and a <noun>]" with exact boxes.  A slice of the corpus teaches the
    style words used by guidance prompts: collaged scenes (a resized scene
    pasted on top of another with a tonal offset), dull desaturated scenes,
    and large colorful scenes.
    """
    examples: list[SceneExample] = []
    for i in range(num_images):
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, i]))
        roll = rng.random()
        fams = list(FAMILIES)
        rng.shuffle(fams)
        if roll < 0.76:
            n = 1 if rng.random() < 0.65 else 2
            img, boxes, seeds = _render_scene(rng, image_size, fams, n)
            caption = f"a photo of a {seeds[0][0]}"
            if n == 2:
                caption += f" and a {seeds[1][0]}"
            examples.append(SceneExample(img, caption, "scene", boxes, seeds))
        elif roll < 0.84:
            img, boxes, seeds = _render_scene(rng, image_size, fams, 2,
                                              size_range=(0.42, 0.62))
            examples.append(SceneExample(img, "a high quality colorful image",
                                         "colorful", boxes, seeds))
        elif roll < 0.92:
            img, _, seeds = _render_scene(rng, image_size, fams, 1)
            other, _, s2 = _render_scene(rng, image_size, fams[::-1],
                                         1 if rng.random() < 0.6 else 2)
            tint = float(rng.uniform(0.15, 0.3)) * (1 if rng.random() < 0.5 else -1)
            img = _paste(img, other, float(rng.uniform(0.35, 0.7)), rng, tint=tint)
            examples.append(SceneExample(
                img, "collaging effect low quality assembled image",
                "collage", [], seeds + s2))
        else:
            n = 1 if rng.random() < 0.6 else 2
            img, _, seeds = _render_scene(rng, image_size, fams, n, color_scale=0.25)
            examples.append(SceneExample(img, "a dull low quality image",
                                         "dull", [], seeds))
    return Corpus(examples, image_size, master_seed)


def make_entanglement_set(concept: ShapeConcept, n: int = 4, position: str = "left",
                          image_size: int = 32, seed: int = 0,
                          ) -> tuple[np.ndarray, LayoutBox]:
    """n images of the concept at one fixed box (left side by default).

    Texture jitter varies per image so the images are distinct, but the
    placed box is identical everywhere: the training distribution an
    entangled model will latch onto.
    """
    if position == "left":
        box = LayoutBox(0.04, 0.27, 0.50, 0.73)
    elif position == "center":
        box = LayoutBox(0.27, 0.27, 0.73, 0.73)
    else:
        raise ValueError(f"unknown position {position!r}")
    canvas = np.full((image_size, image_size, 3), CANVAS_FILL, dtype=np.float32)
    images = []
    tight = box
    for i in range(n):
        img, tight = render_concept(concept, box, canvas, jitter_seed=seed * 1000 + i)
        images.append(img)
    return np.stack(images), tight


def make_collage_lab(num_per_class: int, master_seed: int = 100,
                     image_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Training material for the collage classifier.

    Clean class: 0-2 shape scenes on the gray background, with optional
    grain.  Collaged class: another scene resized and pasted in at a random
    position, carrying a gray tonal offset the way a patch from different
    lighting would.  Shape colors are chromatic, so the patch's uniformly
    shifted region is the separating signature.
    Returns (images, labels) with label 1 = collaged.
    """
    images, labels = [], []
    for i in range(2 * num_per_class):
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, 7, i]))
        fams = list(FAMILIES)
        rng.shuffle(fams)
        n = int(rng.choice([0, 1, 2], p=[0.2, 0.45, 0.35]))
        grain = float(rng.choice([0.0, 0.02, 0.04]))
        img_a, _, _ = _render_scene(rng, image_size, fams, n, grain=grain)
        if i % 2 == 0:
            images.append(img_a)
            labels.append(0)
            continue
        n_src = int(rng.choice([0, 1]))  # sparse patch: its background shows
        img_b, _, _ = _render_scene(rng, image_size, fams[::-1], n_src, grain=grain)
        tint = float(rng.uniform(0.18, 0.35)) * (1 if rng.random() < 0.5 else -1)
        images.append(_paste(img_a, img_b, float(rng.uniform(0.35, 0.8)), rng,
                             tint=tint))
        labels.append(1)
    return np.stack(images), np.array(labels)


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    """PNG images plus a JSON-lines manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as f:
        for i, ex in enumerate(corpus.examples):
            rel = f"images/{i:05d}.png"
            save_png(ex.image, out / rel)
            rec = {
                "path": rel,
                "caption": ex.caption,
                "kind": ex.kind,
                "boxes": [{"box": list(b.coords), "phrase": b.phrase} for b in ex.boxes],
                "shapes": [{"family": fam, "seed": s} for fam, s in ex.shape_seeds],
            }
            f.write(json.dumps(rec) + "\n")
        meta = {"image_size": corpus.image_size, "master_seed": corpus.master_seed,
                "count": len(corpus.examples)}
        f.write(json.dumps({"meta": meta}) + "\n")


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    examples = []
    meta = {"image_size": 32, "master_seed": -1}
    with open(root / "manifest.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            if "meta" in rec:
                meta = rec["meta"]
                continue
            boxes = [LayoutBox(*b["box"], phrase=b["phrase"]) for b in rec["boxes"]]
            examples.append(SceneExample(
                image=load_png(root / rec["path"]),
                caption=rec["caption"], kind=rec["kind"], boxes=boxes,
                shape_seeds=[(s["family"], s["seed"]) for s in rec["shapes"]]))
    return Corpus(examples, meta["image_size"], meta["master_seed"])
