"""Identifier-token finetuning with resize/reposition augmentation.

A handful of concept images is bound to a rare identifier token by
finetuning the base weights on "a photo of a <identifier> <class>" while the
adapter weights stay untouched.  Each concept image is aggressively
augmented: the whole (rescale-center-cropped) image is shrunk by a random
factor and pasted at a random position onto a gray canvas, and the
denoising loss is applied only inside the pasted patch.  Half of the steps
instead reconstruct prior images of the bare class noun with a full-frame
loss, which limits drift of the class meaning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, masked_loss_grad, q_sample
from .grounding import LayoutBox
from .images import load_png, resize_bilinear
from .model import DenoiserModel, forward, backward, prepare_grounding
from .optim import Adam, clip_grads_
from .vocab import encode_prompt


@dataclass(frozen=True)
class AugmentConfig:
    """Random resize-and-reposition onto a gray canvas.

    ``resize_floor`` is the lower bound of the uniform resize factor;
    placements always keep the resized patch fully inside the canvas.
    """

    resize_floor: float = 0.3
    canvas_fill: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not (0.0 < self.resize_floor < 1.0):
            raise ValueError("resize_floor must lie in (0, 1)")


@dataclass(frozen=True)
class AugmentedSample:
    y: np.ndarray
    region_mask: np.ndarray
    placed_box: LayoutBox


@dataclass
class ConceptSpec:
    """A personal concept: rare identifier, class noun, 3-5 training images."""

    identifier: str
    class_noun: str
    images: np.ndarray


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 1000
    batch: int = 2
    lr: float = 1e-4
    prior_prob: float = 0.5
    seed: int = 0
    train_adapters: bool = False
    grad_clip: float = 5.0


def rescale_center_crop(x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Scale the shorter side to the target, then crop the center.

    Aspect ratio is preserved; any input resolution is accepted.
    """
    th, tw = target_hw
    h, w = x.shape[:2]
    if h < 1 or w < 1 or th < 1 or tw < 1:
        raise ValueError(f"bad sizes {x.shape[:2]} -> {target_hw}")
    scale = max(th / h, tw / w)
    nh = max(th, int(round(h * scale)))
    nw = max(tw, int(round(w * scale)))
    resized = resize_bilinear(x, (nh, nw))
    top = (nh - th) // 2
    left = (nw - tw) // 2
    return resized[top:top + th, left:left + tw]


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            factor: float | None = None, position: tuple[int, int] | None = None,
            ) -> AugmentedSample:
    """Shrink ``x`` by a uniform random factor and paste it onto gray.

    ``factor``/``position`` override the random draws (used by tests and the
    no-augmentation arm).  The mask marks the pasted patch; the placed box
    is the patch rectangle in normalized coordinates.
    """
    h, w = x.shape[:2]
    f = rng.uniform(cfg.resize_floor, 1.0) if factor is None else float(factor)
    ph = max(1, int(round(h * f)))
    pw = max(1, int(round(w * f)))
    if position is None:
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
    else:
        top, left = position
        if not (0 <= top <= h - ph and 0 <= left <= w - pw):
            raise ValueError(f"position {position} puts patch outside canvas")
    if (ph, pw) == (h, w):
        y = x.copy()
    else:
        y = np.full_like(x, cfg.canvas_fill)
        y[top:top + ph, left:left + pw] = resize_bilinear(x, (ph, pw))
    mask = np.zeros((h, w), dtype=np.float32)
    mask[top:top + ph, left:left + pw] = 1.0
    box = LayoutBox(left / w, top / h, (left + pw) / w, (top + ph) / h)
    return AugmentedSample(y=y, region_mask=mask, placed_box=box)


def finetune(model: DenoiserModel, concept: ConceptSpec, prior_images: np.ndarray,
             cfg: FinetuneConfig, aug: AugmentConfig, sched: NoiseSchedule,
             log_path: str | Path | None = None) -> tuple[DenoiserModel, list[float]]:
    """Finetune a copy of ``model`` on the concept; returns (model, loss log).

    Per example: with probability ``prior_prob`` a prior image with the
    class prompt and a full-frame loss, otherwise a concept image with the
    identifier prompt, augmented (when enabled) and a patch-masked loss.
    By default only base weights move: the forward runs ungrounded, so
    adapter gradients are identically zero.  ``train_adapters=True`` instead
    feeds the placed patch box as a layout and lets adapter weights move too.
    """
    if cfg.prior_prob > 0 and len(prior_images) == 0:
        raise ValueError("prior preservation enabled but the prior set is empty")
    out = model.copy()
    mcfg = out.config
    vocab, L = mcfg.vocab, mcfg.max_prompt_len
    concept_prompt = encode_prompt(
        f"a photo of a {concept.identifier} {concept.class_noun}", vocab, L)
    prior_prompt = encode_prompt(f"a photo of a {concept.class_noun}", vocab, L)
    opt = Adam(out.params.keys() if cfg.train_adapters else out.base_names(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF17E]))
    full_mask = np.ones((mcfg.image_size, mcfg.image_size), dtype=np.float32)
    losses: list[float] = []
    log_f = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            ys, masks, prompts, branches, layouts = [], [], [], [], []
            for _ in range(cfg.batch):
                if rng.random() < cfg.prior_prob:
                    img = prior_images[int(rng.integers(len(prior_images)))]
                    ys.append(img)
                    masks.append(full_mask)
                    prompts.append(prior_prompt)
                    branches.append("prior")
                    layouts.append(None)
                else:
                    img = concept.images[int(rng.integers(len(concept.images)))]
                    if aug.enabled:
                        s = augment(img, aug, rng)
                    else:
                        s = augment(img, aug, rng, factor=1.0, position=(0, 0))
                    ys.append(s.y)
                    masks.append(s.region_mask)
                    prompts.append(concept_prompt)
                    branches.append("concept")
                    layouts.append([LayoutBox(*s.placed_box.coords,
                                              phrase=f"{concept.identifier} {concept.class_noun}")])
            y = np.stack(ys)
            B = len(ys)
            t = rng.integers(0, sched.T, size=B)
            eps = rng.standard_normal(y.shape).astype(np.float32)
            x_t = q_sample(y, t, eps, sched)
            ids = np.stack([p.ids for p in prompts])
            valid = np.stack([p.valid for p in prompts])
            grounding = None
            if cfg.train_adapters and all(l is not None for l in layouts):
                grounding = prepare_grounding(mcfg, layouts)
            pred, cache = forward(out, x_t, t, ids, valid, grounding)
            per_ex = []
            deps = np.zeros_like(pred)
            for b in range(B):
                diff = (pred[b] - eps[b]) ** 2 * masks[b][:, :, None]
                cnt = masks[b].sum() * pred.shape[-1]
                per_ex.append(float(diff.sum() / cnt))
                deps[b] = masked_loss_grad(pred[b], eps[b], masks[b]) / B
            loss = float(np.mean(per_ex))
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite finetune loss at step {step}")
            grads = backward(out, cache, deps)
            clip_grads_(grads, cfg.grad_clip)
            opt.step(out.params, grads)
            losses.append(loss)
            if log_f:
                log_f.write(json.dumps({"step": step, "loss": loss,
                                        "branches": branches}) + "\n")
    finally:
        if log_f:
            log_f.close()
    return out, losses


def load_concept_manifest(path: str | Path) -> ConceptSpec:
    """Concept manifest: {"identifier", "class_noun", "images": [paths]}.

    Image paths are relative to the manifest file.
    """
    p = Path(path)
    with open(p) as f:
        rec = json.load(f)
    imgs = [load_png(p.parent / rel) for rel in rec["images"]]
    if not imgs:
        raise ValueError(f"{path}: concept manifest lists no images")
    return ConceptSpec(identifier=rec["identifier"], class_noun=rec["class_noun"],
                       images=np.stack(imgs))


def save_concept_manifest(concept: ConceptSpec, out_dir: str | Path) -> Path:
    from .images import save_png
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rels = []
    for i, img in enumerate(concept.images):
        rel = f"concept_{i:02d}.png"
        save_png(img, out / rel)
        rels.append(rel)
    manifest = out / "concept.json"
    with open(manifest, "w") as f:
        json.dump({"identifier": concept.identifier,
                   "class_noun": concept.class_noun, "images": rels}, f, indent=2)
        f.write("\n")
    return manifest
