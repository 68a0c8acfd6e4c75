"""Metrics and headline experiments: localization, identity, diversity,
instance counting, collage detection, and the entanglement probe.

Pretrained-encoder metrics are replaced by desk-scale proxies: identity is
template cross-correlation against the concept's canonical render, and the
diversity / collage feature space is a fixed random projection (with a tanh
squash) of 4x4-average-pooled pixels.  All metrics are deterministic given
their recorded seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .diffusion import NoiseSchedule
from .grounding import Layout, LayoutBox
from .images import resize_bilinear
from .model import DenoiserModel
from .sampler import PromptBundle, SampleConfig, sample_batch
from .synthdata import CANVAS_FILL, ShapeConcept, concept_template

FEATURE_SEED = 1234
FEATURE_DIM = 256
POOL = 4  # 32x32 -> 8x8 average pooling


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

def iou(a, b) -> float:
    """Intersection over union of two boxes (LayoutBox or coord 4-tuples)."""
    ax0, ay0, ax1, ay1 = a.coords if hasattr(a, "coords") else a
    bx0, by0, bx1, by1 = b.coords if hasattr(b, "coords") else b
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return 0.0 if union <= 0 else inter / union


@dataclass(frozen=True)
class DetectionResult:
    boxes: list[LayoutBox]
    scores: list[float]

    def union_box(self) -> LayoutBox | None:
        if not self.boxes:
            return None
        return LayoutBox(min(b.x0 for b in self.boxes), min(b.y0 for b in self.boxes),
                         max(b.x1 for b in self.boxes), max(b.y1 for b in self.boxes))


def detect_boxes(img: np.ndarray, threshold: float = 0.3,
                 background: float = CANVAS_FILL, min_pixels: int = 4) -> DetectionResult:
    """Connected components of |pixel - background| > threshold as tight boxes.

    The per-pixel deviation is the channel maximum; 4-connectivity;
    components below ``min_pixels`` are discarded.  A blank canvas yields an
    empty result.  Scores are mean deviations clipped to [0, 1].
    """
    dev = np.abs(img - background)
    if dev.ndim == 3:
        dev = dev.max(axis=2)
    fg = dev > threshold
    labels, n = ndimage.label(fg)
    H, W = fg.shape
    boxes, scores = [], []
    for comp in range(1, n + 1):
        ys, xs = np.nonzero(labels == comp)
        if len(ys) < min_pixels:
            continue
        boxes.append(LayoutBox(xs.min() / W, ys.min() / H,
                               (xs.max() + 1) / W, (ys.max() + 1) / H))
        scores.append(float(min(1.0, dev[ys, xs].mean())))
    return DetectionResult(boxes=boxes, scores=scores)


# ---------------------------------------------------------------------------
# identity
# ---------------------------------------------------------------------------

def _norm_zero_mean(a: np.ndarray) -> np.ndarray:
    a = a - a.mean()
    n = np.sqrt((a * a).sum())
    return a / n if n > 0 else a


def identity_score(img: np.ndarray, detected: LayoutBox, concept: ShapeConcept,
                   max_shift: int = 2) -> float:
    """Max normalized cross-correlation between the detected crop and the
    concept's canonical render, searched over small spatial shifts.

    The crop is rescaled to the template size first, so the score is
    size-invariant; range [-1, 1].
    """
    H, W = img.shape[:2]
    px0, px1 = int(np.floor(detected.x0 * W)), int(np.ceil(detected.x1 * W))
    py0, py1 = int(np.floor(detected.y0 * H)), int(np.ceil(detected.y1 * H))
    crop = img[max(0, py0):py1, max(0, px0):px1]
    if crop.size == 0:
        raise ValueError(f"empty crop for box {detected.coords}")
    template = concept_template(concept)
    th, tw = template.shape[:2]
    resized = resize_bilinear(crop, (th, tw))
    padded = np.pad(resized, ((max_shift, max_shift), (max_shift, max_shift), (0, 0)),
                    mode="edge")
    tnorm = _norm_zero_mean(template.astype(np.float64))
    best = -1.0
    for dy in range(2 * max_shift + 1):
        for dx in range(2 * max_shift + 1):
            window = padded[dy:dy + th, dx:dx + tw]
            best = max(best, float((_norm_zero_mean(window.astype(np.float64)) * tnorm).sum()))
    return best


# ---------------------------------------------------------------------------
# feature space: random projection of pooled pixels
# ---------------------------------------------------------------------------

def pooled_cell_stats(images: np.ndarray) -> np.ndarray:
    """Per-cell statistics of the 8x8 average-pooled image.

    Four maps per image: cell luminance, chroma spread (max channel minus
    min channel), contrast against the 4-neighbor mean, and achromatic
    deviation max(0, |lum| - chroma).  The last is what exposes pasted
    patches: shape colors are chromatic by construction, so a bright or
    dark cell with no channel spread only ever comes from a tonal seam.
    """
    if images.ndim == 3:
        images = images[None]
    B, H, W, C = images.shape
    ph, pw = H // POOL, W // POOL
    pooled = images.reshape(B, ph, POOL, pw, POOL, C).mean(axis=(2, 4))
    lum = pooled.mean(axis=3)
    chroma = pooled.max(axis=3) - pooled.min(axis=3)
    padded = np.pad(lum, ((0, 0), (1, 1), (1, 1)), mode="edge")
    nbr = (padded[:, :-2, 1:-1] + padded[:, 2:, 1:-1]
           + padded[:, 1:-1, :-2] + padded[:, 1:-1, 2:]) / 4
    contrast = np.abs(lum - nbr)
    grayness = np.maximum(0.0, np.abs(lum) - chroma)
    return np.stack([lum, chroma, contrast, grayness], axis=3).reshape(B, -1)


def feature_projection(images: np.ndarray, seed: int = FEATURE_SEED) -> np.ndarray:
    """Fixed 256-dim random projection (with a tanh squash) of the pooled
    cell statistics; the shared feature space for diversity and collage
    metrics.  Half the units carry a random bias so a linear head can use
    even-order structure; the unbiased half keeps distances near-symmetric.
    """
    flat = pooled_cell_stats(images).astype(np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, flat.shape[1]]))
    W_proj = rng.standard_normal((flat.shape[1], FEATURE_DIM)) * (3.0 / np.sqrt(flat.shape[1]))
    b = rng.standard_normal(FEATURE_DIM) * 0.5
    b[: FEATURE_DIM // 2] = 0.0
    return np.tanh(flat @ W_proj + b)


def diversity_score(images, seed: int = FEATURE_SEED) -> float:
    """Mean pairwise feature distance, normalized to [0, 1].

    Requires at least two images; the normalizer is the feature-space
    diameter 2*sqrt(dim).
    """
    imgs = np.stack(list(images)) if not isinstance(images, np.ndarray) else images
    if imgs.ndim == 3 or len(imgs) < 2:
        raise ValueError("diversity_score needs at least 2 images")
    z = feature_projection(imgs, seed)
    n = len(z)
    total, count = 0.0, 0
    for i in range(n):
        d = np.sqrt(((z[i + 1:] - z[i]) ** 2).sum(axis=1))
        total += float(d.sum())
        count += len(d)
    return total / count / (2.0 * np.sqrt(FEATURE_DIM))


def pairwise_feature_distances(images: np.ndarray, pairs, seed: int = FEATURE_SEED
                               ) -> np.ndarray:
    """Distances for an explicit pair index list (paired ablation tests)."""
    z = feature_projection(images, seed)
    return np.array([float(np.sqrt(((z[i] - z[j]) ** 2).sum())) for i, j in pairs])


# ---------------------------------------------------------------------------
# collage classifier
# ---------------------------------------------------------------------------

@dataclass
class CollageClassifier:
    """Logistic head over the fixed projection features."""

    w: np.ndarray
    b: float
    mu: np.ndarray
    sd: np.ndarray
    feature_seed: int = FEATURE_SEED

    def scores(self, images: np.ndarray) -> np.ndarray:
        z = (feature_projection(images, self.feature_seed) - self.mu) / self.sd
        return z @ self.w + self.b

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.scores(images) > 0.0


def collage_classifier_train(real: np.ndarray, collaged: np.ndarray,
                             seed: int = FEATURE_SEED, holdout: float = 0.2,
                             epochs: int = 400, lr: float = 0.5,
                             ) -> tuple[CollageClassifier, float]:
    """Train the linear head; returns (classifier, held-out accuracy).

    Deterministic: fixed split, full-batch gradient descent with L2
    regularization on standardized features.
    """
    if len(real) < 8 or len(collaged) < 8:
        raise ValueError("need at least 8 examples per class")
    X = np.concatenate([feature_projection(real, seed), feature_projection(collaged, seed)])
    y = np.concatenate([np.zeros(len(real)), np.ones(len(collaged))])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC011]))
    order = rng.permutation(len(X))
    X, y = X[order], y[order]
    n_hold = max(1, int(len(X) * holdout))
    Xh, yh = X[:n_hold], y[:n_hold]
    Xt, yt = X[n_hold:], y[n_hold:]
    mu, sd = Xt.mean(axis=0), Xt.std(axis=0) + 1e-6
    Xt = (Xt - mu) / sd
    Xh = (Xh - mu) / sd
    w = np.zeros(X.shape[1])
    b = 0.0
    lam = 1e-3
    for _ in range(epochs):
        logits = Xt @ w + b
        p = 1.0 / (1.0 + np.exp(-logits))
        err = p - yt
        gw = Xt.T @ err / len(yt) + lam * w
        gb = float(err.mean())
        w -= lr * gw
        b -= lr * gb
    clf = CollageClassifier(w=w, b=b, mu=mu, sd=sd, feature_seed=seed)
    acc = float((((Xh @ w + b) > 0) == (yh > 0.5)).mean())
    return clf, acc


def collage_rate(clf: CollageClassifier, images: np.ndarray) -> float:
    """Fraction of images the classifier calls collaged."""
    if len(images) == 0:
        raise ValueError("no images")
    return float(clf.predict(images).mean())


# ---------------------------------------------------------------------------
# statistics + report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignTestResult:
    n_pos: int
    n_neg: int
    n_zero: int
    p_value: float


def sign_test(deltas, alternative: str = "greater") -> SignTestResult:
    """Exact binomial sign test on nonzero paired differences.

    ``alternative='greater'`` tests whether positive differences dominate.
    """
    d = np.asarray(deltas, dtype=np.float64)
    pos = int((d > 0).sum())
    neg = int((d < 0).sum())
    zero = int((d == 0).sum())
    n = pos + neg
    if n == 0:
        return SignTestResult(pos, neg, zero, 1.0)
    res = stats.binomtest(pos, n, 0.5, alternative=alternative)
    return SignTestResult(pos, neg, zero, float(res.pvalue))


@dataclass
class MetricReport:
    iou_mean: float = float("nan")
    identity_mean: float = float("nan")
    diversity: float = float("nan")
    instance_count_histogram: dict = field(default_factory=dict)
    collage_rate: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iou_mean": self.iou_mean,
            "identity_mean": self.identity_mean,
            "diversity": self.diversity,
            "instance_count_histogram": {str(k): v for k, v in
                                         sorted(self.instance_count_histogram.items())},
            "collage_rate": self.collage_rate,
            "feature_seed": FEATURE_SEED,
            "extra": self.extra,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, default=float)
            f.write("\n")


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def random_eval_boxes(n: int, seed: int, size_range=(0.30, 0.55),
                      phrase: str = "") -> list[LayoutBox]:
    """Deterministic requested-box stream for localization runs."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0E5]))
    boxes = []
    for _ in range(n):
        w = float(rng.uniform(*size_range))
        h = float(rng.uniform(*size_range))
        x0 = float(rng.uniform(0.0, 1.0 - w))
        y0 = float(rng.uniform(0.0, 1.0 - h))
        boxes.append(LayoutBox(x0, y0, x0 + w, y0 + h, phrase=phrase))
    return boxes


def localization_iou(img: np.ndarray, requested: LayoutBox,
                     threshold: float = 0.3) -> tuple[float, int]:
    """(IOU between the requested box and the union of detections, count).

    The union box punishes stray extra instances; an empty detection scores
    zero.
    """
    det = detect_boxes(img, threshold=threshold)
    union = det.union_box()
    return (0.0 if union is None else iou(requested, union)), len(det.boxes)


def best_match_identity(img: np.ndarray, requested: LayoutBox,
                        concept: ShapeConcept, threshold: float = 0.3) -> float:
    """Identity at the requested location: score the detection that best
    overlaps the requested box; 0 when nothing overlaps."""
    det = detect_boxes(img, threshold=threshold)
    best, best_iou = None, 0.0
    for b in det.boxes:
        v = iou(requested, b)
        if v > best_iou:
            best, best_iou = b, v
    if best is None:
        return 0.0
    return identity_score(img, best, concept)


def evaluate_localization(model: DenoiserModel, identifier: str, class_noun: str,
                          sched: NoiseSchedule, cfg: SampleConfig, n: int,
                          seed: int, bypass: bool = False,
                          threshold: float = 0.3) -> MetricReport:
    """Grounded (or adapter-bypassed, via tau=0) sampling against random boxes."""
    boxes = random_eval_boxes(n, seed, phrase=f"{identifier} {class_noun}")
    prompts = PromptBundle.build(identifier, class_noun, model.config.vocab,
                                 model.config.max_prompt_len)
    run_cfg = replace(cfg, tau=0.0) if bypass else cfg
    layouts = [[b] for b in boxes]
    imgs = sample_batch(model, layouts, prompts, run_cfg, sched,
                        seeds=[seed * 100003 + i for i in range(n)])
    ious, counts = [], []
    for img, box in zip(imgs, boxes):
        v, c = localization_iou(img, box, threshold)
        ious.append(v)
        counts.append(c)
    hist: dict[int, int] = {}
    for c in counts:
        hist[c] = hist.get(c, 0) + 1
    return MetricReport(
        iou_mean=float(np.mean(ious)),
        instance_count_histogram=hist,
        extra={"ious": [float(v) for v in ious], "counts": counts,
               "bypass": bypass, "n": n, "seed": seed})


def guided_sample_run(model: DenoiserModel, identifier: str, class_noun: str,
                      sched: NoiseSchedule, cfg: SampleConfig, n: int, seed: int,
                      threshold: float = 0.3,
                      negative_text: str | None = None) -> dict:
    """Sample n grounded images against the deterministic box stream and
    score localization; the shared building block for ablation arms."""
    from .vocab import NULL_TOKEN

    boxes = random_eval_boxes(n, seed, phrase=f"{identifier} {class_noun}")
    prompts = PromptBundle.build(identifier, class_noun, model.config.vocab,
                                 model.config.max_prompt_len)
    if negative_text is not None:
        from .vocab import encode_prompt
        text = negative_text if negative_text else NULL_TOKEN
        prompts = replace(prompts, negative=encode_prompt(
            text, model.config.vocab, model.config.max_prompt_len))
    imgs = sample_batch(model, [[b] for b in boxes], prompts, cfg, sched,
                        seeds=[seed * 100003 + i for i in range(n)])
    ious, counts = [], []
    for img, box in zip(imgs, boxes):
        v, c = localization_iou(img, box, threshold)
        ious.append(v)
        counts.append(c)
    return {"boxes": boxes, "images": imgs,
            "ious": np.array(ious), "counts": np.array(counts)}


ABLATION_ARMS = ("no-negative", "no-suppress", "no-diverse")


def run_guidance_ablation_pair(model: DenoiserModel, identifier: str, class_noun: str,
                               sched: NoiseSchedule, cfg: SampleConfig, n: int,
                               seed: int, arm: str, threshold: float = 0.3,
                               clf: CollageClassifier | None = None) -> MetricReport:
    """Paired comparison: the full method vs one guidance term removed.

    Removal semantics: ``no-negative`` swaps the negative prompt for the
    null prompt; ``no-suppress``/``no-diverse`` drop that term from the
    regional composition.  Same seeds and boxes on both arms; directional
    sign tests over the paired per-sample statistics.
    """
    if arm not in ABLATION_ARMS:
        raise ValueError(f"unknown ablation arm {arm!r}")
    full = guided_sample_run(model, identifier, class_noun, sched, cfg, n, seed,
                             threshold)
    if arm == "no-negative":
        ablated_cfg = cfg
        ablated = guided_sample_run(model, identifier, class_noun, sched,
                                    ablated_cfg, n, seed, threshold,
                                    negative_text="")
    elif arm == "no-suppress":
        ablated_cfg = replace(cfg, suppress_term=False)
        ablated = guided_sample_run(model, identifier, class_noun, sched,
                                    ablated_cfg, n, seed, threshold)
    else:
        ablated_cfg = replace(cfg, diverse_term=False)
        ablated = guided_sample_run(model, identifier, class_noun, sched,
                                    ablated_cfg, n, seed, threshold)

    extra: dict = {
        "arm": arm, "n": n, "seed": seed,
        "full_iou_mean": float(full["ious"].mean()),
        "ablated_iou_mean": float(ablated["ious"].mean()),
        "full_count_mean": float(full["counts"].mean()),
        "ablated_count_mean": float(ablated["counts"].mean()),
    }
    if arm == "no-suppress":
        st_iou = sign_test(full["ious"] - ablated["ious"], "greater")
        st_cnt = sign_test(ablated["counts"] - full["counts"], "greater")
        extra["iou_drop_sign_test"] = st_iou.__dict__
        extra["count_rise_sign_test"] = st_cnt.__dict__
    if arm == "no-diverse":
        pairs = [(2 * i, 2 * i + 1) for i in range(n // 2)]
        d_full = pairwise_feature_distances(full["images"], pairs)
        d_abl = pairwise_feature_distances(ablated["images"], pairs)
        extra["full_diversity"] = diversity_score(full["images"])
        extra["ablated_diversity"] = diversity_score(ablated["images"])
        extra["diversity_drop_sign_test"] = sign_test(d_full - d_abl, "greater").__dict__
    if arm == "no-negative" and clf is not None:
        lab_full = clf.predict(full["images"]).astype(int)
        lab_abl = clf.predict(ablated["images"]).astype(int)
        extra["full_collage_rate"] = float(lab_full.mean())
        extra["ablated_collage_rate"] = float(lab_abl.mean())
        extra["collage_rise_sign_test"] = sign_test(lab_abl - lab_full, "greater").__dict__
    hist: dict[int, int] = {}
    for c in ablated["counts"]:
        hist[int(c)] = hist.get(int(c), 0) + 1
    return MetricReport(
        iou_mean=extra["ablated_iou_mean"],
        instance_count_histogram=hist,
        collage_rate=extra.get("ablated_collage_rate", float("nan")),
        diversity=extra.get("ablated_diversity", float("nan")),
        extra=extra)


def full_metric_report(model: DenoiserModel, concept: ShapeConcept, identifier: str,
                       sched: NoiseSchedule, cfg: SampleConfig, n: int, seed: int,
                       threshold: float = 0.3,
                       clf: CollageClassifier | None = None) -> MetricReport:
    """Headline metrics of the full method over fresh grounded samples."""
    run = guided_sample_run(model, identifier, concept.family, sched, cfg, n, seed,
                            threshold)
    idents = [best_match_identity(img, box, concept, threshold)
              for img, box in zip(run["images"], run["boxes"])]
    hist: dict[int, int] = {}
    for c in run["counts"]:
        hist[int(c)] = hist.get(int(c), 0) + 1
    return MetricReport(
        iou_mean=float(run["ious"].mean()),
        identity_mean=float(np.mean(idents)),
        diversity=diversity_score(run["images"]),
        instance_count_histogram=hist,
        collage_rate=collage_rate(clf, run["images"]) if clf else float("nan"),
        extra={"n": n, "seed": seed,
               "ious": [float(v) for v in run["ious"]]})


def entanglement_box_grid(train_box: LayoutBox, seed: int = 0) -> list[dict]:
    """The probe grid: the training box plus 8 displaced/rescaled boxes.

    Scales follow the 0.5-2.0 sweep; positions are deterministic draws that
    keep each box inside the canvas.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A2]))
    w0 = train_box.x1 - train_box.x0
    h0 = train_box.y1 - train_box.y0
    entries = [{"box": train_box, "scale": 1.0, "displaced": False}]
    for scale in (0.5, 0.6, 0.7, 0.8, 0.9, 1.2, 1.5, 2.0):
        w = min(0.96, w0 * scale)
        h = min(0.96, h0 * scale)
        x0 = float(rng.uniform(0.0, 1.0 - w))
        y0 = float(rng.uniform(0.0, 1.0 - h))
        entries.append({"box": LayoutBox(x0, y0, x0 + w, y0 + h,
                                         phrase=train_box.phrase),
                        "scale": scale, "displaced": True})
    return entries


def run_entanglement_experiment(model_off: DenoiserModel, model_on: DenoiserModel,
                                concept: ShapeConcept, identifier: str,
                                train_box: LayoutBox, sched: NoiseSchedule,
                                cfg: SampleConfig, n_per_box: int = 8,
                                seed: int = 0, threshold: float = 0.3,
                                ) -> tuple[MetricReport, MetricReport]:
    """Probe identity across the box grid for both finetune arms.

    Returns (report_off, report_on).  Each report carries per-box identity
    means plus the headline drops: ``displaced_drop`` (training box vs
    displaced boxes) and ``band_drop`` (max-to-min across the whole grid).
    """
    grid = entanglement_box_grid(train_box, seed)
    phrase = f"{identifier} {concept.family}"
    reports = []
    for arm, mdl in (("off", model_off), ("on", model_on)):
        prompts = PromptBundle.build(identifier, concept.family,
                                     mdl.config.vocab, mdl.config.max_prompt_len)
        per_box = []
        for j, entry in enumerate(grid):
            box = LayoutBox(*entry["box"].coords, phrase=phrase)
            seeds = [seed * 7919 + j * 613 + k for k in range(n_per_box)]
            imgs = sample_batch(mdl, [box], prompts, cfg, sched, seeds=seeds)
            scores = [best_match_identity(img, box, concept, threshold) for img in imgs]
            per_box.append({"box": list(box.coords), "scale": entry["scale"],
                            "displaced": entry["displaced"],
                            "identity": float(np.mean(scores))})
        train_score = per_box[0]["identity"]
        displaced = [e["identity"] for e in per_box if e["displaced"]]
        all_scores = [e["identity"] for e in per_box]
        displaced_drop = 1.0 - float(np.mean(displaced)) / train_score if train_score > 0 else 1.0
        band_drop = 1.0 - min(all_scores) / max(all_scores) if max(all_scores) > 0 else 1.0
        reports.append(MetricReport(
            identity_mean=float(np.mean(all_scores)),
            extra={"arm": arm, "per_box": per_box, "train_box_identity": train_score,
                   "displaced_drop": displaced_drop, "band_drop": band_drop,
                   "n_per_box": n_per_box, "seed": seed}))
    return reports[0], reports[1]
