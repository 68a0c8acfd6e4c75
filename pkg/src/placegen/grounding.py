"""Layouts: (phrase, box) pairs, grounding-token encoding, and region masks.

A layout is a list of normalized boxes with text phrases.  Each pair is
encoded into a grounding token by pooling the phrase embedding, Fourier
embedding the box corners, and pushing the concatenation through a small
MLP.  Region masks rasterize the layout onto a pixel/feature grid by cell
center containment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers
from .vocab import RARE_TOKENS, tokenize


@dataclass(frozen=True)
class LayoutBox:
    """Axis-aligned box in normalized [0,1] coordinates with a phrase.

    Coordinates are clamped into [0,1] on construction; a box that is empty
    after clamping is rejected.
    """

    x0: float
    y0: float
    x1: float
    y1: float
    phrase: str = ""

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, min(1.0, max(0.0, v)))
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(
                f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


Layout = list[LayoutBox]


def rasterize_mask(layout: Layout, h: int, w: int) -> np.ndarray:
    """Binary h×w mask: cell = 1 iff its center lies inside any box."""
    mask = np.zeros((h, w), dtype=np.float32)
    if not layout:
        return mask
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    for box in layout:
        rows = (cy >= box.y0) & (cy < box.y1)
        cols = (cx >= box.x0) & (cx < box.x1)
        mask[np.ix_(rows, cols)] = 1.0
    return mask


def identifier_region_mask(layout: Layout, h: int, w: int) -> np.ndarray:
    """Mask over boxes whose phrase contains a rare identifier token.

    This is the object-region mask used by the regional negative prompt.  If
    no phrase carries an identifier the union of all boxes is used instead,
    so plain class layouts still get a sensible region.
    """
    tagged = [b for b in layout
              if any(t in RARE_TOKENS for t in tokenize(b.phrase))]
    return rasterize_mask(tagged if tagged else layout, h, w)


def pool_phrase(text_emb: np.ndarray, phrase_ids: np.ndarray) -> np.ndarray:
    """Mean of the phrase token embeddings."""
    return text_emb[phrase_ids].mean(axis=0)


def ground_mlp_forward(gin: np.ndarray, p: dict):
    """Two-hidden-layer MLP mapping (K, pooled+fourier) rows to tokens."""
    h1, c1 = layers.linear(gin, p["w1"], p["b1"])
    a1, s1 = layers.silu(h1)
    h2, c2 = layers.linear(a1, p["w2"], p["b2"])
    a2, s2 = layers.silu(h2)
    g, c3 = layers.linear(a2, p["w3"], p["b3"])
    return g, (c1, s1, c2, s2, c3)


def ground_mlp_backward(dg: np.ndarray, cache):
    c1, s1, c2, s2, c3 = cache
    da2, dw3, db3 = layers.linear_backward(dg, c3)
    dh2 = layers.silu_backward(da2, s2)
    da1, dw2, db2 = layers.linear_backward(dh2, c2)
    dh1 = layers.silu_backward(da1, s1)
    dgin, dw1, db1 = layers.linear_backward(dh1, c1)
    grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}
    return dgin, grads


def encode_grounding(pooled: np.ndarray, box: LayoutBox, mlp_params: dict,
                     n_freq: int = 8) -> np.ndarray:
    """Encode one (pooled phrase embedding, box) pair into a grounding token.

    Deterministic in its inputs.  The box must be non-degenerate (enforced by
    LayoutBox).
    """
    four = layers.fourier_box(box.coords, n_freq, dtype=pooled.dtype)
    gin = np.concatenate([pooled, four])[None, :]
    g, _ = ground_mlp_forward(gin, mlp_params)
    return g[0]


def load_layout(path: str | Path) -> Layout:
    """Read a layout JSON file: {"boxes": [{"box": [x0,y0,x1,y1], "phrase": str}]}."""
    with open(path) as f:
        payload = json.load(f)
    boxes = payload.get("boxes")
    if boxes is None:
        raise ValueError(f"{path}: missing 'boxes' key")
    layout = []
    for entry in boxes:
        x0, y0, x1, y1 = entry["box"]
        layout.append(LayoutBox(x0, y0, x1, y1, phrase=entry.get("phrase", "")))
    return layout


def save_layout(layout: Layout, path: str | Path) -> None:
    payload = {"boxes": [{"box": list(b.coords), "phrase": b.phrase} for b in layout]}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
