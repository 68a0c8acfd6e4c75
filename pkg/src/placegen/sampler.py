"""Regionally-guided deterministic sampling.

Each reverse step makes four noise predictions: the positive prompt (with
the layout while grounding is scheduled on, bypassed afterwards) and the
negative / suppress / diverse prompts, all ungrounded.  The three auxiliary
predictions are mixed into a regional negative via the object-region mask
(inside the region the plain negative survives; outside it the suppress
term is added and the diversity term subtracted), then combined with the
positive prediction by classifier-free guidance and stepped by the
deterministic reverse update.

Grounding is active for the first ceil(tau * steps) denoising steps
(highest noise levels) and bypassed afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import NoiseSchedule, ddim_step, strided_steps
from .grounding import Layout, identifier_region_mask
from .model import DenoiserModel, predict_noise
from .vocab import NULL_TOKEN, PromptTokens, encode_prompt

DEFAULT_NEGATIVE = "collaging effect, low quality, assembled image"
DEFAULT_DIVERSE = "a high quality, colorful image"


@dataclass(frozen=True)
class PromptBundle:
    """The four prompts used by regionally-guided sampling."""

    positive: PromptTokens
    negative: PromptTokens
    suppress: PromptTokens
    diverse: PromptTokens

    @classmethod
    def build(cls, identifier: str, class_noun: str, vocab, max_len: int = 8,
              positive: str | None = None, negative: str = DEFAULT_NEGATIVE,
              ) -> "PromptBundle":
        """Defaults: suppress = "<identifier> <class_noun>", fixed diversity
        prompt, collage-flavored negative prompt."""
        pos = positive if positive is not None else f"a photo of a {identifier} {class_noun}"
        return cls(
            positive=encode_prompt(pos, vocab, max_len),
            negative=encode_prompt(negative, vocab, max_len),
            suppress=encode_prompt(f"{identifier} {class_noun}", vocab, max_len),
            diverse=encode_prompt(DEFAULT_DIVERSE, vocab, max_len),
        )


@dataclass(frozen=True)
class SampleConfig:
    guidance_scale: float = 5.0
    tau: float = 0.3
    steps: int = 50
    seed: int = 0
    clip_x0: bool = True
    suppress_term: bool = True
    diverse_term: bool = True

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError("tau must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def compose_regional_negative(eps_neg: np.ndarray, eps_sup: np.ndarray,
                              eps_div: np.ndarray, m: np.ndarray) -> np.ndarray:
    """m*eps_neg + (1-m)*(eps_neg + eps_sup - eps_div), elementwise.

    ``m`` is a binary H×W mask broadcast over channels (and over a leading
    batch axis if present).  Implemented with a select so that inside the
    region the negative prediction is returned bitwise.
    """
    for other in (eps_sup, eps_div):
        if other.shape != eps_neg.shape:
            raise ValueError(f"shape mismatch: {eps_neg.shape} vs {other.shape}")
    m = np.asarray(m)
    if m.shape not in (eps_neg.shape[-3:-1], eps_neg.shape[:-1]):
        raise ValueError(f"mask {m.shape} does not match image {eps_neg.shape}")
    inside = (m != 0)[..., None]
    return np.where(inside, eps_neg, eps_neg + eps_sup - eps_div)


def cfg_combine(eps_neg: np.ndarray, eps_pos: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free guidance: eps_neg + s * (eps_pos - eps_neg).

    s = 1 returns the positive prediction bitwise and s = 0 the negative,
    avoiding float round-trips in the endpoint cases.
    """
    if eps_neg.shape != eps_pos.shape:
        raise ValueError(f"shape mismatch: {eps_neg.shape} vs {eps_pos.shape}")
    if s == 1.0:
        return eps_pos.copy()
    if s == 0.0:
        return eps_neg.copy()
    return eps_neg + s * (eps_pos - eps_neg)


def grounded_step_count(tau: float, steps: int) -> int:
    return min(steps, math.ceil(tau * steps))


def _clipped_eps(x, eps, t_step, sched):
    """Re-derive eps from the [-1,1]-clipped x0 estimate (dynamic clamp)."""
    ab = float(sched.alpha_bar[t_step - 1])
    x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    x0c = np.clip(x0, -1.0, 1.0)
    return (x - np.sqrt(ab) * x0c) / np.sqrt(1.0 - ab)


def sample_batch(model: DenoiserModel, layouts, prompts: PromptBundle,
                 cfg: SampleConfig, sched: NoiseSchedule, seeds,
                 call_log: list | None = None) -> np.ndarray:
    """Draw one image per seed; layouts is one Layout, a per-seed list, or None.

    The four per-step predictor calls run as four batched forwards (one per
    prompt branch); per-example results are bitwise identical to sequential
    evaluation.  Output is (len(seeds), H, W, C).
    """
    hw = model.config.image_size
    C = model.config.in_channels
    null_id = model.config.vocab.index(NULL_TOKEN)
    if prompts.positive.length == 1 and prompts.positive.ids[0] == null_id:
        raise ValueError("empty positive prompt")
    B = len(seeds)
    if layouts is None:
        per_example = [None] * B
    elif layouts and isinstance(layouts[0], list):
        per_example = list(layouts)
    else:
        per_example = [layouts] * B
    if len(per_example) != B:
        raise ValueError(f"{len(per_example)} layouts for {B} seeds")
    grounded_allowed = all(l is not None for l in per_example)
    masks = np.stack([
        identifier_region_mask(l, hw, hw) if l is not None else np.zeros((hw, hw), np.float32)
        for l in per_example])

    x = np.stack([
        np.random.default_rng(np.random.SeedSequence([int(s), 0x5EED])).standard_normal(
            (hw, hw, C)).astype(np.float32)
        for s in seeds])
    ts = strided_steps(sched.T, cfg.steps)
    n_grounded = grounded_step_count(cfg.tau, len(ts))

    for i, t_step in enumerate(ts):
        t_idx = t_step - 1
        active = grounded_allowed and i < n_grounded
        layout_arg = per_example if active else None
        eps_pos = predict_noise(model, x, t_idx, prompts.positive, layout_arg)
        eps_neg = predict_noise(model, x, t_idx, prompts.negative, None)
        if call_log is not None:
            call_log.append((t_step, "positive", active))
            call_log.append((t_step, "negative", False))
        eps_sup = eps_div = None
        if cfg.suppress_term:
            eps_sup = predict_noise(model, x, t_idx, prompts.suppress, None)
            if call_log is not None:
                call_log.append((t_step, "suppress", False))
        if cfg.diverse_term:
            eps_div = predict_noise(model, x, t_idx, prompts.diverse, None)
            if call_log is not None:
                call_log.append((t_step, "diverse", False))
        zero = np.zeros_like(eps_neg)
        if cfg.suppress_term or cfg.diverse_term:
            eps_regional = compose_regional_negative(
                eps_neg,
                eps_sup if eps_sup is not None else zero,
                eps_div if eps_div is not None else zero,
                masks)
        else:
            eps_regional = eps_neg
        eps_agg = cfg_combine(eps_regional, eps_pos, cfg.guidance_scale)
        if cfg.clip_x0:
            eps_agg = _clipped_eps(x, eps_agg, t_step, sched)
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        x = ddim_step(x, eps_agg, t_step, sched, t_prev=t_prev)
    return x


def sample(model: DenoiserModel, layout: Layout | None, prompts: PromptBundle,
           cfg: SampleConfig, sched: NoiseSchedule,
           call_log: list | None = None) -> np.ndarray:
    """Algorithm-1 sampling of a single image; deterministic given cfg.seed."""
    if layout is not None and not layout:
        raise ValueError("grounded sampling needs a non-empty layout; pass None to bypass")
    out = sample_batch(model, layout, prompts, cfg, sched, [cfg.seed], call_log=call_log)
    return out[0]


def plain_cfg_sample(model: DenoiserModel, positive: PromptTokens,
                     negative: PromptTokens, cfg: SampleConfig,
                     sched: NoiseSchedule, layout: Layout | None = None,
                     seeds=None) -> np.ndarray:
    """Two-prompt classifier-free guidance without the regional terms.

    Used for prior-set generation; with a layout it is the regional sampler
    minus the suppress/diverse corrections.
    """
    bundle = PromptBundle(positive=positive, negative=negative,
                          suppress=negative, diverse=negative)
    cfg2 = replace(cfg, suppress_term=False, diverse_term=False)
    if seeds is None:
        return sample_batch(model, layout, bundle, cfg2, sched, [cfg.seed])[0]
    return sample_batch(model, layout, bundle, cfg2, sched, seeds)
