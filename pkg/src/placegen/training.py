"""Base-model and adapter training loops.

Phase 1 optimizes every base weight with the plain denoising objective on
captioned scenes (captions are dropped to <null> for a fraction of examples
so guidance has an unconditional mode to lean on).  Phase 2 freezes the
base exactly - the optimizer only owns adapter parameters - and trains the
gated attention sublayers plus the grounding MLP on scenes with ground-truth
boxes.  Box phrases are randomly prefixed with an unused rare token so the
grounding encoder tolerates identifier-bearing phrases at inference time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, masked_loss_grad, q_sample
from .model import DenoiserModel, backward, forward, prepare_grounding
from .optim import Adam, clip_grads_
from .synthdata import Corpus
from .vocab import NULL_TOKEN, RARE_TOKENS, encode_prompt
from .grounding import LayoutBox

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainBaseConfig:
    base_steps: int = 4000
    adapter_steps: int = 3000
    batch: int = 16
    lr: float = 2e-3
    adapter_lr: float = 2e-3
    seed: int = 0
    null_prob: float = 0.1
    rare_prefix_prob: float = 0.5
    grad_clip: float = 5.0
    log_every: int = 200


def _batch_loss_and_grads(model, xs, ts, eps, ids, valid, grounding):
    pred, cache = forward(model, xs, ts, ids, valid, grounding)
    B = xs.shape[0]
    diff = pred - eps
    loss = float((diff ** 2).mean())
    if not np.isfinite(loss):
        raise RuntimeError("non-finite training loss")
    deps = np.zeros_like(pred)
    mask = np.ones(xs.shape[1:3], dtype=xs.dtype)
    for b in range(B):
        deps[b] = masked_loss_grad(pred[b], eps[b], mask) / B
    grads = backward(model, cache, deps)
    return loss, grads


def train_base(model: DenoiserModel, corpus: Corpus, sched: NoiseSchedule,
               cfg: TrainBaseConfig, log_path: str | Path | None = None) -> dict:
    """Run both phases in place; returns {"base_losses", "adapter_losses"}.

    The adapter phase provably leaves base weights untouched: its optimizer
    only steps adapter parameters.
    """
    mcfg = model.config
    vocab, L = mcfg.vocab, mcfg.max_prompt_len
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA5E]))
    images = corpus.images().astype(np.float32)
    prompts = [encode_prompt(e.caption, vocab, L) for e in corpus.examples]
    null_prompt = encode_prompt(NULL_TOKEN, vocab, L)
    log_f = open(log_path, "w") if log_path else None

    def log(rec):
        if log_f:
            log_f.write(json.dumps(rec) + "\n")

    base_losses: list[float] = []
    opt = Adam(model.base_names(), lr=cfg.lr)
    for step in range(cfg.base_steps):
        idx = rng.integers(0, len(images), size=cfg.batch)
        xs = images[idx]
        drop = rng.random(cfg.batch) < cfg.null_prob
        ids = np.stack([(null_prompt if drop[i] else prompts[j]).ids
                        for i, j in enumerate(idx)])
        valid = np.stack([(null_prompt if drop[i] else prompts[j]).valid
                          for i, j in enumerate(idx)])
        ts = rng.integers(0, sched.T, size=cfg.batch)
        eps = rng.standard_normal(xs.shape).astype(np.float32)
        x_t = q_sample(xs, ts, eps, sched)
        loss, grads = _batch_loss_and_grads(model, x_t, ts, eps, ids, valid, None)
        clip_grads_(grads, cfg.grad_clip)
        opt.step(model.params, grads)
        base_losses.append(loss)
        if step % cfg.log_every == 0:
            logger.info("base step %d loss %.4f", step, loss)
        log({"phase": "base", "step": step, "loss": loss})

    grounded_idx = [i for i, e in enumerate(corpus.examples) if e.boxes]
    if cfg.adapter_steps > 0 and not grounded_idx:
        raise ValueError("corpus has no examples with boxes for adapter training")
    adapter_losses: list[float] = []
    opt_a = Adam(model.adapter_names(), lr=cfg.adapter_lr)
    for step in range(cfg.adapter_steps):
        idx = rng.integers(0, len(grounded_idx), size=cfg.batch)
        chosen = [grounded_idx[int(j)] for j in idx]
        xs = images[chosen]
        ids = np.stack([prompts[j].ids for j in chosen])
        valid = np.stack([prompts[j].valid for j in chosen])
        layouts = []
        for j in chosen:
            boxes = []
            for b in corpus.examples[j].boxes:
                phrase = b.phrase
                if rng.random() < cfg.rare_prefix_prob:
                    phrase = f"{RARE_TOKENS[int(rng.integers(len(RARE_TOKENS)))]} {phrase}"
                boxes.append(LayoutBox(*b.coords, phrase=phrase))
            layouts.append(boxes)
        grounding = prepare_grounding(mcfg, layouts)
        ts = rng.integers(0, sched.T, size=cfg.batch)
        eps = rng.standard_normal(xs.shape).astype(np.float32)
        x_t = q_sample(xs, ts, eps, sched)
        loss, grads = _batch_loss_and_grads(model, x_t, ts, eps, ids, valid, grounding)
        clip_grads_(grads, cfg.grad_clip, names=model.adapter_names())
        opt_a.step(model.params, grads)
        adapter_losses.append(loss)
        if step % cfg.log_every == 0:
            logger.info("adapter step %d loss %.4f", step, loss)
        log({"phase": "adapter", "step": step, "loss": loss})
    if log_f:
        log_f.close()
    return {"base_losses": base_losses, "adapter_losses": adapter_losses}
