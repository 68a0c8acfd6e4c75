"""placegen: a desk-scale lab for personalized, layout-controllable diffusion.

Tiny synthetic images, a hand-backpropagated U-Net with gated-attention
adapters, identifier-token finetuning with resize/reposition augmentation,
and regionally-guided deterministic sampling, plus the evaluation harness
that measures localization, identity fidelity, diversity and collage
artifacts.
"""

__version__ = "0.1.0"

from .diffusion import (LossReport, NoiseSchedule, ddim_step, make_schedule,
                        masked_denoise_loss, q_sample)
from .grounding import Layout, LayoutBox, encode_grounding, rasterize_mask
from .model import DenoiserModel, ModelConfig, predict_noise
from .personalize import AugmentConfig, AugmentedSample, ConceptSpec, augment, finetune
from .sampler import PromptBundle, SampleConfig, cfg_combine, compose_regional_negative, sample
from .synthdata import ShapeConcept, make_base_corpus, make_entanglement_set, render_concept
from .vocab import DEFAULT_VOCAB, PromptTokens, encode_prompt

__all__ = [
    "AugmentConfig", "AugmentedSample", "ConceptSpec", "DEFAULT_VOCAB",
    "DenoiserModel", "Layout", "LayoutBox", "LossReport", "ModelConfig",
    "NoiseSchedule", "PromptBundle", "PromptTokens", "SampleConfig",
    "ShapeConcept", "augment", "cfg_combine", "compose_regional_negative",
    "ddim_step", "encode_grounding", "encode_prompt", "finetune",
    "make_base_corpus", "make_entanglement_set", "make_schedule",
    "masked_denoise_loss", "predict_noise", "q_sample", "rasterize_mask",
    "render_concept", "sample",
]
