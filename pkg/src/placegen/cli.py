"""Experiment driver.

Subcommands: gen-data, train-base, personalize, sample, evaluate,
reproduce-entanglement.  A single JSON config (see ``config.DEFAULT_CONFIG``)
drives everything; ``--set a.b.c=value`` overrides individual fields and the
resolved config is copied into the output directory.

Relative output paths resolve under $PLACEGEN_OUT when it is set.  Exit
codes: 0 success, 2 configuration/validation error, 3 numeric failure.
Heavy imports happen after ``--threads`` pins the BLAS thread pools, so
``--threads 1`` gives bitwise-reproducible runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _resolve_out(path_str: str) -> Path:
    p = Path(path_str)
    root = os.environ.get("PLACEGEN_OUT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_cfg(args) -> dict:
    from .config import apply_override, load_config

    cfg = load_config(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply_override(cfg, key, raw)
    return cfg


def _schedule(cfg):
    from .diffusion import make_schedule

    s = cfg["schedule"]
    return make_schedule(s["T"], s["beta_start"], s["beta_end"])


def _model_config(cfg):
    from .model import ModelConfig

    return ModelConfig(**cfg["model"])


def _concept(cfg):
    from .synthdata import ShapeConcept

    c = cfg["concept"]
    return ShapeConcept(c["family"], c["texture_seed"])


def _sample_config(cfg, **overrides):
    from .sampler import SampleConfig

    merged = dict(cfg["sample"])
    merged.update(overrides)
    return SampleConfig(**merged)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    from .config import save_config
    from .synthdata import make_base_corpus, save_corpus

    out = _resolve_out(cfg["out_dir"])
    corpus = make_base_corpus(cfg["data"]["corpus_size"], cfg["data"]["seed"],
                              cfg["model"]["image_size"])
    save_corpus(corpus, out / "corpus")
    save_config(cfg, out / "config.json")
    print(f"wrote {len(corpus)} images to {out / 'corpus'}")
    return 0


def cmd_train_base(args) -> int:
    cfg = _load_cfg(args)
    from .checkpoint import save_checkpoint
    from .config import save_config
    from .model import DenoiserModel
    from .synthdata import load_corpus, make_base_corpus
    from .training import TrainBaseConfig, train_base

    out = _resolve_out(cfg["out_dir"])
    corpus_dir = out / "corpus"
    if corpus_dir.exists():
        corpus = load_corpus(corpus_dir)
    else:
        corpus = make_base_corpus(cfg["data"]["corpus_size"], cfg["data"]["seed"],
                                  cfg["model"]["image_size"])
    if len(corpus) == 0:
        raise ValueError(f"empty corpus under {corpus_dir}")
    model = DenoiserModel.create(_model_config(cfg), seed=cfg["train_base"]["seed"])
    tcfg = TrainBaseConfig(**{k: v for k, v in cfg["train_base"].items()})
    logs = train_base(model, corpus, _schedule(cfg), tcfg,
                      log_path=out / "train_base_log.jsonl")
    save_checkpoint(model, out / "base.ckpt")
    save_config(cfg, out / "config.json")
    first = logs["base_losses"][:100]
    last = logs["base_losses"][-100:]
    print(f"base.ckpt written; loss {sum(first)/len(first):.4f} -> {sum(last)/len(last):.4f}")
    return 0


def cmd_personalize(args) -> int:
    cfg = _load_cfg(args)
    from .checkpoint import load_checkpoint, save_checkpoint
    from .personalize import (AugmentConfig, ConceptSpec, FinetuneConfig,
                              finetune, load_concept_manifest)
    from .sampler import plain_cfg_sample, SampleConfig
    from .synthdata import make_entanglement_set
    from .vocab import encode_prompt, NULL_TOKEN

    out = _resolve_out(cfg["out_dir"])
    base = load_checkpoint(args.checkpoint or out / "base.ckpt")
    if args.concept_manifest:
        concept_spec = load_concept_manifest(args.concept_manifest)
    else:
        c = cfg["concept"]
        images, _ = make_entanglement_set(_concept(cfg), c["n_images"], c["position"],
                                          cfg["model"]["image_size"], c["seed"])
        concept_spec = ConceptSpec(c["identifier"], c["family"], images)
    p = cfg["personalize"]
    sched = _schedule(cfg)
    prior_path = out / "priors.npy"
    if prior_path.exists():
        import numpy as np
        priors = np.load(prior_path)
    else:
        pos = encode_prompt(f"a photo of a {concept_spec.class_noun}",
                            base.config.vocab, base.config.max_prompt_len)
        neg = encode_prompt(NULL_TOKEN, base.config.vocab, base.config.max_prompt_len)
        prior_cfg = SampleConfig(guidance_scale=p["prior_guidance"], tau=0.0,
                                 steps=cfg["sample"]["steps"], seed=p["seed"])
        priors = plain_cfg_sample(base, pos, neg, prior_cfg, sched,
                                  seeds=[p["seed"] * 31 + i for i in range(p["prior_count"])])
        import numpy as np
        np.save(prior_path, priors)
    aug = AugmentConfig(resize_floor=cfg["augment"]["resize_floor"],
                        canvas_fill=cfg["augment"]["canvas_fill"],
                        enabled=cfg["augment"]["enabled"] and not args.no_augment)
    fcfg = FinetuneConfig(steps=p["steps"], batch=p["batch"], lr=p["lr"],
                          prior_prob=p["prior_prob"], seed=p["seed"],
                          grad_clip=p["grad_clip"])
    suffix = "noaug" if (args.no_augment or not cfg["augment"]["enabled"]) else "aug"
    tuned, losses = finetune(base, concept_spec, priors, fcfg, aug, sched,
                             log_path=out / f"personalize_{suffix}_log.jsonl")
    ckpt = args.out or out / f"personalized_{suffix}.ckpt"
    save_checkpoint(tuned, ckpt)
    print(f"{ckpt} written; loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    from .checkpoint import load_checkpoint
    from .config import config_hash
    from .grounding import load_layout
    from .images import save_png
    from .sampler import DEFAULT_NEGATIVE, PromptBundle, sample
    from .vocab import encode_prompt

    model = load_checkpoint(args.checkpoint)
    sched = _schedule(cfg)
    layout = load_layout(args.layout) if args.layout else None
    scfg = _sample_config(
        cfg,
        **{k: v for k, v in {
            "guidance_scale": args.scale, "tau": args.tau,
            "steps": args.steps, "seed": args.seed}.items() if v is not None})
    vocab, L = model.config.vocab, model.config.max_prompt_len
    c = cfg["concept"]
    positive = args.prompt or f"a photo of a {c['identifier']} {c['family']}"
    negative = args.negative if args.negative is not None else DEFAULT_NEGATIVE
    prompts = PromptBundle(
        positive=encode_prompt(positive, vocab, L),
        negative=encode_prompt(negative, vocab, L),
        suppress=encode_prompt(f"{c['identifier']} {c['family']}", vocab, L),
        diverse=encode_prompt("a high quality, colorful image", vocab, L),
    )
    img = sample(model, layout, prompts, scfg, sched)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_png(img, out_path)
    sidecar = {
        "config_hash": config_hash(cfg),
        "checkpoint": str(args.checkpoint),
        "seed": scfg.seed, "tau": scfg.tau, "guidance_scale": scfg.guidance_scale,
        "steps": scfg.steps,
        "prompts": {"positive": positive, "negative": negative,
                    "suppress": f"{c['identifier']} {c['family']}",
                    "diverse": "a high quality, colorful image"},
        "layout": [{"box": list(b.coords), "phrase": b.phrase} for b in (layout or [])],
    }
    with open(str(out_path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    print(f"wrote {out_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    from .checkpoint import load_checkpoint
    from .evaluation import (collage_classifier_train, full_metric_report,
                             run_guidance_ablation_pair)
    from .synthdata import make_collage_lab

    out = _resolve_out(cfg["out_dir"])
    model = load_checkpoint(args.checkpoint)
    sched = _schedule(cfg)
    e = cfg["eval"]
    c = cfg["concept"]
    scfg = _sample_config(cfg)
    lab_imgs, lab_labels = make_collage_lab(e["collage_train"], cfg["data"]["seed"])
    clf, clf_acc = collage_classifier_train(lab_imgs[lab_labels == 0],
                                            lab_imgs[lab_labels == 1])
    if args.ablation:
        report = run_guidance_ablation_pair(
            model, c["identifier"], c["family"], sched, scfg,
            n=e["n_ablate"], seed=e["seed"], arm=args.ablation,
            threshold=e["detector_threshold"], clf=clf)
    else:
        report = full_metric_report(model, _concept(cfg), c["identifier"], sched,
                                    scfg, n=e["n_loc"], seed=e["seed"],
                                    threshold=e["detector_threshold"], clf=clf)
    report.extra["collage_classifier_accuracy"] = clf_acc
    report_path = Path(args.out) if args.out else out / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    print(f"wrote {report_path}")
    return 0


def cmd_reproduce_entanglement(args) -> int:
    cfg = _load_cfg(args)
    import numpy as np

    from .checkpoint import load_checkpoint
    from .evaluation import run_entanglement_experiment
    from .personalize import AugmentConfig, ConceptSpec, FinetuneConfig, finetune
    from .sampler import SampleConfig, plain_cfg_sample
    from .synthdata import make_entanglement_set
    from .vocab import NULL_TOKEN, encode_prompt

    out = _resolve_out(cfg["out_dir"])
    base = load_checkpoint(args.checkpoint or out / "base.ckpt")
    sched = _schedule(cfg)
    c = cfg["concept"]
    concept = _concept(cfg)
    images, train_box = make_entanglement_set(concept, c["n_images"], c["position"],
                                              cfg["model"]["image_size"], c["seed"])
    spec = ConceptSpec(c["identifier"], c["family"], images)
    p = cfg["personalize"]
    pos = encode_prompt(f"a photo of a {c['family']}", base.config.vocab,
                        base.config.max_prompt_len)
    neg = encode_prompt(NULL_TOKEN, base.config.vocab, base.config.max_prompt_len)
    prior_cfg = SampleConfig(guidance_scale=p["prior_guidance"], tau=0.0,
                             steps=cfg["sample"]["steps"], seed=p["seed"])
    priors = plain_cfg_sample(base, pos, neg, prior_cfg, sched,
                              seeds=[p["seed"] * 31 + i for i in range(p["prior_count"])])
    fcfg = FinetuneConfig(steps=p["steps"], batch=p["batch"], lr=p["lr"],
                          prior_prob=p["prior_prob"], seed=p["seed"],
                          grad_clip=p["grad_clip"])
    aug_on = AugmentConfig(resize_floor=cfg["augment"]["resize_floor"],
                           canvas_fill=cfg["augment"]["canvas_fill"], enabled=True)
    aug_off = AugmentConfig(resize_floor=cfg["augment"]["resize_floor"],
                            canvas_fill=cfg["augment"]["canvas_fill"], enabled=False)
    model_on, _ = finetune(base, spec, priors, fcfg, aug_on, sched)
    model_off, _ = finetune(base, spec, priors, fcfg, aug_off, sched)
    rep_off, rep_on = run_entanglement_experiment(
        model_off, model_on, concept, c["identifier"], train_box, sched,
        _sample_config(cfg), n_per_box=cfg["eval"]["n_per_box"],
        seed=cfg["eval"]["seed"], threshold=cfg["eval"]["detector_threshold"])
    rep_off.save(out / "entanglement_off.json")
    rep_on.save(out / "entanglement_on.json")
    print(json.dumps({
        "off_displaced_drop": rep_off.extra["displaced_drop"],
        "on_band_drop": rep_on.extra["band_drop"],
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="placegen",
                                 description="personalized + layout-controlled tiny diffusion lab")
    ap.add_argument("--config", help="experiment config JSON")
    ap.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a config field (dotted path, JSON value)")
    ap.add_argument("--threads", type=int, default=None,
                    help="pin BLAS/OMP thread count (1 = bitwise deterministic)")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="write the synthetic base corpus")

    sub.add_parser("train-base", help="train base weights, then adapters")

    pp = sub.add_parser("personalize", help="finetune a concept into the base model")
    pp.add_argument("--checkpoint", help="base checkpoint (default <out>/base.ckpt)")
    pp.add_argument("--concept-manifest", help="concept manifest JSON")
    pp.add_argument("--no-augment", action="store_true",
                    help="entanglement control arm: train on raw images")
    pp.add_argument("--out", help="output checkpoint path")

    sp = sub.add_parser("sample", help="regionally-guided sampling")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layout", help="layout JSON file (omit for ungrounded)")
    sp.add_argument("--prompt", help="positive prompt")
    sp.add_argument("--negative", help="negative prompt")
    sp.add_argument("--scale", type=float, help="guidance scale")
    sp.add_argument("--tau", type=float, help="grounded fraction of steps")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output PNG path")

    ep = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--ablation", choices=["no-negative", "no-suppress", "no-diverse"])
    ep.add_argument("--out", help="report JSON path")

    rp = sub.add_parser("reproduce-entanglement",
                        help="both finetune arms + identity-vs-position probe")
    rp.add_argument("--checkpoint", help="base checkpoint (default <out>/base.ckpt)")
    return ap


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "personalize": cmd_personalize,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "reproduce-entanglement": cmd_reproduce_entanglement,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
