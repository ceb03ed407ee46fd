"""Ablation grid: the model variants of the cross-view study.

Variants (matching the ablation table layout):

* ``infonce``          - plain momentum-contrast baseline, trained for the
                         combined epoch budget (stage 2 disabled).
* ``viewclr``          - the full model.
* ``viewclr_no_3d``    - drops the 3D consistency loss, and with it the
                         autoencoder and reconstruction term.
* ``viewclr_no_adv``   - drops the adversarial loss.
* ``viewclr_mix_only`` - drops both; the third stream bypasses the viewpoint
                         generator and only feeds manifold mixup.

Stage-1 work is shared: the baseline run doubles as the stage-1 prefix of
every ViewCLR variant with the same seed (identical step-level derivations),
so variants resume from its epoch-``stage1_epochs`` checkpoint.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .evaluation import EvalConfig, linear_probe
from .trainer import ClipDataset, TrainConfig, Trainer

log = logging.getLogger(__name__)

VARIANTS = ("infonce", "viewclr", "viewclr_no_3d", "viewclr_no_adv", "viewclr_mix_only")
PROTOCOLS = ("cvs1", "cvs2", "cvs3")


def variant_train_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    total = base.stage1_epochs + base.stage2_epochs
    if variant == "infonce":
        return replace(base, seed=seed, stage1_epochs=total, stage2_epochs=0,
                       checkpoint_every=max(1, base.stage1_epochs))
    if variant == "viewclr":
        return replace(base, seed=seed, checkpoint_every=total)
    if variant == "viewclr_no_3d":
        w = (base.loss_weights[0], 0.0, base.loss_weights[2], 0.0)
        return replace(base, seed=seed, loss_weights=w, checkpoint_every=total)
    if variant == "viewclr_no_adv":
        w = (base.loss_weights[0], base.loss_weights[1], 0.0, base.loss_weights[3])
        return replace(base, seed=seed, loss_weights=w, checkpoint_every=total)
    if variant == "viewclr_mix_only":
        w = (base.loss_weights[0], 0.0, 0.0, 0.0)
        return replace(base, seed=seed, loss_weights=w, generator_enabled=False,
                       checkpoint_every=total)
    raise ValueError(f"unknown variant {variant!r}")


def train_variant(
    enc_cfg: EncoderConfig,
    base: TrainConfig,
    variant: str,
    seed: int,
    data: ClipDataset,
    out_root: Path,
    generator_overrides: dict | None = None,
) -> Path:
    """Train one (variant, seed) cell, reusing the shared stage-1 prefix.

    Returns the final checkpoint path.
    """
    out_root = Path(out_root)
    cfg = variant_train_config(base, variant, seed)
    run_dir = out_root / f"{variant}_seed{seed}"
    final = run_dir / "checkpoints" / "final.npz"
    if final.exists():
        return final

    resume_from = None
    if variant != "infonce":
        stage1_ckpt = (
            out_root / f"infonce_seed{seed}" / "checkpoints" / f"epoch_{base.stage1_epochs:04d}.npz"
        )
        if not stage1_ckpt.exists():
            train_variant(enc_cfg, base, "infonce", seed, data, out_root, generator_overrides)
        resume_from = stage1_ckpt

    trainer = Trainer(enc_cfg, cfg, data, run_dir=run_dir, generator_overrides=generator_overrides)
    trainer.run_training(resume_from=resume_from)
    return final


def probe_variant(
    checkpoint: Path, data_root, eval_cfg: EvalConfig, seed: int, protocols=PROTOCOLS
) -> dict[str, float]:
    scores = {}
    cfg = replace(eval_cfg, seed=seed)
    for protocol in protocols:
        result = linear_probe(checkpoint, data_root, "probe_train", protocol, cfg, protocol)
        scores[protocol] = result.top1_accuracy
    return scores


def run_ablation(
    enc_cfg: EncoderConfig,
    base: TrainConfig,
    eval_cfg: EvalConfig,
    data_root,
    out_root,
    seeds=(0, 1, 2),
    variants=VARIANTS,
    protocols=PROTOCOLS,
    generator_overrides: dict | None = None,
) -> dict:
    """Train and probe the full grid; returns per-seed and median scores."""
    data = ClipDataset(data_root, "pretrain")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    per_seed: dict[str, dict[str, list[float]]] = {
        v: {p: [] for p in protocols} for v in variants
    }
    failures: dict[str, str] = {}
    for variant in variants:
        try:
            for seed in seeds:
                final = train_variant(
                    enc_cfg, base, variant, seed, data, out_root, generator_overrides
                )
                scores = probe_variant(final, data_root, eval_cfg, seed, protocols)
                for p, v in scores.items():
                    per_seed[variant][p].append(v)
        except Exception as exc:  # keep the report going for completed variants
            log.exception("variant %s failed", variant)
            failures[variant] = f"{type(exc).__name__}: {exc}"
    medians = {
        v: {p: (float(np.median(vals)) if vals else None) for p, vals in per_seed[v].items()}
        for v in variants
    }
    return {"per_seed": per_seed, "median": medians, "failures": failures}


def write_ablation_csv(path, results: dict, variants=VARIANTS, protocols=PROTOCOLS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *protocols])
        for variant in variants:
            row = [variant]
            for p in protocols:
                value = results["median"].get(variant, {}).get(p)
                row.append("" if value is None else f"{value:.4f}")
            writer.writerow(row)
    return path
