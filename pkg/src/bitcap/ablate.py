"""Four-arm ablation: base, +semantic, +reward-guided, +cascade.

Every arm within one seed shares the same generated dataset (hashes are
logged to prove it) and the same teacher checkpoint.  Arms:

  base      single stage, no retrieved-sentence conditioning, joint loss
  semantic  single stage with retrieved-sentence conditioning
  gscst     semantic + reward-guided fine-tuning
  cascade   two stages + reward-guided fine-tuning

The headline table holds the median over seeds of BLEU@1-4 and CIDEr-D on
the test split, one row per arm, written both as a byte-stable CSV and a
plain-text table.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import dataset_hash, generate_dataset
from .train import (
    evaluate_checkpoint,
    format_table,
    load_bundle,
    train_stage1,
    train_stage2,
    train_teacher,
)

ARMS = ["base", "semantic", "gscst", "cascade"]
METRIC_COLUMNS = ["bleu1", "bleu2", "bleu3", "bleu4", "cider_d"]


def bench_config(base: RunConfig | None = None) -> RunConfig:
    """Desk-scale benchmark defaults: small enough for a laptop-hour grid."""
    cfg = base or RunConfig()
    return replace(
        cfg,
        n_scenes=400,
        n_templates=80,
        k_min=2,
        k_max=3,
        captions_min=2,
        captions_max=4,
        feat_dim=32,
        jitter=0.5,
        seq_len=12,
        retrieval_len=8,
        d_model=64,
        n_heads=4,
        n_enc_blocks=2,
        n_dec_blocks=2,
        n_sem_blocks=2,
        dropout=0.0,
        steps=50,
        batch_size=16,
        warmup=400,
        lr_factor=1.0,
        epochs=10,
        teacher_epochs=12,
        stage2_epochs=6,
        n_candidates=5,
    )


def arm_config(cfg: RunConfig, arm: str) -> RunConfig:
    if arm == "base":
        return replace(cfg, use_retrieval=False, n_stages=1)
    if arm == "semantic":
        return replace(cfg, use_retrieval=True, n_stages=1)
    if arm == "gscst":
        return replace(cfg, use_retrieval=True, n_stages=1)
    if arm == "cascade":
        return replace(cfg, use_retrieval=True, n_stages=2)
    raise ValueError(f"unknown arm {arm!r}")


def run_arm_for_seed(cfg: RunConfig, arm: str, seed: int, seed_dir: Path,
                     teacher_ckpt: Path) -> dict:
    """Train and test-evaluate one arm; reuses the semantic stage-1 checkpoint
    for the gscst arm since their stage-1 configurations are identical."""
    acfg = replace(arm_config(cfg, arm), seed=seed, out_dir=str(seed_dir / arm))
    out = Path(acfg.out_dir)
    bundle = load_bundle(acfg)
    if arm == "gscst":
        stage1_ckpt = seed_dir / "semantic" / "stage1_best.ckpt"
        if not stage1_ckpt.exists():
            stage1_ckpt, _ = train_stage1(
                replace(acfg, out_dir=str(seed_dir / "semantic")), bundle)
    else:
        stage1_ckpt, _ = train_stage1(acfg, bundle)
    final_ckpt = stage1_ckpt
    if arm in ("gscst", "cascade"):
        final_ckpt, _ = train_stage2(acfg, stage1_ckpt, teacher_ckpt, bundle)
    report = evaluate_checkpoint(acfg, final_ckpt, "test", out_dir=out)
    report["dataset_hash"] = dataset_hash(acfg.data_dir)
    return report


def run_ablation(cfg: RunConfig, seeds: list[int], out_dir: str | Path) -> dict:
    """Full grid; returns {"per_seed": ..., "median": ...} and writes reports."""
    if not seeds:
        raise ValueError("need at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed: dict[str, dict[int, dict]] = {arm: {} for arm in ARMS}
    hashes = {}
    for seed in seeds:
        seed_dir = out_dir / f"seed{seed}"
        data_dir = seed_dir / "data"
        scfg = replace(cfg, data_dir=str(data_dir), seed=seed)
        if not (data_dir / "dataset_manifest.json").exists():
            generate_dataset(scfg.dataset_spec(), seed=seed, out_dir=data_dir)
        hashes[seed] = dataset_hash(data_dir)
        bundle = load_bundle(scfg)
        teacher_ckpt = seed_dir / "teacher" / "teacher_best.ckpt"
        if not teacher_ckpt.exists():
            teacher_ckpt = train_teacher(
                replace(scfg, out_dir=str(seed_dir / "teacher")), bundle)
        for arm in ARMS:
            per_seed[arm][seed] = run_arm_for_seed(scfg, arm, seed, seed_dir, teacher_ckpt)

    median = {
        arm: {
            col: float(np.median([per_seed[arm][s][col] for s in seeds]))
            for col in METRIC_COLUMNS
        }
        for arm in ARMS
    }

    csv_lines = ["arm," + ",".join(METRIC_COLUMNS)]
    for arm in ARMS:
        csv_lines.append(arm + "," + ",".join(repr(median[arm][c]) for c in METRIC_COLUMNS))
    (out_dir / "ablation.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")

    per_seed_lines = ["arm,seed," + ",".join(METRIC_COLUMNS)]
    for arm in ARMS:
        for seed in seeds:
            rep = per_seed[arm][seed]
            per_seed_lines.append(
                f"{arm},{seed}," + ",".join(repr(rep[c]) for c in METRIC_COLUMNS))
    (out_dir / "ablation_per_seed.csv").write_text(
        "\n".join(per_seed_lines) + "\n", encoding="utf-8")

    rows = [[arm] + [f"{median[arm][c]:.4f}" for c in METRIC_COLUMNS] for arm in ARMS]
    table = format_table(["arm"] + METRIC_COLUMNS, rows)
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")

    summary = {
        "seeds": seeds,
        "dataset_hashes": {str(k): v for k, v in hashes.items()},
        "median": median,
        "code_version": __version__,
        "config": cfg.to_dict(),
    }
    (out_dir / "ablation_manifest.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"per_seed": per_seed, "median": median, "table": table}
