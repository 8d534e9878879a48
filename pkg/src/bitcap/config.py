"""Run configuration: every knob in one dataclass, JSON-file overridable.

Precedence (lowest to highest): dataclass defaults, command-line flags,
config file.  Unknown keys in a config file are rejected at load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .captioner import StageConfig
from .data import DatasetSpec
from .diffusion import NoiseSchedule, SamplerConfig


@dataclass(frozen=True)
class RunConfig:
    # data generation / location
    data_dir: str = "data/toy"
    n_scenes: int = 2000
    n_templates: int = 150
    template_variants: int = 2
    k_min: int = 2
    k_max: int = 3
    captions_min: int = 2
    captions_max: int = 5
    feat_dim: int = 32
    jitter: float = 0.35
    class_scale: float = 1.0
    attr_scale: float = 0.6
    seq_len: int = 12
    retrieval_len: int = 12

    # model
    d_model: int = 128
    n_heads: int = 4
    n_enc_blocks: int = 3
    n_dec_blocks: int = 3
    n_sem_blocks: int = 3
    n_stages: int = 2
    fusion: str = "mean_prob"
    dropout: float = 0.1
    bit_scale: float = 1.0
    dtype: str = "float32"
    use_retrieval: bool = True

    # diffusion / sampling
    gamma_min: float = -13.0
    gamma_max: float = 5.0
    steps: int = 50
    time_difference: int = 0
    self_conditioning: bool = True
    self_cond_prob: float = 0.5

    # stage-1 training
    batch_size: int = 16
    epochs: int = 12
    warmup: int = 2000
    lr_factor: float = 1.0
    label_smoothing: float = 0.1
    freeze_stages: int = 0

    # teacher training
    teacher_epochs: int = 12
    teacher_lr: float = 3e-4
    teacher_smoothing: float = 0.0

    # stage-2 (reward-guided) training
    stage2_epochs: int = 10
    stage2_lr: float = 1e-5
    n_candidates: int = 5
    patience: int = 3
    temperature: float = 1.0

    # bookkeeping
    out_dir: str = "runs/exp"
    eval_seed: int = 9999
    eval_interval: int = 1  # epochs between validation decodes
    seed: int | None = None

    def validate(self) -> "RunConfig":
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.fusion not in ("mean_prob", "mean_bits"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing outside [0, 1)")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        self.dataset_spec().validate()
        return self

    # -- derived views ------------------------------------------------

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            n_scenes=self.n_scenes,
            n_templates=self.n_templates,
            template_variants=self.template_variants,
            k_min=self.k_min,
            k_max=self.k_max,
            captions_min=self.captions_min,
            captions_max=self.captions_max,
            feat_dim=self.feat_dim,
            jitter=self.jitter,
            class_scale=self.class_scale,
            attr_scale=self.attr_scale,
            seq_len=self.seq_len,
        )

    def stage_config(self, vocab_size: int, n_bits: int) -> StageConfig:
        return StageConfig(
            vocab_size=vocab_size,
            n_bits=n_bits,
            seq_len=self.seq_len,
            feat_dim=self.feat_dim,
            retrieval_len=self.retrieval_len if self.use_retrieval else 0,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_enc_blocks=self.n_enc_blocks,
            n_dec_blocks=self.n_dec_blocks,
            n_sem_blocks=self.n_sem_blocks,
            dropout=self.dropout,
        )

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(gamma_min=self.gamma_min, gamma_max=self.gamma_max)

    def sampler_config(self, stochastic: bool = False) -> SamplerConfig:
        return SamplerConfig(
            steps=self.steps,
            time_difference=self.time_difference,
            stochastic=stochastic,
            self_conditioning=self.self_conditioning,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name for f in fields(RunConfig)}


def config_from_dict(values: dict, base: RunConfig | None = None) -> RunConfig:
    unknown = set(values) - _FIELDS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = replace(base or RunConfig(), **values)
    return cfg.validate()


def load_config_file(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    values = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(values, dict):
        raise ValueError(f"{path}: config file must hold a JSON object")
    return config_from_dict(values, base=base)
