"""Stacked denoising stages with per-timestep output fusion.

Stage 1 runs the plain retrieval-conditioned pass; every later stage also
sees the fused clean-bits estimate of the stage before it (gradient-free,
both in training and at inference).  At each sampler timestep the running
fusion of stage outputs drives the reverse transition, and the final words
come from the last fused distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tt
from .bitcodec import BitCodec
from .captioner import (
    ConditioningBundle,
    StageConfig,
    StageOutput,
    bits_from_probs,
    encode_visual,
    stage_forward,
    stage_init,
    stage_loss,
)
from .diffusion import NoiseSchedule, SamplerConfig, SampleResult, forward_diffuse, reverse_step
from .layers import Dropout, flatten_params
from .tensor import Tensor, no_grad


@dataclass
class CascadeModel:
    configs: list[StageConfig]
    stages: list[dict]
    codec: BitCodec
    fusion: str = "mean_prob"  # "mean_prob" | "mean_bits"

    def __post_init__(self):
        if len(self.stages) < 1 or len(self.stages) != len(self.configs):
            raise ValueError("need one parameter tree per stage, at least one stage")
        if self.fusion not in ("mean_prob", "mean_bits"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.configs[0].has_prev_stage or not all(c.has_prev_stage for c in self.configs[1:]):
            raise ValueError("exactly the stages after the first take a previous-stage input")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def named_params(self) -> dict[str, Tensor]:
        return flatten_params({"stage": self.stages})


def build_cascade(
    rng: np.random.Generator,
    cfg: StageConfig,
    n_stages: int,
    codec: BitCodec,
    fusion: str = "mean_prob",
    dtype=np.float32,
) -> CascadeModel:
    """Create n_stages fresh stages sharing one codec and base config."""
    if cfg.has_prev_stage:
        raise ValueError("pass the first-stage config; later stages are derived")
    configs = [replace(cfg, has_prev_stage=(i > 0)) for i in range(n_stages)]
    stages = [stage_init(rng, c, dtype=dtype) for c in configs]
    return CascadeModel(configs=configs, stages=stages, codec=codec, fusion=fusion)


def fuse(current: StageOutput, previous: StageOutput, mode: str, codes: np.ndarray) -> StageOutput:
    """Combine a stage output with the running fusion of earlier stages.

    mean_prob averages the word distributions (renormalized) and recomputes
    the bits from the averaged distribution; mean_bits averages the bit
    estimates and keeps the current stage's distribution.
    """
    if current.bits.shape != previous.bits.shape:
        raise tt.ShapeError("fuse", [current.bits.shape, previous.bits.shape])
    if mode == "mean_prob":
        probs = (current.probs + previous.probs) * 0.5
        probs = probs / probs.sum(axis=1, keepdims=True)
        logp = tt.safe_log(probs)
        bits = bits_from_probs(probs, codes.astype(probs.dtype, copy=False))
        return StageOutput(bits=bits, probs=probs, logp=logp)
    if mode == "mean_bits":
        bits = (current.bits + previous.bits) * 0.5
        return StageOutput(bits=bits, probs=current.probs, logp=current.logp)
    raise ValueError(f"unknown fusion mode {mode!r}")


def cascade_forward(
    model: CascadeModel,
    x_t: np.ndarray,
    gamma_value,
    feats: np.ndarray,
    prev_estimates: list[np.ndarray],
    retrieved: np.ndarray | None,
    drop: Dropout | None = None,
    visuals: list[Tensor] | None = None,
    obj_mask: np.ndarray | None = None,
) -> tuple[list[StageOutput], list[StageOutput]]:
    """Run every stage once; returns (raw outputs, running fusions).

    prev_estimates holds one self-conditioning buffer per stage.  Stage
    i >= 2 is conditioned on the fused estimate of stage i-1, detached so
    no gradient crosses stage boundaries.
    """
    if len(prev_estimates) != model.n_stages:
        raise ValueError("need one self-conditioning buffer per stage")
    outputs: list[StageOutput] = []
    fused: list[StageOutput] = []
    for i, (params, cfg) in enumerate(zip(model.stages, model.configs)):
        bundle = ConditioningBundle(
            prev_estimate=prev_estimates[i],
            retrieved=retrieved if cfg.retrieval_len > 0 else None,
            prev_stage_bits=None if i == 0 else fused[i - 1].bits.data,
        )
        out = stage_forward(
            x_t, gamma_value, feats, bundle, params, cfg, model.codec.codes,
            drop=drop, visual=None if visuals is None else visuals[i],
            obj_mask=obj_mask,
        )
        outputs.append(out)
        fused.append(out if i == 0 else fuse(out, fused[i - 1], model.fusion, model.codec.codes))
    return outputs, fused


def cascade_sample(
    model: CascadeModel,
    feats: np.ndarray,
    retrieved: np.ndarray | None,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    x_init: np.ndarray | None = None,
    obj_mask: np.ndarray | None = None,
) -> SampleResult:
    """Reverse chain with the whole cascade as denoiser.

    Each stage keeps its own self-conditioning buffer (its previous raw
    estimate); the fused estimate of the last stage drives the state
    transition, and its final distribution yields the words.
    """
    feats = np.asarray(feats)
    batch = feats.shape[0]
    codec = model.codec
    shape = (batch, codec.n_bits, codec.seq_len)
    T = config.steps
    with no_grad():
        visuals = [
            encode_visual(feats, params, cfg, obj_mask=obj_mask)
            for params, cfg in zip(model.stages, model.configs)
        ]
        x = rng.standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
        buffers = [np.zeros(shape) for _ in range(model.n_stages)]
        final = None
        for t in range(T, 0, -1):
            s = max(t - 1 - config.time_difference, 0)
            gamma_t = schedule.log_noise_ratio(t / T)
            outputs, fused = cascade_forward(
                model, x, gamma_t, feats, buffers, retrieved, visuals=visuals,
                obj_mask=obj_mask,
            )
            if config.self_conditioning:
                buffers = [out.bits.data for out in outputs]
            final = fused[-1]
            eps = rng.standard_normal(shape) if config.stochastic else None
            x = reverse_step(x, t, s, final.bits.data, eps, T, schedule)
    words = np.argmax(final.probs.data, axis=1)
    return SampleResult(words=words, probs=final.probs.data, bits=x)


def train_cascade_step(
    model: CascadeModel,
    feats: np.ndarray,
    target_ids: np.ndarray,
    retrieved: np.ndarray | None,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    smoothing: float = 0.1,
    self_cond_prob: float = 0.5,
    drop: Dropout | None = None,
    obj_mask: np.ndarray | None = None,
) -> tuple[Tensor, list[float]]:
    """One training forward over a batch; returns (total loss, per-stage losses).

    Sampling recipe per batch: continuous time fraction per sample, fresh
    Gaussian noise, and a coin flip deciding whether the self-conditioning
    buffers come from a gradient-free pre-pass or stay zero.
    """
    x0 = model.codec.encode_batch(target_ids)
    batch = x0.shape[0]
    frac = 1.0 - rng.random(batch)  # uniform on (0, 1]
    eps = rng.standard_normal(x0.shape)
    x_t = forward_diffuse(x0, frac, 1, eps, schedule)  # steps=1 keeps t continuous
    gamma_value = schedule.log_noise_ratio(frac)

    zeros = [np.zeros_like(x0) for _ in range(model.n_stages)]
    buffers = zeros
    if self_cond_prob > 0.0 and rng.random() < self_cond_prob:
        with no_grad():
            pre, _ = cascade_forward(model, x_t, gamma_value, feats, zeros, retrieved,
                                     obj_mask=obj_mask)
        buffers = [out.bits.data for out in pre]

    outputs, _ = cascade_forward(model, x_t, gamma_value, feats, buffers, retrieved,
                                 drop=drop, obj_mask=obj_mask)
    total = None
    per_stage = []
    for out in outputs:
        loss, _, _ = stage_loss(out, x0, target_ids, smoothing=smoothing)
        per_stage.append(float(loss.data))
        total = loss if total is None else total + loss
    return total, per_stage
