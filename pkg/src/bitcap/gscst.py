"""Reward-guided sentence-level fine-tuning of the cascade.

A full reverse chain per sample is too slow to sample from and scores
every position with the same reward, so candidates come from a single
denoiser evaluation instead: the guide sentence is encoded to bits, noised
to a random time, and the cascade's fused distribution at that point is
sampled independently per position.  One candidate slot always holds the
guide sentence itself, so a high-quality sentence keeps receiving positive
advantage against the greedy-chain baseline.  Once validation saturates,
the guide may be replaced by the model's own estimate when that scores
higher against the references.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitcodec import PAD
from .cascade import CascadeModel, cascade_forward, cascade_sample
from .diffusion import NoiseSchedule, SamplerConfig, forward_diffuse
from .metrics import RefCorpus, cider_d
from .tensor import Tensor, concat, gather

BASELINE_SEED = 1234  # fixed so greedy baselines are deterministic given params


@dataclass
class RewardBatch:
    """Candidate sentences for one image batch plus their taped log-probs.

    sentences: (batch, n_candidates, seq_len) word ids; slot guide_slot of
    every row is the enforced guide sentence.  log_probs is the taped
    (batch, n_candidates) tensor of per-sentence log-probabilities under
    the sampling distribution.  rewards / baseline_rewards are filled by
    ``fill_rewards`` before the gradient step.
    """

    sentences: np.ndarray
    log_probs: Tensor
    baseline: np.ndarray
    guide_slot: int = 0
    rewards: np.ndarray | None = None
    baseline_rewards: np.ndarray | None = None

    @property
    def n_candidates(self) -> int:
        return self.sentences.shape[1]


@dataclass
class SaturationState:
    """Tracks validation quality; saturated after `patience` flat epochs."""

    patience: int = 3
    best_score: float = -np.inf
    flat_epochs: int = 0
    history: list[float] = field(default_factory=list)

    def update(self, score: float) -> None:
        self.history.append(score)
        if score > self.best_score:
            self.best_score = score
            self.flat_epochs = 0
        else:
            self.flat_epochs += 1

    @property
    def saturated(self) -> bool:
        return self.flat_epochs >= self.patience


def baseline_decode(
    model: CascadeModel,
    feats: np.ndarray,
    retrieved: np.ndarray | None,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    seed: int = BASELINE_SEED,
    obj_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Greedy reference sentences: the full chain with re-noising disabled.

    Runs with a fixed seed so the baseline is a deterministic function of
    the parameters; no gradient flows through it.
    """
    cfg = SamplerConfig(
        steps=config.steps,
        time_difference=config.time_difference,
        stochastic=False,
        self_conditioning=config.self_conditioning,
    )
    result = cascade_sample(model, feats, retrieved, cfg, schedule,
                            np.random.default_rng(seed), obj_mask=obj_mask)
    return result.words


def sample_candidates(
    model: CascadeModel,
    feats: np.ndarray,
    guides: np.ndarray,
    retrieved: np.ndarray | None,
    n_candidates: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    baseline: np.ndarray | None = None,
    temperature: float = 1.0,
    obj_mask: np.ndarray | None = None,
) -> RewardBatch:
    """Draw candidate sentences from one denoiser evaluation.

    The guide sentences are bit-encoded and noised to a per-sample random
    time; the cascade's fused word distribution there is sampled per
    position for n_candidates-1 sentences, and slot 0 is forced to the
    guide itself.  Per-sentence log-probability is the sum of positionwise
    log-probs under that distribution, kept on the tape.
    """
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    guides = np.asarray(guides)
    batch, seq_len = guides.shape
    x0 = model.codec.encode_batch(guides)
    frac = 1.0 - rng.random(batch)
    eps = rng.standard_normal(x0.shape)
    x_t = forward_diffuse(x0, frac, 1, eps, schedule)
    gamma_value = schedule.log_noise_ratio(frac)
    zeros = [np.zeros_like(x0) for _ in range(model.n_stages)]
    _, fused = cascade_forward(model, x_t, gamma_value, feats, zeros, retrieved,
                               obj_mask=obj_mask)
    final = fused[-1]

    log_probs_data = final.logp.data  # (batch, vocab, seq_len)
    sentences = np.empty((batch, n_candidates, seq_len), dtype=np.int64)
    sentences[:, 0, :] = guides
    if n_candidates > 1:
        # Gumbel trick per draw: argmax(logp / temperature + G)
        noise = rng.gumbel(size=(batch, n_candidates - 1, log_probs_data.shape[1], seq_len))
        scores = log_probs_data[:, None, :, :] / temperature + noise
        sentences[:, 1:, :] = np.argmax(scores, axis=2)

    per_candidate = []
    for j in range(n_candidates):
        idx = sentences[:, j, :][:, None, :]  # (batch, 1, seq_len)
        picked = gather(final.logp, idx, axis=1)  # (batch, 1, seq_len)
        per_candidate.append(picked.sum(axis=2))  # (batch, 1)
    log_probs = concat(per_candidate, axis=1)  # (batch, n_candidates)

    return RewardBatch(
        sentences=sentences,
        log_probs=log_probs,
        baseline=baseline if baseline is not None else guides.copy(),
        guide_slot=0,
    )


def fill_rewards(
    batch: RewardBatch,
    sample_ids: list,
    corpus: RefCorpus,
    id_to_tokens,
) -> None:
    """Score every candidate and the baseline with the consensus metric.

    id_to_tokens maps a padded word-id row to the token sequence the metric
    expects (pads stripped, indices mapped to words).
    """
    b, k, _ = batch.sentences.shape
    rewards = np.zeros((b, k))
    base = np.zeros(b)
    for i, sid in enumerate(sample_ids):
        for j in range(k):
            rewards[i, j] = cider_d(id_to_tokens(batch.sentences[i, j]), sid, corpus)
        base[i] = cider_d(id_to_tokens(batch.baseline[i]), sid, corpus)
    batch.rewards = rewards
    batch.baseline_rewards = base


def gscst_surrogate(batch: RewardBatch) -> Tensor:
    """Scalar whose gradient is the guided policy-gradient estimator.

      -(1/N) * sum_j (R(candidate_j) - R(baseline)) * log p(candidate_j)

    averaged over the image batch.  Advantages are constants; only the
    log-probabilities carry gradient.  Equal rewards everywhere give an
    exactly zero gradient.
    """
    if batch.rewards is None or batch.baseline_rewards is None:
        raise ValueError("rewards not filled; call fill_rewards first")
    advantage = batch.rewards - batch.baseline_rewards[:, None]
    n = batch.n_candidates
    weighted = batch.log_probs * advantage.astype(batch.log_probs.dtype)
    return -(weighted.sum(axis=1) * (1.0 / n)).mean()


def refresh_guide(
    teacher_sentence: np.ndarray,
    model_sentence: np.ndarray,
    sample_id,
    corpus: RefCorpus,
    state: SaturationState,
    id_to_tokens,
) -> np.ndarray:
    """Guide selection rule: the teacher sentence until saturation, then
    whichever of (teacher, model estimate) scores higher, ties to teacher."""
    if not state.saturated:
        return teacher_sentence
    tea = cider_d(id_to_tokens(teacher_sentence), sample_id, corpus)
    own = cider_d(id_to_tokens(model_sentence), sample_id, corpus)
    return model_sentence if own > tea else teacher_sentence


def strip_pads(ids) -> list[int]:
    return [int(w) for w in ids if int(w) != PAD]
