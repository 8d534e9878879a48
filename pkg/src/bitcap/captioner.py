"""One denoising transformer stage for caption generation.

A stage maps (noisy bits, log noise ratio, object features, conditioning)
to an estimate of the clean bits plus a per-position word distribution:

  * visual encoder: self-attention blocks over projected object features,
    no positional encoding, so object order is irrelevant;
  * semantic transformer: the noisy bit columns (channel-concatenated with
    the previous-timestep estimate and, for later cascade stages, the
    previous stage's estimate) are projected to model width, given a time
    embedding and learned positions, concatenated with embedded retrieved-
    sentence tokens, and run through self-attention blocks; the first
    seq_len outputs continue;
  * sentence decoder: bidirectional self-attention (no causal mask),
    cross-attention over visual tokens, feed-forward; a linear head gives
    word distributions, and their code-table average gives the bits.

Training minimizes label-smoothed cross entropy plus the bit regression
loss with unit weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tt
from .diffusion import bit_regression_loss
from .layers import (
    Dropout,
    block_init,
    decoder_block,
    embedding_init,
    encoder_block,
    linear,
    linear_init,
)
from .tensor import Tensor


@dataclass(frozen=True)
class StageConfig:
    vocab_size: int
    n_bits: int
    seq_len: int
    feat_dim: int
    retrieval_len: int = 0
    d_model: int = 512
    n_heads: int = 8
    n_enc_blocks: int = 3
    n_dec_blocks: int = 3
    n_sem_blocks: int = 3
    dropout: float = 0.1
    has_prev_stage: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        for field in ("vocab_size", "n_bits", "seq_len", "feat_dim",
                      "d_model", "n_heads", "n_enc_blocks", "n_dec_blocks", "n_sem_blocks"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.retrieval_len < 0:
            raise ValueError("retrieval_len must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def bit_channels(self) -> int:
        # noisy bits + previous-timestep estimate (+ previous-stage estimate)
        return (3 if self.has_prev_stage else 2) * self.n_bits


@dataclass
class ConditioningBundle:
    """Side inputs to one stage forward pass.

    prev_estimate: previous-timestep clean-bits estimate, zeros when absent.
    prev_stage_bits: previous cascade stage's estimate; required exactly
    when the stage was built with has_prev_stage.
    retrieved: token ids of the retrieved sentence, shape (batch, retrieval_len).
    """

    prev_estimate: np.ndarray
    retrieved: np.ndarray | None = None
    prev_stage_bits: np.ndarray | None = None


class StageOutput(NamedTuple):
    bits: Tensor  # (batch, n_bits, seq_len) clean-bits estimate, in [-scale, scale]
    probs: Tensor  # (batch, vocab, seq_len) word distributions
    logp: Tensor  # (batch, vocab, seq_len) log word distributions


def stage_init(rng: np.random.Generator, cfg: StageConfig, dtype=np.float32) -> dict:
    """Fresh parameter tree for one stage."""
    p = {
        "vis_proj": linear_init(rng, cfg.feat_dim, cfg.d_model, dtype),
        "enc": [block_init(rng, cfg.d_model, dtype) for _ in range(cfg.n_enc_blocks)],
        "bit_proj": linear_init(rng, cfg.bit_channels, cfg.d_model, dtype),
        "time_fc1": linear_init(rng, 1, cfg.d_model, dtype),
        "time_fc2": linear_init(rng, cfg.d_model, cfg.d_model, dtype),
        "pos_text": embedding_init(rng, cfg.seq_len, cfg.d_model, dtype),
        "sem": [block_init(rng, cfg.d_model, dtype) for _ in range(cfg.n_sem_blocks)],
        "dec": [block_init(rng, cfg.d_model, dtype, cross_attention=True)
                for _ in range(cfg.n_dec_blocks)],
        "head": linear_init(rng, cfg.d_model, cfg.vocab_size, dtype),
    }
    if cfg.retrieval_len > 0:
        p["word_emb"] = embedding_init(rng, cfg.vocab_size, cfg.d_model, dtype)
        p["ret_proj"] = linear_init(rng, cfg.d_model, cfg.d_model, dtype)
        p["pos_ret"] = embedding_init(rng, cfg.retrieval_len, cfg.d_model, dtype)
    return p


def _batched(x: np.ndarray | Tensor, rank: int):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == rank - 1:
        return arr[None], True
    if arr.ndim == rank:
        return arr, False
    raise tt.ShapeError("stage input", [arr.shape], f"expected rank {rank - 1} or {rank}")


def object_key_mask(obj_mask: np.ndarray | None, dtype) -> np.ndarray | None:
    """(batch, K) validity flags -> additive attention mask over keys."""
    if obj_mask is None:
        return None
    m = np.where(np.asarray(obj_mask), 0.0, -1e9).astype(dtype)
    return m[:, None, None, :]  # broadcast over heads and query positions


def encode_visual(
    feats,
    params: dict,
    cfg: StageConfig,
    drop: Dropout | None = None,
    obj_mask: np.ndarray | None = None,
) -> Tensor:
    """Object features (batch, K, feat_dim) -> visual tokens (batch, K, d_model).

    obj_mask flags valid objects when batches pad to a common K; padded
    rows are hidden from attention keys.
    """
    arr, _ = _batched(feats, 3)
    if arr.shape[1] < 1:
        raise ValueError("need at least one object feature")
    if arr.shape[2] != cfg.feat_dim:
        raise tt.ShapeError("encode_visual", [arr.shape], f"feat_dim must be {cfg.feat_dim}")
    x = linear(tt.astensor(arr), params["vis_proj"])
    mask = object_key_mask(obj_mask, x.dtype)
    for block in params["enc"]:
        x = encoder_block(x, block, cfg.n_heads, mask=mask, drop=drop)
    return x


def _time_embedding(gamma_value, batch: int, params: dict, dtype) -> Tensor:
    g = np.asarray(gamma_value, dtype=dtype).reshape(-1)
    if g.size == 1:
        g = np.full(batch, g[0], dtype=dtype)
    if g.size != batch:
        raise tt.ShapeError("time_embedding", [(g.size,)], f"expected {batch} values")
    t = tt.astensor(g.reshape(batch, 1, 1))
    return linear(tt.gelu(linear(t, params["time_fc1"])), params["time_fc2"])


def condition_semantic(
    x_t,
    bundle: ConditioningBundle,
    gamma_value,
    params: dict,
    cfg: StageConfig,
    drop: Dropout | None = None,
) -> Tensor:
    """Build the decoder input h0: (batch, seq_len, d_model).

    Concatenates bit channels, projects, adds time + position embeddings,
    appends embedded retrieved tokens, runs the semantic blocks, and keeps
    the first seq_len outputs.
    """
    x_arr, _ = _batched(x_t, 3)
    prev_arr, _ = _batched(bundle.prev_estimate, 3)
    if x_arr.shape != prev_arr.shape:
        raise tt.ShapeError("condition_semantic", [x_arr.shape, prev_arr.shape])
    channels = [x_arr, prev_arr]
    if cfg.has_prev_stage:
        if bundle.prev_stage_bits is None:
            raise ValueError("stage expects a previous-stage estimate but none was given")
        stage_arr, _ = _batched(bundle.prev_stage_bits, 3)
        channels.append(stage_arr)
    elif bundle.prev_stage_bits is not None:
        raise ValueError("first stage must not receive a previous-stage estimate")

    # (batch, n_bits, seq_len) channels -> token-major (batch, seq_len, channels)
    stacked = np.concatenate(channels, axis=1).swapaxes(1, 2)
    dtype = params["bit_proj"]["w"].dtype
    z_x = linear(tt.astensor(stacked.astype(dtype, copy=False)), params["bit_proj"])
    z_x = z_x + _time_embedding(gamma_value, stacked.shape[0], params, dtype)
    z_x = z_x + params["pos_text"]

    length = cfg.seq_len
    if bundle.retrieved is not None and cfg.retrieval_len > 0:
        ret = np.asarray(bundle.retrieved)
        if ret.ndim == 1:
            ret = ret[None]
        if ret.shape[1] > cfg.retrieval_len:
            raise tt.ShapeError("condition_semantic", [ret.shape],
                                f"retrieved length exceeds {cfg.retrieval_len}")
        z_r = linear(tt.embedding(params["word_emb"], ret), params["ret_proj"])
        z_r = z_r + tt.narrow(params["pos_ret"], 0, 0, ret.shape[1])
        h = tt.concat([z_x, z_r], axis=1)
    else:
        h = z_x
    for block in params["sem"]:
        h = encoder_block(h, block, cfg.n_heads, drop=drop)
    if h.shape[1] != length:
        h = tt.narrow(h, 1, 0, length)
    return h


def bits_from_probs(probs: Tensor, codes: np.ndarray) -> Tensor:
    """Expected code row under each word distribution.

    probs: (batch, vocab, seq_len); codes: (vocab, n_bits) analog code table.
    A one-hot distribution returns exactly its word's code row; any
    distribution stays inside the code hypercube (convex combination).
    """
    codes_t = tt.astensor(np.ascontiguousarray(codes.T))  # (n_bits, vocab)
    return tt.matmul(codes_t, probs)


def decode_sentence(
    h0: Tensor,
    visual: Tensor,
    params: dict,
    cfg: StageConfig,
    codes: np.ndarray,
    drop: Dropout | None = None,
    obj_mask: np.ndarray | None = None,
) -> StageOutput:
    """Run decoder blocks and the word head; emit distributions and bits."""
    h = h0
    cross_mask = object_key_mask(obj_mask, h0.dtype)
    for block in params["dec"]:
        h = decoder_block(h, visual, block, cfg.n_heads, self_mask=None,
                          cross_mask=cross_mask, drop=drop)
    logits = linear(h, params["head"])  # (batch, seq_len, vocab)
    logp = tt.log_softmax(logits, axis=-1).transpose((0, 2, 1))
    probs = tt.exp(logp)
    bits = bits_from_probs(probs, codes.astype(logits.dtype, copy=False))
    return StageOutput(bits=bits, probs=probs, logp=logp)


def stage_forward(
    x_t,
    gamma_value,
    feats,
    bundle: ConditioningBundle,
    params: dict,
    cfg: StageConfig,
    codes: np.ndarray,
    drop: Dropout | None = None,
    visual: Tensor | None = None,
    obj_mask: np.ndarray | None = None,
) -> StageOutput:
    """Full stage pass; ``visual`` may carry precomputed visual tokens."""
    if visual is None:
        visual = encode_visual(feats, params, cfg, drop=drop, obj_mask=obj_mask)
    h0 = condition_semantic(x_t, bundle, gamma_value, params, cfg, drop=drop)
    return decode_sentence(h0, visual, params, cfg, codes, drop=drop, obj_mask=obj_mask)


def stage_loss(
    output: StageOutput,
    x0: np.ndarray,
    target_words: np.ndarray,
    smoothing: float = 0.1,
) -> tuple[Tensor, float, float]:
    """Joint objective: label-smoothed cross entropy + bit regression.

    Targets are padded word ids of shape (batch, seq_len); pad positions
    count like any other position.  Returns (total, xe_value, bit_value).
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing {smoothing} outside [0, 1)")
    x0_arr, _ = _batched(x0, 3)
    targets = np.asarray(target_words)
    if targets.ndim == 1:
        targets = targets[None]
    vocab = output.logp.shape[1]
    picked = tt.gather(output.logp, targets[:, None, :], axis=1)
    xe = -(1.0 - smoothing) * picked.mean()
    if smoothing > 0.0:
        xe = xe - (smoothing / vocab) * output.logp.sum(axis=1).mean()
    bit = bit_regression_loss(output.bits, x0_arr)
    total = xe + bit
    return total, float(xe.data), float(bit.data)
