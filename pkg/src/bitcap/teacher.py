"""Autoregressive transformer captioner used as the guide-sentence source.

Same encoder-decoder skeleton as a denoising stage, but the decoder input
is the shifted word sequence, self-attention is causally masked, and
decoding runs word by word (greedy or small-beam).  Logits at a position
depend only on earlier positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .captioner import object_key_mask
from .layers import (
    Dropout,
    block_init,
    causal_mask,
    decoder_block,
    embedding_init,
    encoder_block,
    flatten_params,
    linear,
    linear_init,
)
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class TeacherConfig:
    vocab_size: int
    seq_len: int
    feat_dim: int
    d_model: int = 512
    n_heads: int = 8
    n_enc_blocks: int = 3
    n_dec_blocks: int = 3
    dropout: float = 0.1
    retrieval_len: int = 0  # >0 appends embedded retrieved tokens to the memory

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")


@dataclass
class TeacherModel:
    cfg: TeacherConfig
    params: dict

    def named_params(self) -> dict[str, Tensor]:
        return flatten_params(self.params)


def teacher_init(rng: np.random.Generator, cfg: TeacherConfig, dtype=np.float32) -> TeacherModel:
    params = {
        "vis_proj": linear_init(rng, cfg.feat_dim, cfg.d_model, dtype),
        "enc": [block_init(rng, cfg.d_model, dtype) for _ in range(cfg.n_enc_blocks)],
        "word_emb": embedding_init(rng, cfg.vocab_size, cfg.d_model, dtype),
        "bos": Tensor(rng.normal(0.0, 0.02, size=cfg.d_model).astype(dtype), requires_grad=True),
        "pos_text": embedding_init(rng, cfg.seq_len, cfg.d_model, dtype),
        "dec": [block_init(rng, cfg.d_model, dtype, cross_attention=True)
                for _ in range(cfg.n_dec_blocks)],
        "head": linear_init(rng, cfg.d_model, cfg.vocab_size, dtype),
    }
    if cfg.retrieval_len > 0:
        params["pos_ret"] = embedding_init(rng, cfg.retrieval_len, cfg.d_model, dtype)
    return TeacherModel(cfg=cfg, params=params)


def encode_features(
    model: TeacherModel,
    feats: np.ndarray,
    drop: Dropout | None = None,
    obj_mask: np.ndarray | None = None,
    retrieved: np.ndarray | None = None,
) -> Tensor:
    """Visual tokens, optionally extended with embedded retrieved tokens."""
    x = linear(tt.astensor(np.asarray(feats)), model.params["vis_proj"])
    mask = object_key_mask(obj_mask, x.dtype)
    for block in model.params["enc"]:
        x = encoder_block(x, block, model.cfg.n_heads, mask=mask, drop=drop)
    if retrieved is not None and model.cfg.retrieval_len > 0:
        ret = np.asarray(retrieved)
        if ret.ndim == 1:
            ret = ret[None]
        z_r = tt.embedding(model.params["word_emb"], ret)
        z_r = z_r + tt.narrow(model.params["pos_ret"], 0, 0, ret.shape[1])
        x = tt.concat([x, z_r], axis=1)
    return x


def _shift_right(model: TeacherModel, words: np.ndarray) -> Tensor:
    """Decoder inputs: start vector followed by the first seq_len-1 words."""
    cfg = model.cfg
    words = np.asarray(words)
    emb = tt.embedding(model.params["word_emb"], words[:, : cfg.seq_len - 1])
    bos = model.params["bos"].reshape((1, 1, cfg.d_model))
    bos = tt.concat([bos] * words.shape[0], axis=0) if words.shape[0] > 1 else bos
    return tt.concat([bos, emb], axis=1) + model.params["pos_text"]


def teacher_logits(
    model: TeacherModel,
    feats: np.ndarray,
    words: np.ndarray,
    visual: Tensor | None = None,
    drop: Dropout | None = None,
    obj_mask: np.ndarray | None = None,
    retrieved: np.ndarray | None = None,
) -> Tensor:
    """Causal next-word logits, shape (batch, seq_len, vocab)."""
    cfg = model.cfg
    if visual is None:
        visual = encode_features(model, feats, drop=drop, obj_mask=obj_mask,
                                 retrieved=retrieved)
    h = _shift_right(model, words)
    mask = causal_mask(cfg.seq_len, h.dtype)
    cross = None
    if obj_mask is not None:
        valid = np.asarray(obj_mask)
        extra = visual.shape[1] - valid.shape[1]
        if extra > 0:  # retrieved-token memory entries are always valid keys
            valid = np.concatenate([valid, np.ones((valid.shape[0], extra), bool)], axis=1)
        cross = object_key_mask(valid, h.dtype)
    for block in model.params["dec"]:
        h = decoder_block(h, visual, block, cfg.n_heads, self_mask=mask,
                          cross_mask=cross, drop=drop)
    return linear(h, model.params["head"])


def teacher_loss(
    model: TeacherModel,
    feats: np.ndarray,
    target_words: np.ndarray,
    smoothing: float = 0.0,
    drop: Dropout | None = None,
    obj_mask: np.ndarray | None = None,
    retrieved: np.ndarray | None = None,
) -> Tensor:
    """Next-word cross entropy averaged over positions, optional smoothing."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing {smoothing} outside [0, 1)")
    targets = np.asarray(target_words)
    logits = teacher_logits(model, feats, targets, drop=drop, obj_mask=obj_mask,
                            retrieved=retrieved)
    logp = tt.log_softmax(logits, axis=-1)
    picked = tt.gather(logp, targets[:, :, None], axis=2)
    loss = -(1.0 - smoothing) * picked.mean()
    if smoothing > 0.0:
        loss = loss - (smoothing / model.cfg.vocab_size) * logp.sum(axis=2).mean()
    return loss


def greedy_decode(
    model: TeacherModel, feats: np.ndarray, obj_mask: np.ndarray | None = None,
    retrieved: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic word-by-word argmax decode, shape (batch, seq_len)."""
    cfg = model.cfg
    feats = np.asarray(feats)
    batch = feats.shape[0]
    words = np.zeros((batch, cfg.seq_len), dtype=np.int64)
    with no_grad():
        visual = encode_features(model, feats, obj_mask=obj_mask, retrieved=retrieved)
        for pos in range(cfg.seq_len):
            logits = teacher_logits(model, feats, words, visual=visual,
                                    obj_mask=obj_mask).data
            words[:, pos] = np.argmax(logits[:, pos, :], axis=-1)
    return words


def beam_decode(model: TeacherModel, feats: np.ndarray, width: int = 3) -> np.ndarray:
    """Small beam search per sample; returns the best full-length sequence."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    cfg = model.cfg
    feats = np.asarray(feats)
    out = np.zeros((feats.shape[0], cfg.seq_len), dtype=np.int64)
    with no_grad():
        for b in range(feats.shape[0]):
            fb = feats[b : b + 1]
            visual = encode_features(model, fb)
            beams = [(0.0, np.zeros(cfg.seq_len, dtype=np.int64))]
            for pos in range(cfg.seq_len):
                candidates = []
                for score, seq in beams:
                    logits = teacher_logits(model, fb, seq[None], visual=visual).data[0, pos]
                    logp = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
                    top = np.argsort(-logp, kind="stable")[:width]
                    for w in top:
                        nxt = seq.copy()
                        nxt[pos] = w
                        candidates.append((score + float(logp[w]), nxt))
                candidates.sort(key=lambda sc: (-sc[0], sc[1].tobytes()))
                beams = candidates[:width]
            out[b] = beams[0][1]
    return out
