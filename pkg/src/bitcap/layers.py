"""Transformer building blocks on the in-repo autodiff engine.

Parameters live in nested dicts of tensors (flattened with dotted names
for the optimizer and checkpoints).  Blocks are post-norm: attention,
residual, norm, then a feed-forward wrapped in its own residual + norm.
Attention is scaled dot product over H heads; the feed-forward inner width
is 4x the model width with a GELU.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from .tensor import Tensor


def flatten_params(tree, prefix: str = "") -> dict[str, Tensor]:
    """Nested dicts/lists of tensors -> flat {dotted.name: tensor}."""
    flat: dict[str, Tensor] = {}
    if isinstance(tree, Tensor):
        flat[prefix] = tree
        return flat
    if isinstance(tree, dict):
        items = tree.items()
    elif isinstance(tree, (list, tuple)):
        items = ((str(i), v) for i, v in enumerate(tree))
    else:
        raise TypeError(f"unexpected node of type {type(tree)} at {prefix!r}")
    for key, value in items:
        name = f"{prefix}.{key}" if prefix else str(key)
        flat.update(flatten_params(value, name))
    return flat


def xavier(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)).astype(dtype), requires_grad=True)


def linear_init(rng, d_in: int, d_out: int, dtype) -> dict:
    return {
        "w": xavier(rng, d_in, d_out, dtype),
        "b": Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
    }


def linear(x: Tensor, p: dict) -> Tensor:
    return x @ p["w"] + p["b"]


def norm_init(d: int, dtype) -> dict:
    return {
        "g": Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        "b": Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    }


def norm(x: Tensor, p: dict) -> Tensor:
    return tt.layer_norm(x) * p["g"] + p["b"]


def embedding_init(rng, rows: int, d: int, dtype, scale: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=(rows, d)).astype(dtype), requires_grad=True)


def attention_init(rng, d_model: int, dtype) -> dict:
    return {
        "wq": linear_init(rng, d_model, d_model, dtype),
        "wk": linear_init(rng, d_model, d_model, dtype),
        "wv": linear_init(rng, d_model, d_model, dtype),
        "wo": linear_init(rng, d_model, d_model, dtype),
    }


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return x.reshape((b, length, n_heads, d // n_heads)).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape((b, length, h * dh))


def multi_head_attention(
    query: Tensor,
    memory: Tensor,
    p: dict,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over heads; mask adds to the scores."""
    q = _split_heads(linear(query, p["wq"]), n_heads)
    k = _split_heads(linear(memory, p["wk"]), n_heads)
    v = _split_heads(linear(memory, p["wv"]), n_heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    ctx = tt.softmax(scores, axis=-1) @ v
    return linear(_merge_heads(ctx), p["wo"])


def block_init(rng, d_model: int, dtype, cross_attention: bool = False) -> dict:
    p = {
        "attn": attention_init(rng, d_model, dtype),
        "ln_attn": norm_init(d_model, dtype),
        "ff1": linear_init(rng, d_model, 4 * d_model, dtype),
        "ff2": linear_init(rng, 4 * d_model, d_model, dtype),
        "ln_ff": norm_init(d_model, dtype),
    }
    if cross_attention:
        p["xattn"] = attention_init(rng, d_model, dtype)
        p["ln_xattn"] = norm_init(d_model, dtype)
    return p


def _feed_forward(x: Tensor, p: dict, drop=None) -> Tensor:
    h = tt.gelu(linear(x, p["ff1"]))
    if drop is not None:
        h = drop(h)
    return norm(x + linear(h, p["ff2"]), p["ln_ff"])


def encoder_block(x: Tensor, p: dict, n_heads: int, mask=None, drop=None) -> Tensor:
    """Self-attention + feed-forward, each behind residual + norm."""
    att = multi_head_attention(x, x, p["attn"], n_heads, mask=mask)
    if drop is not None:
        att = drop(att)
    a = norm(x + att, p["ln_attn"])
    return _feed_forward(a, p, drop=drop)


def decoder_block(
    h: Tensor, memory: Tensor, p: dict, n_heads: int,
    self_mask=None, cross_mask=None, drop=None,
) -> Tensor:
    """Self-attention, cross-attention over memory, then feed-forward."""
    att = multi_head_attention(h, h, p["attn"], n_heads, mask=self_mask)
    if drop is not None:
        att = drop(att)
    a = norm(h + att, p["ln_attn"])
    cross = multi_head_attention(a, memory, p["xattn"], n_heads, mask=cross_mask)
    if drop is not None:
        cross = drop(cross)
    b = norm(a + cross, p["ln_xattn"])
    return _feed_forward(b, p, drop=drop)


def causal_mask(length: int, dtype) -> np.ndarray:
    """Additive mask forbidding attention to later positions."""
    m = np.zeros((length, length), dtype=dtype)
    m[np.triu_indices(length, k=1)] = -1e9
    return m


class Dropout:
    """Bound dropout rate + rng, passed through forwards during training."""

    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return tt.dropout(x, self.rate, self.rng)
