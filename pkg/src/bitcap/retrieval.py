"""Nearest-neighbor sentence retrieval over the training pool.

Stands in for a learned cross-modal retriever behind the same interface:
object features in, the most relevant training sentence out.  Each pool
entry is one (sample, caption) pair keyed by the sample's mean-pooled,
L2-normalized object feature; queries are pooled the same way and matched
by cosine.  The pool is immutable after build, so concurrent queries are
safe, and it persists as a line-delimited index file with hex floats for
exact round trips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SentencePool:
    features: np.ndarray  # (entries, feat_dim), rows L2-normalized
    sample_ids: np.ndarray  # (entries,) owning sample per entry
    captions: list[tuple[int, ...]]  # token ids per entry

    def __len__(self) -> int:
        return len(self.captions)


def _pool_feature(feats: np.ndarray) -> np.ndarray:
    v = np.asarray(feats, dtype=np.float64).mean(axis=0)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v
    return v / norm


def build_pool(samples: list[tuple[int, np.ndarray, list[list[int]]]]) -> SentencePool:
    """samples: (sample_id, object features (K, feat_dim), captions) triples."""
    if not samples:
        raise ValueError("cannot build a retrieval pool from an empty training set")
    features = []
    sample_ids = []
    captions = []
    for sid, feats, caps in samples:
        pooled = _pool_feature(feats)
        for cap in caps:
            features.append(pooled)
            sample_ids.append(sid)
            captions.append(tuple(int(w) for w in cap))
    return SentencePool(
        features=np.stack(features),
        sample_ids=np.asarray(sample_ids),
        captions=captions,
    )


def retrieve(
    query_feats: np.ndarray,
    pool: SentencePool,
    exclude_sample_id: int | None = None,
) -> tuple[int, ...]:
    """Caption of the highest-cosine pool entry, ties to the lowest index."""
    q = _pool_feature(np.asarray(query_feats))
    scores = pool.features @ q
    if exclude_sample_id is not None:
        scores = np.where(pool.sample_ids == exclude_sample_id, -np.inf, scores)
    best = int(np.argmax(scores))
    if not np.isfinite(scores[best]):
        raise LookupError("all pool entries excluded for this query")
    return pool.captions[best]


def save_pool(pool: SentencePool, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, feat, cap in zip(pool.sample_ids, pool.features, pool.captions):
            record = {
                "sample_id": int(sid),
                "feature": [float(x).hex() for x in feat],
                "tokens": list(cap),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_pool(path: str | Path) -> SentencePool:
    features, sample_ids, captions = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            features.append([float.fromhex(x) for x in record["feature"]])
            sample_ids.append(record["sample_id"])
            captions.append(tuple(record["tokens"]))
    if not captions:
        raise ValueError(f"{path}: empty pool index")
    return SentencePool(
        features=np.asarray(features),
        sample_ids=np.asarray(sample_ids),
        captions=captions,
    )
