"""Training loops, evaluation, checkpoints-with-state, and run reports.

Stage 1 trains the cascade with the joint regression + cross-entropy
objective under a warmup learning-rate schedule, keeping the checkpoint
with the best validation consensus score.  The teacher is a plain
autoregressive run.  Stage 2 fine-tunes the cascade with reward-guided
policy gradients at a small constant rate, swapping the guide sentence for
the model's own estimate once validation saturates.

Every run directory gets a manifest (config snapshot, dataset hash, code
version), a metric-curve CSV of (step, metric, value) rows, and, for
evaluations, a key-value report plus a plain-text table with the ten worst
decodes.  All randomness flows through one generator per phase whose state
is checkpointed, so a resumed run replays the exact stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bitcodec import PAD, BitCodec, Vocabulary
from .cascade import CascadeModel, build_cascade, cascade_sample, train_cascade_step
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import RunConfig
from .data import Sample, dataset_hash, load_split, load_vocabulary
from .gscst import (
    SaturationState,
    baseline_decode,
    fill_rewards,
    gscst_surrogate,
    refresh_guide,
    sample_candidates,
)
from .layers import Dropout, flatten_params
from .metrics import RefCorpus,bleu, build_ref_corpus, cider_d, corpus_cider
from .optim import AdamState, LrSchedule, adam_step, zero_grads
from .teacher import TeacherConfig, TeacherModel, greedy_decode, teacher_init, teacher_loss
from .tensor import backward


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step for diagnosis."""


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class DataBundle:
    vocab: Vocabulary
    codec: BitCodec
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    reward_corpus: RefCorpus  # train references, used for rewards and guides

    def split(self, name: str) -> list[Sample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def load_bundle(cfg: RunConfig) -> DataBundle:
    vocab = load_vocabulary(cfg.data_dir, cfg.seq_len)
    codec = BitCodec(len(vocab), cfg.seq_len, scale=cfg.bit_scale)
    train = load_split(cfg.data_dir, "train")
    val = load_split(cfg.data_dir, "val")
    test = load_split(cfg.data_dir, "test")
    reward_corpus = build_ref_corpus(
        {s.scene_id: [vocab.decode_ids(c) for c in s.captions] for s in train}
    )
    return DataBundle(vocab=vocab, codec=codec, train=train, val=val, test=test,
                      reward_corpus=reward_corpus)


@dataclass
class Batch:
    feats: np.ndarray  # (B, K_max, feat_dim) zero-padded
    obj_mask: np.ndarray | None  # (B, K_max) validity, None when K is uniform
    targets: np.ndarray  # (B, seq_len) padded caption ids
    retrieved: np.ndarray  # (B, retrieval_len) padded retrieved-sentence ids
    sample_ids: list[int] = field(default_factory=list)


def _pad_tokens(tokens, length: int) -> np.ndarray:
    out = np.full(length, PAD, dtype=np.int64)
    tokens = list(tokens)[:length]
    out[: len(tokens)] = tokens
    return out


def make_batch(
    pairs: list[tuple[Sample, int]], codec: BitCodec, retrieval_len: int
) -> Batch:
    """Assemble (sample, caption index) pairs into padded arrays."""
    k_max = max(s.features.shape[0] for s, _ in pairs)
    feat_dim = pairs[0][0].features.shape[1]
    feats = np.zeros((len(pairs), k_max, feat_dim))
    mask = np.zeros((len(pairs), k_max), dtype=bool)
    targets = np.zeros((len(pairs), codec.seq_len), dtype=np.int64)
    retrieved = np.zeros((len(pairs), retrieval_len), dtype=np.int64)
    ids = []
    uniform = True
    for row, (sample, cap_idx) in enumerate(pairs):
        k = sample.features.shape[0]
        uniform &= k == k_max
        feats[row, :k] = sample.features
        mask[row, :k] = True
        targets[row] = codec.pad_ids(sample.captions[cap_idx])
        retrieved[row] = _pad_tokens(sample.retrieved, retrieval_len)
        ids.append(sample.scene_id)
    return Batch(feats=feats, obj_mask=None if uniform else mask, targets=targets,
                 retrieved=retrieved, sample_ids=ids)


def training_pairs(samples: list[Sample]) -> list[tuple[Sample, int]]:
    """One training example per (scene, caption) pair, like the real corpora."""
    return [(s, i) for s in samples for i in range(len(s.captions))]


def batched(seq, size: int):
    for start in range(0, len(seq), size):
        yield seq[start : start + size]


# ---------------------------------------------------------------------------
# model construction and checkpoint round trips


def new_cascade(cfg: RunConfig, vocab_size: int, rng: np.random.Generator) -> CascadeModel:
    codec = BitCodec(vocab_size, cfg.seq_len, scale=cfg.bit_scale)
    stage_cfg = cfg.stage_config(vocab_size, codec.n_bits)
    return build_cascade(rng, stage_cfg, cfg.n_stages, codec, cfg.fusion, cfg.np_dtype())


def _cascade_hyper(model: CascadeModel, cfg: RunConfig) -> dict:
    base = model.configs[0]
    return {
        "kind": "cascade",
        "vocab_size": base.vocab_size,
        "n_bits": base.n_bits,
        "seq_len": base.seq_len,
        "feat_dim": base.feat_dim,
        "retrieval_len": base.retrieval_len,
        "d_model": base.d_model,
        "n_heads": base.n_heads,
        "n_enc_blocks": base.n_enc_blocks,
        "n_dec_blocks": base.n_dec_blocks,
        "n_sem_blocks": base.n_sem_blocks,
        "dropout": base.dropout,
        "n_stages": model.n_stages,
        "fusion": model.fusion,
        "bit_scale": model.codec.scale,
        "dtype": cfg.dtype,
    }


def save_cascade(
    path: str | Path,
    model: CascadeModel,
    cfg: RunConfig,
    extra: dict | None = None,
    opt: AdamState | None = None,
) -> None:
    entries = {f"model.{k}": v for k, v in model.named_params().items()}
    if opt is not None:
        for name, m in opt.m.items():
            entries[f"opt.m.{name}"] = m
        for name, v in opt.v.items():
            entries[f"opt.v.{name}"] = v
    save_checkpoint(path, entries, _cascade_hyper(model, cfg), extra or {}, dtype=cfg.dtype)


def load_cascade(path: str | Path) -> tuple[CascadeModel, dict, dict]:
    """Returns (model, header, optimizer moment arrays keyed by param name)."""
    arrays, header = load_checkpoint(path)
    h = header["hyper"]
    if h.get("kind") != "cascade":
        raise ValueError(f"{path}: not a cascade checkpoint")
    from .captioner import StageConfig

    stage_cfg = StageConfig(
        vocab_size=h["vocab_size"], n_bits=h["n_bits"], seq_len=h["seq_len"],
        feat_dim=h["feat_dim"], retrieval_len=h["retrieval_len"], d_model=h["d_model"],
        n_heads=h["n_heads"], n_enc_blocks=h["n_enc_blocks"], n_dec_blocks=h["n_dec_blocks"],
        n_sem_blocks=h["n_sem_blocks"], dropout=h["dropout"],
    )
    codec = BitCodec(h["vocab_size"], h["seq_len"], scale=h["bit_scale"])
    dtype = np.float32 if header["dtype"] == "float32" else np.float64
    model = build_cascade(np.random.default_rng(0), stage_cfg, h["n_stages"], codec,
                          h["fusion"], dtype)
    model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    restore_into(model.named_params(), model_arrays)
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return model, header, opt_arrays


def new_teacher(cfg: RunConfig, vocab_size: int, rng: np.random.Generator) -> TeacherModel:
    tc = TeacherConfig(
        vocab_size=vocab_size, seq_len=cfg.seq_len, feat_dim=cfg.feat_dim,
        d_model=cfg.d_model, n_heads=cfg.n_heads,
        n_enc_blocks=cfg.n_enc_blocks, n_dec_blocks=cfg.n_dec_blocks, dropout=cfg.dropout,
        retrieval_len=cfg.retrieval_len,
    )
    return teacher_init(rng, tc, dtype=cfg.np_dtype())


def save_teacher(path, model: TeacherModel, cfg: RunConfig, extra=None) -> None:
    hyper = {"kind": "teacher", "dtype": cfg.dtype}
    hyper.update(
        {k: getattr(model.cfg, k)
         for k in ("vocab_size", "seq_len", "feat_dim", "d_model", "n_heads",
                   "n_enc_blocks", "n_dec_blocks", "dropout", "retrieval_len")}
    )
    entries = {f"model.{k}": v for k, v in model.named_params().items()}
    save_checkpoint(path, entries, hyper, extra or {}, dtype=cfg.dtype)


def load_teacher(path) -> tuple[TeacherModel, dict]:
    arrays, header = load_checkpoint(path)
    h = header["hyper"]
    if h.get("kind") != "teacher":
        raise ValueError(f"{path}: not a teacher checkpoint")
    tc = TeacherConfig(
        vocab_size=h["vocab_size"], seq_len=h["seq_len"], feat_dim=h["feat_dim"],
        d_model=h["d_model"], n_heads=h["n_heads"],
        n_enc_blocks=h["n_enc_blocks"], n_dec_blocks=h["n_dec_blocks"], dropout=h["dropout"],
        retrieval_len=h.get("retrieval_len", 0),
    )
    dtype = np.float32 if header["dtype"] == "float32" else np.float64
    model = teacher_init(np.random.default_rng(0), tc, dtype=dtype)
    restore_into(model.named_params(), {k[len("model."):]: v for k, v in arrays.items()})
    return model, header


# ---------------------------------------------------------------------------
# bookkeeping


def write_manifest(out_dir: Path, cfg: RunConfig, phase: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "phase": phase,
        "config": cfg.to_dict(),
        "dataset_hash": dataset_hash(cfg.data_dir),
        "code_version": __version__,
    }
    (out_dir / f"manifest_{phase}.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


class CurveWriter:
    """Appends (step, metric, value) rows; float repr keeps bytes stable."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("step,metric,value\n", encoding="utf-8")

    def add(self, step: int, metric: str, value: float) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{step},{metric},{value!r}\n")


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _check_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} at step {step}")


# ---------------------------------------------------------------------------
# decoding + evaluation


def decode_split(
    model: CascadeModel,
    samples: list[Sample],
    cfg: RunConfig,
    rng: np.random.Generator,
) -> dict[int, list[int]]:
    """Greedy-chain captions for every sample; returns scene_id -> word ids."""
    sampler = cfg.sampler_config(stochastic=False)
    schedule = cfg.noise_schedule()
    out: dict[int, list[int]] = {}
    for chunk in batched(samples, cfg.batch_size):
        batch = make_batch([(s, 0) for s in chunk], model.codec,
                           model.configs[0].retrieval_len or 1)
        retrieved = batch.retrieved if model.configs[0].retrieval_len > 0 else None
        result = cascade_sample(model, batch.feats, retrieved, sampler, schedule, rng,
                                obj_mask=batch.obj_mask)
        for sid, words in zip(batch.sample_ids, result.words):
            out[sid] = [int(w) for w in words]
    return out


def _strip(vocab: Vocabulary, ids) -> list[str]:
    return vocab.decode_ids(ids)


def validation_cider(model: CascadeModel, samples: list[Sample], cfg: RunConfig,
                     vocab: Vocabulary) -> float:
    corpus = build_ref_corpus(
        {s.scene_id: [_strip(vocab, c) for c in s.captions] for s in samples}
    )
    decoded = decode_split(model, samples, cfg, np.random.default_rng(cfg.eval_seed))
    return corpus_cider({sid: _strip(vocab, w) for sid, w in decoded.items()}, corpus)


def evaluate_checkpoint(
    cfg: RunConfig, ckpt_path: str | Path, split: str, out_dir: str | Path | None = None
) -> dict:
    """Decode a split and score it; writes report.kv, report.txt, per-sample CSV."""
    bundle = load_bundle(cfg)
    model, _, _ = load_cascade(ckpt_path)
    samples = bundle.split(split)
    vocab = bundle.vocab
    corpus = build_ref_corpus(
        {s.scene_id: [_strip(vocab, c) for c in s.captions] for s in samples}
    )
    decoded = decode_split(model, samples, cfg, np.random.default_rng(cfg.eval_seed))
    candidates = {sid: _strip(vocab, words) for sid, words in decoded.items()}
    per_sample = {sid: cider_d(cand, sid, corpus) for sid, cand in candidates.items()}
    cider = sum(per_sample.values()) / len(per_sample)
    refs = [[_strip(vocab, c) for c in s.captions] for s in samples]
    bleus = bleu([candidates[s.scene_id] for s in samples], refs)

    report = {"split": split, "n_samples": len(samples), "cider_d": cider}
    for i, b in enumerate(bleus, start=1):
        report[f"bleu{i}"] = b

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"report_{split}.kv", "w", encoding="utf-8") as fh:
            for key, value in report.items():
                fh.write(f"{key}={value!r}\n")
        worst = sorted(per_sample.items(), key=lambda kv: (kv[1], kv[0]))[:10]
        text = "metrics\n" + format_table(["metric", "value"], [
            [k, f"{v:.6f}" if isinstance(v, float) else str(v)] for k, v in report.items()
        ])
        text += "\nworst 10 samples\n"
        wrows = []
        for sid, score in worst:
            sample = next(s for s in samples if s.scene_id == sid)
            wrows.append([
                str(sid), f"{score:.4f}", " ".join(candidates[sid]),
                " ".join(_strip(vocab, sample.captions[0])),
            ])
        text += format_table(["scene", "cider", "decoded", "first_reference"], wrows)
        (out_dir / f"report_{split}.txt").write_text(text, encoding="utf-8")
        with open(out_dir / f"per_sample_{split}.csv", "w", encoding="utf-8") as fh:
            fh.write("scene_id,cider\n")
            for sid in sorted(per_sample):
                fh.write(f"{sid},{per_sample[sid]!r}\n")
    return report


# ---------------------------------------------------------------------------
# training loops


def train_teacher(cfg: RunConfig, bundle: DataBundle | None = None,
                  out_dir: str | Path | None = None) -> Path:
    """Cross-entropy training of the autoregressive guide model."""
    if cfg.seed is None:
        raise ValueError("training requires a seed")
    bundle = bundle or load_bundle(cfg)
    out = Path(out_dir or cfg.out_dir)
    write_manifest(out, cfg, "teacher")
    curve = CurveWriter(out / "curve_teacher.csv")
    rng = np.random.default_rng([cfg.seed, 2])
    model = new_teacher(cfg, len(bundle.vocab), rng)
    params = model.named_params()
    opt = AdamState(schedule=LrSchedule(kind="constant", base_lr=cfg.teacher_lr))
    drop = Dropout(cfg.dropout, rng) if cfg.dropout > 0 else None
    pairs = training_pairs(bundle.train)
    step = 0
    best = -np.inf
    best_path = out / "teacher_best.ckpt"
    for epoch in range(cfg.teacher_epochs):
        order = rng.permutation(len(pairs))
        for idx_chunk in batched(order, cfg.batch_size):
            batch = make_batch([pairs[i] for i in idx_chunk], bundle.codec, cfg.retrieval_len)
            zero_grads(params)
            loss = teacher_loss(model, batch.feats, batch.targets,
                                smoothing=cfg.teacher_smoothing, drop=drop,
                                obj_mask=batch.obj_mask, retrieved=batch.retrieved)
            value = float(loss.data)
            _check_finite(value, step, "teacher loss")
            backward(loss)
            adam_step(params, opt)
            step += 1
            if step % 50 == 1:
                curve.add(step, "teacher_loss", value)
        if (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.teacher_epochs - 1:
            val_score = _teacher_val_cider(model, bundle, cfg)
            curve.add(step, "teacher_val_cider", val_score)
            if val_score > best:
                best = val_score
                save_teacher(best_path, model, cfg,
                             extra={"epoch": epoch, "val_cider": val_score})
    if not best_path.exists():
        save_teacher(best_path, model, cfg, extra={"epoch": cfg.teacher_epochs - 1})
    return best_path


def _teacher_val_cider(model: TeacherModel, bundle: DataBundle, cfg: RunConfig) -> float:
    vocab = bundle.vocab
    corpus = build_ref_corpus(
        {s.scene_id: [_strip(vocab, c) for c in s.captions] for s in bundle.val}
    )
    cands = {}
    for chunk in batched(bundle.val, cfg.batch_size):
        batch = make_batch([(s, 0) for s in chunk], bundle.codec, cfg.retrieval_len)
        words = greedy_decode(model, batch.feats, obj_mask=batch.obj_mask,
                              retrieved=batch.retrieved)
        for sid, w in zip(batch.sample_ids, words):
            cands[sid] = _strip(vocab, w)
    return corpus_cider(cands, corpus)


def train_stage1(cfg: RunConfig, bundle: DataBundle | None = None,
                 out_dir: str | Path | None = None,
                 resume: str | Path | None = None) -> tuple[Path, Path]:
    """Joint-objective training; keeps the best-validation checkpoint."""
    if cfg.seed is None:
        raise ValueError("training requires a seed")
    bundle = bundle or load_bundle(cfg)
    out = Path(out_dir or cfg.out_dir)
    write_manifest(out, cfg, "stage1")
    curve_path = out / "curve_stage1.csv"
    best_path = out / "stage1_best.ckpt"
    last_path = out / "stage1_last.ckpt"

    rng = np.random.default_rng([cfg.seed, 3])
    model = new_cascade(cfg, len(bundle.vocab), rng)
    opt = AdamState(schedule=LrSchedule(
        kind="noam", factor=cfg.lr_factor, warmup=cfg.warmup, model_width=cfg.d_model))
    start_epoch = 0
    best = -np.inf
    step = 0
    curve = CurveWriter(curve_path)
    if resume is not None:
        model, header, opt_arrays = load_cascade(resume)
        extra = header["extra"]
        start_epoch = extra["epoch"] + 1
        best = extra["best_val_cider"]
        step = extra["step"]
        opt.step = extra["opt_step"]
        names = model.named_params().keys()
        opt.m = {k: opt_arrays[f"opt.m.{k}"].copy() for k in names if f"opt.m.{k}" in opt_arrays}
        opt.v = {k: opt_arrays[f"opt.v.{k}"].copy() for k in names if f"opt.v.{k}" in opt_arrays}
        rng = _rng_from_state(extra["rng_state"])

    # optimizer sees only the stages that are not frozen
    trainable = {}
    for i in range(cfg.freeze_stages, model.n_stages):
        trainable.update(flatten_params({f"stage.{i}": model.stages[i]}))
    drop = Dropout(cfg.dropout, rng) if cfg.dropout > 0 else None
    schedule = cfg.noise_schedule()
    pairs = training_pairs(bundle.train)

    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(pairs))
        for idx_chunk in batched(order, cfg.batch_size):
            batch = make_batch([pairs[i] for i in idx_chunk], model.codec, cfg.retrieval_len)
            retrieved = batch.retrieved if cfg.use_retrieval else None
            zero_grads(trainable)
            total, per_stage = train_cascade_step(
                model, batch.feats, batch.targets, retrieved, schedule, rng,
                smoothing=cfg.label_smoothing, self_cond_prob=cfg.self_cond_prob,
                drop=drop, obj_mask=batch.obj_mask,
            )
            value = float(total.data)
            _check_finite(value, step, "stage-1 loss")
            backward(total)
            adam_step(trainable, opt)
            step += 1
            if step % 50 == 1:
                curve.add(step, "train_loss", value)
        if (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1:
            val_score = validation_cider(model, bundle.val, cfg, bundle.vocab)
            curve.add(step, "val_cider", val_score)
            if val_score > best:
                best = val_score
                save_cascade(best_path, model, cfg,
                             extra={"epoch": epoch, "val_cider": val_score, "step": step})
        save_cascade(
            last_path, model, cfg, opt=opt,
            extra={"epoch": epoch, "best_val_cider": best, "step": step,
                   "opt_step": opt.step, "rng_state": _rng_state(rng)},
        )
    if not best_path.exists():
        save_cascade(best_path, model, cfg, extra={"epoch": cfg.epochs - 1, "step": step})
    return best_path, curve_path


def train_stage2(
    cfg: RunConfig,
    stage1_ckpt: str | Path,
    teacher_ckpt: str | Path,
    bundle: DataBundle | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Path, Path]:
    """Reward-guided fine-tuning against the consensus metric."""
    if cfg.seed is None:
        raise ValueError("training requires a seed")
    bundle = bundle or load_bundle(cfg)
    out = Path(out_dir or cfg.out_dir)
    write_manifest(out, cfg, "stage2")
    curve = CurveWriter(out / "curve_stage2.csv")
    best_path = out / "stage2_best.ckpt"

    model, _, _ = load_cascade(stage1_ckpt)
    teacher, _ = load_teacher(teacher_ckpt)
    vocab = bundle.vocab
    params = model.named_params()
    opt = AdamState(schedule=LrSchedule(kind="constant", base_lr=cfg.stage2_lr))
    rng = np.random.default_rng([cfg.seed, 4])
    schedule = cfg.noise_schedule()
    sampler = cfg.sampler_config(stochastic=False)
    sat = SaturationState(patience=cfg.patience)

    # teacher guide sentences, decoded once per training scene
    guides: dict[int, np.ndarray] = {}
    for chunk in batched(bundle.train, cfg.batch_size):
        batch = make_batch([(s, 0) for s in chunk], model.codec, cfg.retrieval_len)
        words = greedy_decode(teacher, batch.feats, obj_mask=batch.obj_mask,
                              retrieved=batch.retrieved)
        for sid, w in zip(batch.sample_ids, words):
            guides[sid] = w

    def to_tokens(ids):
        return _strip(vocab, ids)

    best = validation_cider(model, bundle.val, cfg, vocab)
    sat.update(best)
    curve.add(0, "val_cider", best)
    save_cascade(best_path, model, cfg, extra={"epoch": -1, "val_cider": best, "step": 0})

    step = 0
    scenes = list(bundle.train)
    for epoch in range(cfg.stage2_epochs):
        order = rng.permutation(len(scenes))
        for idx_chunk in batched(order, cfg.batch_size):
            chunk = [scenes[i] for i in idx_chunk]
            batch = make_batch([(s, 0) for s in chunk], model.codec, cfg.retrieval_len)
            retrieved = batch.retrieved if cfg.use_retrieval else None
            baseline = baseline_decode(model, batch.feats, retrieved, sampler, schedule,
                                       obj_mask=batch.obj_mask)
            guide_rows = []
            for row, sid in enumerate(batch.sample_ids):
                guide_rows.append(refresh_guide(
                    guides[sid], baseline[row], sid, bundle.reward_corpus, sat, to_tokens))
            guide_arr = np.stack(guide_rows)
            zero_grads(params)
            reward_batch = sample_candidates(
                model, batch.feats, guide_arr, retrieved, cfg.n_candidates, schedule, rng,
                baseline=baseline, temperature=cfg.temperature, obj_mask=batch.obj_mask,
            )
            fill_rewards(reward_batch, batch.sample_ids, bundle.reward_corpus, to_tokens)
            if np.all(reward_batch.rewards == reward_batch.baseline_rewards[:, None]):
                step += 1
                continue  # zero advantage everywhere: leave the parameters alone
            surrogate = gscst_surrogate(reward_batch)
            value = float(surrogate.data)
            _check_finite(value, step, "stage-2 surrogate")
            backward(surrogate)
            adam_step(params, opt)
            step += 1
            if step % 20 == 1:
                curve.add(step, "surrogate", value)
                curve.add(step, "mean_reward", float(reward_batch.rewards.mean()))
        val_score = validation_cider(model, bundle.val, cfg, vocab)
        curve.add(step, "val_cider", val_score)
        if val_score > best:
            best = val_score
            save_cascade(best_path, model, cfg,
                         extra={"epoch": epoch, "val_cider": val_score, "step": step})
        sat.update(val_score)
    return best_path, out / "curve_stage2.csv"
