"""Synthetic caption benchmark: templated object scenes with grammar captions.

A scene holds K objects, each a (class, attribute) pair, plus relation
words on a few ordered object pairs.  Captions follow the fixed pattern

    <article> <attribute> <class> <relation> <article> <attribute> <class>

so every caption names classes actually present in the scene, and scenes
with several related pairs yield structurally different captions of the
same image (the multimodality that trips per-position decoding).  Object
features are class embedding + attribute embedding + Gaussian jitter from
fixed seeded tables, making the feature-to-word mapping learnable but
noisy.  Scenes are drawn from a limited template pool shared across
splits, so nearest-neighbor retrieval against the training pool finds a
semantically matching sentence even for held-out scenes.

Dataset files are line-delimited JSON with features as hex floats, hence
byte-stable across runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bitcodec import Vocabulary
from .retrieval import SentencePool, build_pool, retrieve, save_pool

ARTICLES = ["a", "the"]

CLASSES = [
    "dog", "cat", "bird", "horse", "sheep", "cow", "zebra", "bear",
    "boat", "car", "bus", "train", "plane", "bike", "truck", "sled",
    "chair", "table", "bench", "couch", "lamp", "clock", "vase", "mirror",
    "apple", "banana", "orange", "melon", "pizza", "cake", "donut", "bagel",
    "ball", "kite", "drum", "guitar", "book", "phone", "laptop", "camera",
    "tree", "bush", "rock", "river", "hill", "cloud", "flower", "fence",
    "robot", "statue", "kettle", "basket",
]

ATTRIBUTES = [
    "red", "blue", "green", "yellow", "purple", "orange_hued", "black", "white",
    "gray", "brown", "golden", "silver", "tiny", "small", "large", "huge",
    "shiny", "dull", "striped", "spotted", "fluffy", "smooth", "rusty", "clean",
    "old", "new", "bright", "dark", "round", "square", "tall", "short",
    "wooden", "metal", "plastic", "glass", "wet", "dry", "fast", "slow",
]

RELATIONS = [
    "beside", "above", "below", "near", "behind", "facing", "chasing", "watching",
    "touching", "carrying", "pulling", "pushing", "holding", "following", "leading",
    "circling", "guarding", "avoiding", "mirroring", "approaching", "leaving",
    "blocking", "supporting", "balancing",
]


def build_vocabulary(seq_len: int) -> Vocabulary:
    return Vocabulary.build(ARTICLES + ATTRIBUTES + CLASSES + RELATIONS, seq_len)


@dataclass(frozen=True)
class DatasetSpec:
    """Generation knobs; paired with a seed this pins the dataset bytes.

    Templates come in class-set groups: every group shares its object
    classes across `template_variants` variants that differ in attributes
    and relations.  Classes are therefore decodable from features alone,
    while the variant (hence the attribute and relation words) is only
    resolvable through the attribute component of the pooled features,
    which is what the retrieval index matches on.
    """

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

    def validate(self) -> None:
        if self.n_scenes < 64:
            raise ValueError("need at least 64 scenes")
        if not 2 <= self.k_min <= self.k_max:
            raise ValueError("object count range must satisfy 2 <= k_min <= k_max")
        if not 1 <= self.captions_min <= self.captions_max:
            raise ValueError("bad captions range")
        if self.seq_len < 7:
            raise ValueError("captions are 7 tokens; seq_len must be >= 7")
        if self.k_max > len(CLASSES):
            raise ValueError("k_max exceeds the class inventory")
        if self.feat_dim < 4:
            raise ValueError("feat_dim too small to embed the inventory")
        if self.template_variants < 1 or self.n_templates < self.template_variants:
            raise ValueError("need at least one class group of template variants")


@dataclass
class ToyScene:
    scene_id: int
    template_id: int
    classes: list[int]  # per object, index into CLASSES
    attributes: list[int]  # per object, index into ATTRIBUTES
    relations: dict[tuple[int, int], int]  # ordered object pair -> RELATIONS index
    features: np.ndarray  # (K, feat_dim)


@dataclass
class Sample:
    """One benchmark record as the trainers consume it."""

    scene_id: int
    features: np.ndarray
    captions: list[list[int]]  # token ids over the grammar vocabulary
    retrieved: list[int]
    template_id: int = -1


@dataclass(frozen=True)
class Template:
    classes: tuple[int, ...]
    attributes: tuple[int, ...]
    relations: tuple[tuple[int, int, int], ...]  # (subject, object, relation id)


def _make_templates(spec: DatasetSpec, rng: np.random.Generator) -> list[Template]:
    templates = []
    n_groups = max(1, spec.n_templates // spec.template_variants)
    for _ in range(n_groups):
        k = int(rng.integers(spec.k_min, spec.k_max + 1))
        classes = tuple(int(c) for c in rng.choice(len(CLASSES), size=k, replace=False))
        pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
        for _ in range(spec.template_variants):
            attrs = tuple(int(a) for a in rng.integers(0, len(ATTRIBUTES), size=k))
            n_rel = int(rng.integers(1, min(3, len(pairs)) + 1))
            chosen = rng.choice(len(pairs), size=n_rel, replace=False)
            relations = tuple(
                (pairs[int(p)][0], pairs[int(p)][1], int(rng.integers(0, len(RELATIONS))))
                for p in chosen
            )
            templates.append(Template(classes=classes, attributes=attrs, relations=relations))
    return templates


def _scene_features(
    template: Template, spec: DatasetSpec, tables: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
) -> np.ndarray:
    class_table, attr_table = tables
    feats = class_table[list(template.classes)] + attr_table[list(template.attributes)]
    feats = feats + spec.jitter * rng.standard_normal(feats.shape)
    return feats


def _caption_tokens(
    template: Template, vocab: Vocabulary, rng: np.random.Generator
) -> list[int]:
    subj, obj, rel = template.relations[int(rng.integers(0, len(template.relations)))]
    words = [
        ARTICLES[int(rng.integers(0, 2))],
        ATTRIBUTES[template.attributes[subj]],
        CLASSES[template.classes[subj]],
        RELATIONS[rel],
        ARTICLES[int(rng.integers(0, 2))],
        ATTRIBUTES[template.attributes[obj]],
        CLASSES[template.classes[obj]],
    ]
    return vocab.encode_words(words)


def generate_dataset(spec: DatasetSpec, seed: int, out_dir: str | Path) -> dict:
    """Write vocab, train/val/test splits, and the retrieval pool index.

    Splits are disjoint by scene id (80/10/10).  Training samples carry a
    self-excluded retrieved sentence; validation and test samples retrieve
    against the training pool.  Returns a summary dict (also written as
    dataset_manifest.json).
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary(spec.seq_len)

    master = np.random.default_rng([seed, 0xD5])
    templates = _make_templates(spec, master)
    class_table = spec.class_scale * master.standard_normal((len(CLASSES), spec.feat_dim))
    attr_table = spec.attr_scale * master.standard_normal((len(ATTRIBUTES), spec.feat_dim))
    tables = (class_table, attr_table)

    scenes: list[ToyScene] = []
    captions_per_scene: list[list[list[int]]] = []
    for scene_id in range(spec.n_scenes):
        rng = np.random.default_rng([seed, 1, scene_id])
        template_id = int(rng.integers(0, len(templates)))
        template = templates[template_id]
        feats = _scene_features(template, spec, tables, rng)
        n_caps = int(rng.integers(spec.captions_min, spec.captions_max + 1))
        caps = [_caption_tokens(template, vocab, rng) for _ in range(n_caps)]
        scenes.append(
            ToyScene(
                scene_id=scene_id,
                template_id=template_id,
                classes=list(template.classes),
                attributes=list(template.attributes),
                relations={(s, o): r for s, o, r in template.relations},
                features=feats,
            )
        )
        captions_per_scene.append(caps)

    n = spec.n_scenes
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    split_ids = {
        "train": list(range(0, n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n)),
    }

    pool = build_pool(
        [(sid, scenes[sid].features, captions_per_scene[sid]) for sid in split_ids["train"]]
    )
    save_pool(pool, out_dir / "pool.idx")
    vocab.save(out_dir / "vocab.txt")

    for name, ids in split_ids.items():
        with open(out_dir / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for sid in ids:
                scene = scenes[sid]
                exclude = sid if name == "train" else None
                retrieved = retrieve(scene.features, pool, exclude_sample_id=exclude)
                record = {
                    "scene_id": sid,
                    "template_id": scene.template_id,
                    "features": [[float(x).hex() for x in row] for row in scene.features],
                    "captions": captions_per_scene[sid],
                    "retrieved": list(retrieved),
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    summary = {
        "spec": asdict(spec),
        "seed": seed,
        "vocab_size": len(vocab),
        "splits": {k: len(v) for k, v in split_ids.items()},
        "hash": dataset_hash(out_dir),
    }
    (out_dir / "dataset_manifest.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary


def dataset_hash(data_dir: str | Path) -> str:
    """sha256 over the split files and vocabulary, in a fixed order."""
    h = hashlib.sha256()
    for name in ["vocab.txt", "train.jsonl", "val.jsonl", "test.jsonl", "pool.idx"]:
        path = Path(data_dir) / name
        h.update(name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def load_split(data_dir: str | Path, name: str) -> list[Sample]:
    path = Path(data_dir) / f"{name}.jsonl"
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            feats = np.asarray(
                [[float.fromhex(x) for x in row] for row in rec["features"]]
            )
            samples.append(
                Sample(
                    scene_id=rec["scene_id"],
                    features=feats,
                    captions=[list(map(int, c)) for c in rec["captions"]],
                    retrieved=list(map(int, rec["retrieved"])),
                    template_id=rec.get("template_id", -1),
                )
            )
    if not samples:
        raise ValueError(f"{path}: empty split")
    return samples


def load_vocabulary(data_dir: str | Path, seq_len: int) -> Vocabulary:
    return Vocabulary.load(Path(data_dir) / "vocab.txt", seq_len)
