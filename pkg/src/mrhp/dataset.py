"""Records, on-disk formats, synthetic data and batching.

A dataset on disk is a JSON-lines manifest (one header line, then one
product per line) plus binary ROI feature files referenced by path
relative to the manifest.
"""
from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MRHPFEAT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<8sIII")

MIN_TOKENS = 3
MAX_LABEL = 4
MAX_ROI_ROWS = 32


class DatasetError(ValueError):
    """A record or file failed validation."""


@dataclass
class RoiFeatureMatrix:
    values: np.ndarray  # (m, dim) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DatasetError(f"ROI feature matrix needs m >= 1 rows, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DatasetError("ROI feature matrix has non-finite values")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        return isinstance(other, RoiFeatureMatrix) and np.array_equal(self.values, other.values)


@dataclass
class ReviewRecord:
    review_id: str
    tokens: list[int]
    image_features: list[RoiFeatureMatrix]
    label: int


@dataclass
class ProductRecord:
    product_id: str
    tokens: list[int]
    image_features: list[RoiFeatureMatrix]
    reviews: list[ReviewRecord]


@dataclass
class Dataset:
    vocab_size: int
    feature_dim: int
    products: list[ProductRecord]

    def __len__(self):
        return len(self.products)

    def __iter__(self):
        return iter(self.products)

    def samples(self) -> list[tuple[ProductRecord, ReviewRecord]]:
        return [(p, r) for p in self.products for r in p.reviews]

    def subset(self, products: Sequence[ProductRecord]) -> "Dataset":
        return Dataset(self.vocab_size, self.feature_dim, list(products))


@dataclass
class SyntheticSpec:
    n_products: int = 200
    reviews_per_product: int = 10
    vocab_size: int = 500
    l_p: int = 12
    l_r: int = 12
    m: int = 3
    dim: int = 2048
    signal_strength: float = 1.0
    label_distribution: list[float] = field(default_factory=lambda: [0.2] * 5)
    seed: int = 0
    topic_size: int = 20
    noise: float = 0.5

    def __post_init__(self):
        for name in ("n_products", "reviews_per_product", "vocab_size", "l_p", "l_r", "m", "dim",
                     "topic_size"):
            if getattr(self, name) < 1:
                raise DatasetError(f"SyntheticSpec.{name} must be positive")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise DatasetError("signal_strength must lie in [0, 1]")
        if self.reviews_per_product < 2:
            raise DatasetError("each product needs at least two reviews")
        if min(self.l_p, self.l_r) < MIN_TOKENS:
            raise DatasetError(f"text lengths must be at least {MIN_TOKENS}")
        if self.topic_size >= self.vocab_size:
            raise DatasetError("topic_size must be smaller than vocab_size")
        dist = np.asarray(self.label_distribution, dtype=float)
        if dist.shape != (MAX_LABEL + 1,) or (dist < 0).any() or dist.sum() <= 0:
            raise DatasetError("label_distribution needs 5 nonnegative weights")

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise DatasetError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)


# ---------------------------------------------------------------- validation


def validate(ds: Dataset) -> None:
    seen = set()
    for p in ds.products:
        where = f"product {p.product_id!r}"
        if p.product_id in seen:
            raise DatasetError(f"{where}: duplicate product_id")
        seen.add(p.product_id)
        _check_tokens(p.tokens, ds.vocab_size, where)
        _check_images(p.image_features, ds.feature_dim, where)
        if len(p.reviews) < 2:
            raise DatasetError(f"{where}: field 'reviews' needs at least 2 entries")
        rids = set()
        for r in p.reviews:
            rwhere = f"{where}, review {r.review_id!r}"
            if r.review_id in rids:
                raise DatasetError(f"{rwhere}: duplicate review_id")
            rids.add(r.review_id)
            if not isinstance(r.label, (int, np.integer)) or not 0 <= r.label <= MAX_LABEL:
                raise DatasetError(f"{rwhere}: field 'label' = {r.label!r} outside [0, {MAX_LABEL}]")
            _check_tokens(r.tokens, ds.vocab_size, rwhere)
            _check_images(r.image_features, ds.feature_dim, rwhere)


def _check_tokens(tokens, vocab_size, where):
    if len(tokens) < MIN_TOKENS:
        raise DatasetError(f"{where}: field 'tokens' has {len(tokens)} ids, need >= {MIN_TOKENS}")
    for t in tokens:
        if not isinstance(t, (int, np.integer)) or not 0 <= t < vocab_size:
            raise DatasetError(f"{where}: field 'tokens' has id {t!r} outside [0, {vocab_size})")


def _check_images(images, dim, where):
    for k, img in enumerate(images):
        if img.dim != dim:
            raise DatasetError(f"{where}: image {k} has dim {img.dim}, dataset declares {dim}")


# ---------------------------------------------------------------- feature files


def write_roi_features(path, feats: RoiFeatureMatrix) -> None:
    vals = feats.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feats.m, feats.dim))
        fh.write(vals.tobytes(order="C"))


def load_roi_features(path, expected_dim: int | None = None) -> RoiFeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, m, dim = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    if m < 1:
        raise DatasetError(f"{path}: declares m={m}, need at least one object")
    if expected_dim is not None and dim != expected_dim:
        raise DatasetError(f"{path}: dim {dim} disagrees with manifest feature_dim {expected_dim}")
    payload = raw[_FEATURE_HEADER.size:]
    if len(payload) != 4 * m * dim:
        raise DatasetError(f"{path}: payload has {len(payload)} bytes, expected {4 * m * dim}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(m, dim)
    if not np.isfinite(values).all():
        raise DatasetError(f"{path}: non-finite feature values")
    return RoiFeatureMatrix(values)


# ---------------------------------------------------------------- manifest


def write_dataset(path, ds: Dataset) -> None:
    """Write manifest plus a ``<stem>_features/`` directory of feature files."""
    path = Path(path)
    feat_dir = path.parent / f"{path.stem}_features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    def dump(images, stem):
        rels = []
        for k, img in enumerate(images):
            rel = f"{feat_dir.name}/{stem}_img{k}.bin"
            write_roi_features(path.parent / rel, img)
            rels.append(rel)
        return rels

    lines = [json.dumps({"vocab_size": ds.vocab_size, "feature_dim": ds.feature_dim})]
    for i, p in enumerate(ds.products):
        rec = {
            "product_id": p.product_id,
            "tokens": [int(t) for t in p.tokens],
            "images": dump(p.image_features, f"p{i:05d}"),
            "reviews": [
                {"review_id": r.review_id, "tokens": [int(t) for t in r.tokens],
                 "images": dump(r.image_features, f"p{i:05d}_r{j:03d}"), "label": int(r.label)}
                for j, r in enumerate(p.reviews)
            ],
        }
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    base = path.parent
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        vocab_size, feature_dim = int(header["vocab_size"]), int(header["feature_dim"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: line 1: bad header ({exc})") from exc

    def images(paths, where):
        out = []
        for rel in paths:
            fp = base / rel
            if not fp.exists():
                raise DatasetError(f"{where}: missing feature file {rel}")
            try:
                out.append(load_roi_features(fp, feature_dim))
            except DatasetError as exc:
                raise DatasetError(f"{where}: {exc}") from exc
        return out

    products = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            pid = str(rec["product_id"])
            where = f"line {lineno}, product {pid!r}"
            reviews = []
            for rv in rec["reviews"]:
                rwhere = f"{where}, review {rv['review_id']!r}"
                label = rv["label"]
                if not isinstance(label, int) or not 0 <= label <= MAX_LABEL:
                    raise DatasetError(f"{rwhere}: field 'label' = {label!r} outside [0, {MAX_LABEL}]")
                reviews.append(ReviewRecord(str(rv["review_id"]), list(rv["tokens"]),
                                            images(rv.get("images", []), rwhere), label))
            products.append(ProductRecord(pid, list(rec["tokens"]),
                                          images(rec.get("images", []), where), reviews))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed record ({exc})") from exc
    ds = Dataset(vocab_size, feature_dim, products)
    validate(ds)
    return ds


# ---------------------------------------------------------------- raw text


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(texts: Sequence[str], min_freq: int = 2) -> dict[str, int]:
    """Word -> id; id 0 is the unknown token."""
    counts = Counter(w for t in texts for w in tokenize(t))
    words = sorted(w for w, c in counts.items() if c >= min_freq)
    vocab = {"<unk>": 0}
    vocab.update({w: i + 1 for i, w in enumerate(words)})
    return vocab


def encode_text(text: str, vocab: dict[str, int]) -> list[int]:
    return [vocab.get(w, 0) for w in tokenize(text)]


# ---------------------------------------------------------------- synthetic


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Planted-signal data: review label controls overlap with the product topic.

    Each product owns a topic (a token subset and a unit feature direction).
    Every review token comes from the topic with probability
    ``signal * label / 4`` and is otherwise uniform over the vocabulary;
    review ROI rows carry ``signal * label / 4`` along the product direction.
    """
    rng = np.random.default_rng(spec.seed)
    probs = np.asarray(spec.label_distribution, dtype=float)
    probs = probs / probs.sum()
    products = []
    for i in range(spec.n_products):
        topic = rng.choice(np.arange(1, spec.vocab_size), size=spec.topic_size, replace=False)
        direction = rng.standard_normal(spec.dim)
        direction /= np.linalg.norm(direction)
        p_tokens = rng.choice(topic, size=spec.l_p).tolist()
        p_img = _roi(rng, direction, 1.0, spec)
        reviews = []
        labels = rng.choice(MAX_LABEL + 1, size=spec.reviews_per_product, p=probs)
        for j, label in enumerate(labels):
            frac = spec.signal_strength * label / MAX_LABEL
            from_topic = rng.random(spec.l_r) < frac
            toks = np.where(from_topic, rng.choice(topic, size=spec.l_r),
                            rng.integers(1, spec.vocab_size, size=spec.l_r))
            img = _roi(rng, direction, frac, spec)
            reviews.append(ReviewRecord(f"p{i:05d}-r{j:03d}", toks.tolist(), [img], int(label)))
        products.append(ProductRecord(f"p{i:05d}", p_tokens, [p_img], reviews))
    ds = Dataset(spec.vocab_size, spec.dim, products)
    validate(ds)
    return ds


def _roi(rng, direction, along, spec) -> RoiFeatureMatrix:
    noise = rng.standard_normal((spec.m, spec.dim)) * (spec.noise / np.sqrt(spec.dim))
    vals = along * direction[None, :] + noise
    # stored as float32 on disk; round now so memory and disk agree exactly
    return RoiFeatureMatrix(vals.astype(np.float32).astype(np.float64))


def topic_overlap(product: ProductRecord, review: ReviewRecord) -> float:
    """Fraction of review tokens that occur in the product text."""
    vocab = set(product.tokens)
    return sum(t in vocab for t in review.tokens) / len(review.tokens)


# ---------------------------------------------------------------- pairs and batches


def make_ranking_pairs(product: ProductRecord, rng: np.random.Generator,
                       max_pairs: int = 5) -> list[tuple[ReviewRecord, ReviewRecord]]:
    """Sample up to ``max_pairs`` distinct (more helpful, less helpful) review pairs."""
    valid = [(a, b) for a in product.reviews for b in product.reviews if a.label > b.label]
    if not valid:
        log.debug("product %s has no strictly ordered review pair; skipped", product.product_id)
        return []
    k = min(max_pairs, len(valid))
    picks = rng.choice(len(valid), size=k, replace=False)
    return [valid[i] for i in sorted(picks)]


def batch_iter(samples: Sequence, batch_size: int, seed: int, epoch: int = 0,
               group_key=None) -> Iterator[list]:
    """Shuffle ``samples`` deterministically per (seed, epoch) and yield batches.

    The short final batch is kept.  With ``group_key``, samples sharing a key
    stay contiguous (groups shuffled, then members shuffled within a group),
    so a batch holds whole products and ranking pairs can be formed in-batch.
    """
    if batch_size < 2:
        raise ValueError(f"batch size must be >= 2 for in-batch negatives, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    if group_key is None:
        order = rng.permutation(len(samples))
    else:
        groups: dict = {}
        for i, s in enumerate(samples):
            groups.setdefault(group_key(s), []).append(i)
        keys = list(groups)
        order = []
        for gi in rng.permutation(len(keys)):
            members = groups[keys[gi]]
            order.extend(members[j] for j in rng.permutation(len(members)))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def roi_input(images: Sequence[RoiFeatureMatrix], dim: int) -> np.ndarray:
    """Stack a record's images into one (m, dim) matrix; no images -> one zero row."""
    if not images:
        return np.zeros((1, dim))
    return np.concatenate([img.values for img in images], axis=0)[:MAX_ROI_ROWS]


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
