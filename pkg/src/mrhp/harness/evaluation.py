"""Scoring, ranking evaluation, baselines and the token-distance analysis."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..dataset import Dataset, DatasetError, ProductRecord
from ..model import MRHPModel
from .checkpoint import Checkpoint
from .metrics import average_precision, map_metric, mean_ndcg, ndcg_at_n

log = logging.getLogger(__name__)

EVAL_CHUNK = 64

RELATIONS = {
    "intra-modal": (("h_p", "h_r"), ("v_p", "v_r")),
    "inter-modal": (("h_p", "v_r"), ("v_p", "h_r")),
    "intra-review": (("h_p", "v_p"), ("h_r", "v_r")),
}


@dataclass
class EvalReport:
    MAP: float
    NDCG_3: float
    NDCG_5: float
    tau: int
    gain: str
    n_products: int
    n_map_products: int
    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    per_product: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["NDCG@3"] = d.pop("NDCG_3")
        d["NDCG@5"] = d.pop("NDCG_5")
        d["rankings"] = {k: [[rid, s] for rid, s in v] for k, v in self.rankings.items()}
        return d


def _as_model(model) -> MRHPModel:
    return model.to_model() if isinstance(model, Checkpoint) else model


def check_compatible(model: MRHPModel, ds: Dataset) -> None:
    if ds.vocab_size != model.vocab_size:
        raise DatasetError(f"vocabulary mismatch: data has {ds.vocab_size} ids, checkpoint {model.vocab_size}")
    if ds.feature_dim != model.feature_dim:
        raise DatasetError(f"feature width mismatch: data {ds.feature_dim}, checkpoint {model.feature_dim}")


def sort_scores(pairs: Sequence[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending by score, ties broken by review id."""
    return sorted(pairs, key=lambda x: (-x[1], x[0]))


def predict_scores(model, product: ProductRecord) -> list[tuple[str, float]]:
    model = _as_model(model)
    scores = model.score_samples([(product, r) for r in product.reviews])
    return sort_scores([(r.review_id, float(s)) for r, s in zip(product.reviews, scores)])


def score_dataset(model, ds: Dataset) -> dict[str, list[tuple[str, float]]]:
    """Ranked (review_id, score) lists for every product, scored in chunks."""
    model = _as_model(model)
    check_compatible(model, ds)
    samples = ds.samples()
    scores = np.empty(len(samples))
    for start in range(0, len(samples), EVAL_CHUNK):
        chunk = samples[start:start + EVAL_CHUNK]
        scores[start:start + len(chunk)] = model.score_samples(chunk)
    out: dict[str, list] = {}
    for (p, r), s in zip(samples, scores):
        out.setdefault(p.product_id, []).append((r.review_id, float(s)))
    return {pid: sort_scores(v) for pid, v in out.items()}


def random_scores(ds: Dataset, seed: int) -> dict[str, list[tuple[str, float]]]:
    rng = np.random.default_rng(seed)
    return {p.product_id: sort_scores([(r.review_id, float(rng.random())) for r in p.reviews])
            for p in ds.products}


def label_map(ds: Dataset) -> dict[str, int]:
    return {r.review_id: r.label for p in ds.products for r in p.reviews}


def report_from_scores(scored: Mapping[str, list[tuple[str, float]]], ds: Dataset, tau: int = 3,
                       gain: str = "exp") -> EvalReport:
    labels = label_map(ds)
    rankings = {pid: [rid for rid, _ in v] for pid, v in scored.items()}
    per_product = {}
    for pid in sorted(rankings):
        ranked = [labels[r] for r in rankings[pid]]
        entry = {"NDCG@3": ndcg_at_n(ranked, 3, gain), "NDCG@5": ndcg_at_n(ranked, 5, gain)}
        ap = average_precision(ranked, tau)
        if ap is not None:
            entry["AP"] = ap
        per_product[pid] = entry
    return EvalReport(
        MAP=map_metric(rankings, labels, tau),
        NDCG_3=mean_ndcg(rankings, labels, 3, gain),
        NDCG_5=mean_ndcg(rankings, labels, 5, gain),
        tau=tau, gain=gain, n_products=len(rankings),
        n_map_products=sum("AP" in v for v in per_product.values()),
        rankings={pid: list(scored[pid]) for pid in sorted(scored)},
        per_product=per_product,
    )


def evaluate(model, ds: Dataset, tau: int = 3, gain: str = "exp") -> EvalReport:
    return report_from_scores(score_dataset(model, ds), ds, tau, gain)


def per_product_metric(report: EvalReport, metric: str) -> dict[str, float]:
    return {pid: v[metric] for pid, v in report.per_product.items() if metric in v}


# ---------------------------------------------------------------- distances


def token_distances(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean cosine similarity and mean Euclidean distance over all (row of x, row of y) pairs."""
    nx = np.linalg.norm(x, axis=-1, keepdims=True)
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    cos = (x / np.maximum(nx, 1e-300)) @ (y / np.maximum(ny, 1e-300)).T
    sq = (x * x).sum(-1)[:, None] + (y * y).sum(-1)[None, :] - 2.0 * x @ y.T
    l2 = np.sqrt(np.maximum(sq, 0.0))
    return float(np.clip(cos, -1.0, 1.0).mean()), float(l2.mean())


def distance_analysis(model, ds: Dataset, label_groups: Mapping[str, Sequence[int]] | None = None
                      ) -> dict[str, dict[str, dict[str, float]]]:
    """Mean +- std over samples of token-level CS and L2, per label group and relation."""
    model = _as_model(model)
    if label_groups is None:
        label_groups = {"1": [1], "4": [4]}
    check_compatible(model, ds)
    per_sample: dict[str, list[dict[str, tuple[float, float]]]] = {g: [] for g in label_groups}
    samples = ds.samples()
    for start in range(0, len(samples), EVAL_CHUNK):
        chunk = samples[start:start + EVAL_CHUNK]
        res = model.forward(chunk)
        for rows, bundle in res.bundles:
            mats = {k: getattr(bundle, k).data for k in ("h_p", "h_r", "v_p", "v_r")}
            for j, row in enumerate(rows):
                label = chunk[row][1].label
                vals = {}
                for rel, pairings in RELATIONS.items():
                    ds_ = [token_distances(mats[a][j], mats[b][j]) for a, b in pairings]
                    vals[rel] = (float(np.mean([c for c, _ in ds_])), float(np.mean([e for _, e in ds_])))
                for g, labs in label_groups.items():
                    if label in labs:
                        per_sample[g].append(vals)
    report = {}
    for g, rows in per_sample.items():
        if not rows:
            log.warning("label group %s has no samples; omitted", g)
            continue
        report[g] = {}
        for rel in RELATIONS:
            cs = np.array([r[rel][0] for r in rows])
            l2 = np.array([r[rel][1] for r in rows])
            report[g][rel] = {"CS_mean": float(cs.mean()), "CS_std": float(cs.std()),
                              "L2_mean": float(l2.mean()), "L2_std": float(l2.std()), "n": len(rows)}
    return report
