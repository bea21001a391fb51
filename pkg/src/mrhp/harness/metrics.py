"""Ranking metrics (MAP, NDCG@N) and paired bootstrap significance testing."""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np


def average_precision(ranked_labels: Sequence[int], tau: int = 3) -> float | None:
    """AP of one ranked list with relevance label >= tau; None when nothing is relevant."""
    hits, total = 0, 0.0
    for rank, label in enumerate(ranked_labels, start=1):
        if label >= tau:
            hits += 1
            total += hits / rank
    if hits == 0:
        return None
    return total / hits


def per_product_ap(rankings: Mapping[str, Sequence[str]], labels: Mapping[str, int],
                   tau: int = 3) -> dict[str, float]:
    out = {}
    for pid in sorted(rankings):
        ap = average_precision([labels[r] for r in rankings[pid]], tau)
        if ap is not None:
            out[pid] = ap
    return out


def map_metric(rankings: Mapping[str, Sequence[str]], labels: Mapping[str, int], tau: int = 3) -> float:
    """Mean AP over products that have at least one relevant review.

    ``rankings`` maps product id -> review ids in predicted order;
    ``labels`` maps review id -> integer label.
    """
    aps = per_product_ap(rankings, labels, tau)
    if not aps:
        raise ValueError(f"no product has a review with label >= {tau}")
    return float(np.mean([aps[k] for k in sorted(aps)]))


def dcg(gains: Sequence[float], n: int) -> float:
    return sum(g / math.log2(rank + 1) for rank, g in enumerate(gains[:n], start=1))


def gain(label: int, kind: str = "exp") -> float:
    if kind == "exp":
        return float(2 ** label - 1)
    if kind == "linear":
        return float(label)
    raise ValueError(f"unknown gain {kind!r}")


def ndcg_at_n(ranked_labels: Sequence[int], n: int, gain_kind: str = "exp") -> float:
    """DCG@n / IDCG@n with discount 1/log2(rank + 1); 0 when the ideal DCG is 0."""
    if n < 1:
        raise ValueError("N must be >= 1")
    gains = [gain(lab, gain_kind) for lab in ranked_labels]
    ideal = dcg(sorted(gains, reverse=True), n)
    if ideal == 0:
        return 0.0
    return dcg(gains, n) / ideal


def mean_ndcg(rankings: Mapping[str, Sequence[str]], labels: Mapping[str, int], n: int,
              gain_kind: str = "exp") -> float:
    vals = [ndcg_at_n([labels[r] for r in rankings[pid]], n, gain_kind) for pid in sorted(rankings)]
    return float(np.mean(vals)) if vals else 0.0


def paired_bootstrap(scores_a: Sequence[float], scores_b: Sequence[float],
                     n_resamples: int = 10000, seed: int = 0) -> float:
    """p-value for "system a is better than b" by resampling products with replacement.

    p is the fraction of resamples whose mean paired difference (a - b) is <= 0.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"paired scores differ in length: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("significance testing needs at least 2 products")
    diff = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diff.size, size=(n_resamples, diff.size))
    means = diff[idx].mean(axis=1)
    return float(np.mean(means <= 0.0))
