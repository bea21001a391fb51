"""Cross-modal contrastive losses (plain and adaptive), the hyperspherical rewrite, and ranking loss."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import ModalFeatureBundle

MODALITIES = ("h_p", "h_r", "v_p", "v_r")
ALL_PAIRS = tuple(itertools.combinations(MODALITIES, 2))


@dataclass
class PooledFeatures:
    """Max-pooled modality vectors; each field is (d,) for one sample or (B, d) for a batch."""

    h_p: Tensor
    h_r: Tensor
    v_p: Tensor
    v_r: Tensor


@dataclass
class ContrastiveConfig:
    o_p: float = 2.0
    o_n: float = 0.0
    helpful_threshold: int = 3
    pair_set: tuple[tuple[str, str], ...] = ALL_PAIRS

    def __post_init__(self):
        if not self.o_p > self.o_n:
            raise ValueError(f"need o_p > o_n, got {self.o_p}, {self.o_n}")
        if not 0 <= self.helpful_threshold <= 4:
            raise ValueError("helpful_threshold must lie in [0, 4]")
        self.pair_set = tuple(tuple(p) for p in self.pair_set)


@dataclass
class RankingConfig:
    margin: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("ranking margin must be nonnegative")


@dataclass
class LossReport:
    ranking: float = 0.0
    contrastive: float = 0.0
    total: float = 0.0
    ranking_active: bool = False
    contrastive_active: bool = False
    n_pairs: int = 0
    n_helpful: int = 0
    extra: dict = field(default_factory=dict)


def pool_features(bundle: ModalFeatureBundle) -> PooledFeatures:
    return PooledFeatures(*(ad.pool(getattr(bundle, k), "max", axis=-2) for k in MODALITIES))


def stack_pooled(batch) -> PooledFeatures:
    """Turn a list of single-sample PooledFeatures into one batched PooledFeatures."""
    if isinstance(batch, PooledFeatures):
        if batch.h_p.ndim == 1:
            return PooledFeatures(*(ad.reshape(getattr(batch, k), (1, -1)) for k in MODALITIES))
        return batch
    return PooledFeatures(*(ad.stack([getattr(p, k) for p in batch], axis=0) for k in MODALITIES))


def select(pooled: PooledFeatures, rows: Sequence[int]) -> PooledFeatures:
    idx = np.asarray(rows, dtype=np.int64)
    return PooledFeatures(*(ad.getitem(getattr(pooled, k), idx) for k in MODALITIES))


def similarity_matrices(batch, cfg: ContrastiveConfig) -> list[Tensor]:
    """For each modality pair (t1, t2): the B x B matrix sim(t1_j, t2_k).

    Diagonal entries are positive pairs (same sample); off-diagonal entries are negatives.
    """
    pooled = stack_pooled(batch)
    return [ad.cosine_matrix(getattr(pooled, a), getattr(pooled, b)) for a, b in cfg.pair_set]


def _split(sim: Tensor, negative_mask=None):
    """Positive diagonal and the 0/1 weight of each negative entry.

    ``negative_mask`` (B x B bool) restricts which off-diagonal (j, k) count as
    negatives; the diagonal is never a negative.
    """
    n = sim.shape[0]
    diag = np.arange(n)
    off = 1.0 - np.eye(n)
    if negative_mask is not None:
        mask = np.asarray(negative_mask, dtype=bool)
        if mask.shape != (n, n):
            raise ValueError(f"negative_mask shape {mask.shape} does not match batch size {n}")
        off = off * mask
    return sim[diag, diag], Tensor(off)


def plain_from_sims(sims: Sequence[Tensor], negative_mask=None) -> Tensor:
    total = Tensor(0.0)
    for s in sims:
        pos, off = _split(s, negative_mask)
        total = total - ad.sum_(pos) + ad.sum_(s * off)
    return total


def adaptive_from_sims(sims: Sequence[Tensor], cfg: ContrastiveConfig, negative_mask=None) -> Tensor:
    """-sum eps_p * sim_pos + sum eps_n * sim_neg, with eps kept inside the graph."""
    total = Tensor(0.0)
    for s in sims:
        pos, off = _split(s, negative_mask)
        eps_p = ad.relu(cfg.o_p - pos)
        eps_n = ad.relu(s - cfg.o_n)
        total = total - ad.sum_(eps_p * pos) + ad.sum_(eps_n * s * off)
    return total


def hyperspherical_from_sims(sims: Sequence[Tensor], cfg: ContrastiveConfig, negative_mask=None) -> Tensor:
    """Sum of squared deviations from o_p/2 (positives) and o_n/2 (negatives), minus one
    constant per summand: (o_p/2)^2 per positive term and (o_n/2)^2 per negative term."""
    cp, cn = cfg.o_p / 2.0, cfg.o_n / 2.0
    total = Tensor(0.0)
    for s in sims:
        n = s.shape[0]
        pos, off = _split(s, negative_mask)
        total = total + ad.sum_(ad.square(pos - cp)) + ad.sum_(ad.square(s - cn) * off)
        total = total - (n * cp * cp + float(off.data.sum()) * cn * cn)
    return total


def contrastive_ce(batch, cfg: ContrastiveConfig, negative_mask=None) -> Tensor:
    if _empty(batch):
        return Tensor(0.0)
    return plain_from_sims(similarity_matrices(batch, cfg), negative_mask)


def adaptive_contrastive(batch, cfg: ContrastiveConfig, negative_mask=None) -> Tensor:
    if _empty(batch):
        return Tensor(0.0)
    return adaptive_from_sims(similarity_matrices(batch, cfg), cfg, negative_mask)


def hyperspherical_form(batch, cfg: ContrastiveConfig, negative_mask=None) -> Tensor:
    if _empty(batch):
        return Tensor(0.0)
    return hyperspherical_from_sims(similarity_matrices(batch, cfg), cfg, negative_mask)


def _empty(batch) -> bool:
    return not isinstance(batch, PooledFeatures) and len(batch) == 0


def ranking_loss(score_pairs, cfg: RankingConfig) -> Tensor:
    """sum max(0, margin - s_plus + s_minus).

    ``score_pairs`` is a list of (s_plus, s_minus) scalars/tensors, or a
    tuple of two equal-length score vectors.  An empty list gives 0.
    """
    if isinstance(score_pairs, tuple) and len(score_pairs) == 2 and isinstance(score_pairs[0], Tensor) \
            and score_pairs[0].ndim == 1:
        s_plus, s_minus = score_pairs
    else:
        if len(score_pairs) == 0:
            return Tensor(0.0)
        s_plus = ad.stack([ad._lift(a) for a, _ in score_pairs])
        s_minus = ad.stack([ad._lift(b) for _, b in score_pairs])
    if s_plus.shape[0] == 0:
        return Tensor(0.0)
    return ad.sum_(ad.relu(cfg.margin - s_plus + s_minus))


def total_loss(ranking: Tensor, adaptive: Tensor) -> Tensor:
    return ad.add(ranking, adaptive)
