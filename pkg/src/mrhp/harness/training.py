"""Joint ranking + contrastive training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamState, Tape, Tensor
from ..config import TrainConfig
from ..dataset import Dataset, ProductRecord, batch_iter, make_ranking_pairs
from ..model import MRHPModel, Sample
from ..objectives import (ContrastiveConfig, LossReport, RankingConfig, adaptive_contrastive,
                          contrastive_ce, ranking_loss, select, total_loss)
from .checkpoint import Checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochReport:
    epoch: int
    ranking: float
    contrastive: float
    total: float
    n_batches: int
    n_pairs: int


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: MRHPModel
    history: list[EpochReport] = field(default_factory=list)

    def history_dicts(self) -> list[dict]:
        return [asdict(e) for e in self.history]


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic product-level train/test split."""
    order = np.random.default_rng([seed, 7]).permutation(len(ds.products))
    n_test = int(round(test_fraction * len(order)))
    test_idx = set(order[:n_test].tolist())
    train = [p for i, p in enumerate(ds.products) if i not in test_idx]
    test = [p for i, p in enumerate(ds.products) if i in test_idx]
    return ds.subset(train), ds.subset(test)


def in_batch_pairs(batch: Sequence[Sample], rng: np.random.Generator,
                   max_pairs: int) -> list[tuple[int, int]]:
    """Ranking pairs (row of r+, row of r-) among the batch reviews of each product."""
    rows_of: dict[str, list[int]] = {}
    for i, (p, _) in enumerate(batch):
        rows_of.setdefault(p.product_id, []).append(i)
    pairs = []
    for pid, rows in rows_of.items():
        if len(rows) < 2:
            continue
        product = batch[rows[0]][0]
        view = ProductRecord(pid, product.tokens, product.image_features, [batch[i][1] for i in rows])
        row_of_review = {id(batch[i][1]): i for i in rows}
        for plus, minus in make_ranking_pairs(view, rng, max_pairs):
            pairs.append((row_of_review[id(plus)], row_of_review[id(minus)]))
    return pairs


def negative_mask(batch: Sequence[Sample], rows: Sequence[int], cfg: TrainConfig) -> np.ndarray | None:
    """Contrastive negatives among ``rows``; drops pairs that share a product unless configured not to.

    Batches are product-grouped, so without the mask most negatives would be two
    reviews of the same product, and the loss would push a product away from
    its own on-topic reviews.
    """
    if cfg.same_product_negatives:
        return None
    pids = np.array([batch[i][0].product_id for i in rows])
    return pids[:, None] != pids[None, :]


def train_step(model: MRHPModel, batch: Sequence[Sample], state: AdamState,
               rng: np.random.Generator) -> LossReport:
    cfg = model.cfg
    ccfg = ContrastiveConfig(cfg.o_p, cfg.o_n, cfg.tau)
    rcfg = RankingConfig(cfg.margin)
    pairs = in_batch_pairs(batch, rng, cfg.pairs_per_product)
    helpful = [i for i, (_, r) in enumerate(batch) if r.label >= cfg.tau]
    params = model.parameters()
    with Tape() as tape:
        res = model.forward(batch)
        if pairs:
            plus = np.array([a for a, _ in pairs])
            minus = np.array([b for _, b in pairs])
            rank = ranking_loss((res.scores[plus], res.scores[minus]), rcfg)
        else:
            rank = Tensor(0.0)
        con_active = cfg.contrastive != "none" and len(helpful) > 0
        if con_active:
            fn = adaptive_contrastive if cfg.contrastive == "adaptive" else contrastive_ce
            con = fn(select(res.pooled, helpful), ccfg, negative_mask(batch, helpful, cfg))
        else:
            con = Tensor(0.0)
        total = total_loss(rank, con)
    for p in params:
        p.grad = None
    ad.backward(total, tape, params)
    ad.adam_step(params, [p.grad for p in params], state)
    return LossReport(ranking=rank.item(), contrastive=con.item(), total=total.item(),
                      ranking_active=bool(pairs), contrastive_active=con_active,
                      n_pairs=len(pairs), n_helpful=len(helpful))


def train(cfg: TrainConfig, train_ds: Dataset, model: MRHPModel | None = None,
          on_epoch: Callable[[EpochReport, MRHPModel], None] | None = None) -> TrainResult:
    """Train from the config's seed; deterministic given (cfg, data). ``on_epoch`` must not mutate the model."""
    if model is None:
        model = MRHPModel(cfg, train_ds.vocab_size, train_ds.feature_dim)
    state = AdamState(lr=cfg.lr)
    samples = train_ds.samples()
    pair_rng = np.random.default_rng([cfg.seed, 1])
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        reports = []
        batches = batch_iter(samples, cfg.batch_size, cfg.seed, epoch, group_key=lambda s: s[0].product_id)
        for bi, batch in enumerate(batches):
            try:
                rep = train_step(model, batch, state, pair_rng)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {bi}: {exc}") from exc
            if not np.isfinite(rep.total):
                raise TrainingDiverged(f"epoch {epoch}, batch {bi}: non-finite loss")
            reports.append(rep)
            step += 1
        er = EpochReport(
            epoch=epoch + 1,
            ranking=float(np.mean([r.ranking for r in reports])) if reports else 0.0,
            contrastive=float(np.mean([r.contrastive for r in reports])) if reports else 0.0,
            total=float(np.mean([r.total for r in reports])) if reports else 0.0,
            n_batches=len(reports),
            n_pairs=int(sum(r.n_pairs for r in reports)),
        )
        log.info("epoch %d: ranking %.4f contrastive %.4f total %.4f", er.epoch, er.ranking,
                 er.contrastive, er.total)
        history.append(er)
        if on_epoch is not None:
            on_epoch(er, model)
    return TrainResult(Checkpoint.from_model(model, step), model, history)
