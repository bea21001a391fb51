"""Finite-difference checks for every differentiable op and for the full training loss."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .dataset import ProductRecord, ReviewRecord, RoiFeatureMatrix
from .model import MRHPModel
from .objectives import ContrastiveConfig, RankingConfig, adaptive_contrastive, ranking_loss, select, total_loss

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _p(rng, *shape, away_from_zero: float = 0.0) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-12) * away_from_zero, x)
    return Tensor(x, requires_grad=True)


def _spread(rng, *shape) -> Tensor:
    """Values with pairwise gaps >= 0.1 so max-pool never sits on a tie."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)
    return Tensor(vals - vals.mean(), requires_grad=True)


def _weighted(rng, out_fn):
    """Scalarize an op output with fixed random weights so every output entry matters."""
    cache = {}

    def f():
        out = out_fn()
        if "w" not in cache:
            cache["w"] = Tensor(rng.standard_normal(out.shape))
        return ad.sum_(out * cache["w"])

    return f


def _case(build):
    def make(rng):
        params, out_fn = build(rng)
        return _weighted(rng, out_fn), params
    return make


OP_CASES: dict[str, Case] = {
    "add": _case(lambda r: ((a := _p(r, 2, 3, 4), b := _p(r, 4)), lambda: ad.add(a, b))),
    "sub": _case(lambda r: ((a := _p(r, 3, 4), b := _p(r, 3, 4)), lambda: ad.sub(a, b))),
    "mul": _case(lambda r: ((a := _p(r, 2, 3, 4), b := _p(r, 3, 1)), lambda: ad.mul(a, b))),
    "sigmoid": _case(lambda r: ((a := _p(r, 3, 4)),) and ([a], lambda: ad.sigmoid(a))),
    "tanh": _case(lambda r: ((a := _p(r, 3, 4)),) and ([a], lambda: ad.tanh(a))),
    "relu": _case(lambda r: ((a := _p(r, 3, 4, away_from_zero=1e-3)),) and ([a], lambda: ad.relu(a))),
    "gelu": _case(lambda r: ((a := _p(r, 3, 4)),) and ([a], lambda: ad.gelu(a))),
    "square": _case(lambda r: ((a := _p(r, 3, 4)),) and ([a], lambda: ad.square(a))),
    "matmul": _case(lambda r: ((a := _p(r, 3, 4), b := _p(r, 4, 2)), lambda: ad.matmul(a, b))),
    "matmul_batched": _case(lambda r: ((a := _p(r, 2, 3, 4), b := _p(r, 4, 5)), lambda: ad.matmul(a, b))),
    "matmul_bmm": _case(lambda r: ((a := _p(r, 2, 3, 4), b := _p(r, 2, 4, 5)), lambda: ad.matmul(a, b))),
    "swap_last": _case(lambda r: ((a := _p(r, 2, 3, 4)),) and ([a], lambda: ad.swap_last(a))),
    "transpose": _case(lambda r: ((a := _p(r, 2, 3, 4)),) and ([a], lambda: ad.transpose(a, (1, 0, 2)))),
    "reshape": _case(lambda r: ((a := _p(r, 2, 6)),) and ([a], lambda: ad.reshape(a, (3, 4)))),
    "getitem": _case(lambda r: ((a := _p(r, 4, 5)),) and ([a], lambda: ad.getitem(a, (slice(1, 3), np.array([0, 2, 2]))))),
    "concat": _case(lambda r: ((a := _p(r, 2, 3), b := _p(r, 4, 3)), lambda: ad.concat([a, b], axis=0))),
    "stack": _case(lambda r: ((a := _p(r, 3), b := _p(r, 3)), lambda: ad.stack([a, b], axis=0))),
    "sum": _case(lambda r: ((a := _p(r, 3, 4)),) and ([a], lambda: ad.sum_(a, axis=1))),
    "mean": _case(lambda r: ((a := _p(r, 3, 4)),) and ([a], lambda: ad.mean(a, axis=0))),
    "pool_max": _case(lambda r: ((a := _spread(r, 2, 5, 3)),) and ([a], lambda: ad.pool(a, "max", axis=-2))),
    "pool_mean": _case(lambda r: ((a := _p(r, 2, 5, 3)),) and ([a], lambda: ad.pool(a, "mean", axis=-2))),
    "softmax": _case(lambda r: ((a := _p(r, 3, 4)),) and ([a], lambda: ad.softmax(a, axis=-1))),
    "layer_norm": _case(lambda r: ((a := _p(r, 2, 3, 5), g := _p(r, 5), b := _p(r, 5)),
                                   lambda: ad.layer_norm(a, g, b))),
    "conv1d": _case(lambda r: ((a := _p(r, 2, 6, 3), k := _p(r, 3, 3, 4), b := _p(r, 4)),
                               lambda: ad.conv1d(a, k, b))),
    "embedding": _case(lambda r: ((t := _p(r, 6, 4)),) and ([t], lambda: ad.embedding(t, [0, 3, 3, 5]))),
    "cosine_matrix": _case(lambda r: ((a := _p(r, 3, 4), b := _p(r, 2, 4)), lambda: ad.cosine_matrix(a, b))),
}


def check_op(name: str, n_points: int = 100, seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative FD error of op ``name`` over ``n_points`` random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        f, params = OP_CASES[name](rng)
        worst = max(worst, ad.grad_check(f, params, h))
    return worst


def run_op_suite(n_points: int = 100, seed: int = 0) -> dict[str, float]:
    return {name: check_op(name, n_points, seed) for name in OP_CASES}


# ---------------------------------------------------------------- end to end

TINY = dict(d=8, d_emb=5, depth=2, heads=4, batch_size=3, conv_width=3)


def tiny_batch(rng: np.random.Generator, vocab: int = 12, dim: int = 6):
    """Three reviews of one product with labels 4, 3, 3: two ranking pairs, all three helpful."""
    def roi(m):
        return [RoiFeatureMatrix(rng.standard_normal((m, dim)))]

    product = ProductRecord("p0", rng.integers(0, vocab, 5).tolist(), roi(2), [])
    product.reviews = [ReviewRecord(f"r{i}", rng.integers(0, vocab, 6).tolist(), roi(3), lab)
                       for i, lab in enumerate([4, 3, 3])]
    return [(product, r) for r in product.reviews]


def end_to_end_case(seed: int = 0, **overrides):
    """(loss closure, model) for the joint objective on the tiny batch."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(**{**TINY, "seed": seed, **overrides})
    model = MRHPModel(cfg, vocab_size=12, feature_dim=6)
    batch = tiny_batch(rng)
    ccfg = ContrastiveConfig(cfg.o_p, cfg.o_n, cfg.tau)
    rcfg = RankingConfig(cfg.margin)
    plus, minus = np.array([0, 0]), np.array([1, 2])

    def loss():
        res = model.forward(batch)
        rank = ranking_loss((res.scores[plus], res.scores[minus]), rcfg)
        con = adaptive_contrastive(select(res.pooled, [0, 1, 2]), ccfg)
        return total_loss(rank, con)

    return loss, model


def end_to_end_check(seed: int = 0, h: float = 1e-5) -> float:
    loss, model = end_to_end_case(seed)
    return ad.grad_check(loss, model.parameters(), h)
