"""The full scoring model: encoders -> cross-modal interaction -> fusion -> score."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .dataset import ProductRecord, ReviewRecord, roi_input
from .encoders import (EmbeddingTable, ImageEncoderParams, LstmParams, embed, encode_image,
                       lstm_encode, named_tensors)
from .fusion import CmStackParams, FusionParams, ModalFeatureBundle, interact_all, score
from .objectives import MODALITIES, PooledFeatures, pool_features

Sample = tuple[ProductRecord, ReviewRecord]


@dataclass
class ModelParams:
    embedding: EmbeddingTable
    lstm_p: LstmParams
    lstm_r: LstmParams
    image_p: ImageEncoderParams
    image_r: ImageEncoderParams
    stacks: CmStackParams
    fusion: FusionParams


@dataclass
class ForwardResult:
    scores: Tensor  # (n,)
    pooled: PooledFeatures  # fields (n, d)
    bundles: list[tuple[list[int], ModalFeatureBundle]]  # per shape group: sample rows, batched bundle


class MRHPModel:
    def __init__(self, cfg: TrainConfig, vocab_size: int, feature_dim: int):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.params = ModelParams(
            embedding=EmbeddingTable.init(rng, vocab_size, cfg.d_emb),
            lstm_p=LstmParams.init(rng, cfg.d_emb, d),
            lstm_r=LstmParams.init(rng, cfg.d_emb, d),
            image_p=ImageEncoderParams.init(rng, feature_dim, d, cfg.heads, cfg.attn_residual),
            image_r=ImageEncoderParams.init(rng, feature_dim, d, cfg.heads, cfg.attn_residual),
            stacks=CmStackParams.init(rng, d, cfg.depth),
            fusion=FusionParams.init(rng, d, cfg.heads, cfg.conv_width, cfg.attn_residual),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return named_tensors(self.params)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    # ------------------------------------------------------------ forward

    def encode(self, prod_tokens, rev_tokens, prod_feats, rev_feats):
        p = self.params
        k_p = lstm_encode(embed(prod_tokens, p.embedding), p.lstm_p)
        k_r = lstm_encode(embed(rev_tokens, p.embedding), p.lstm_r)
        a_p = encode_image(prod_feats, p.image_p)
        a_r = encode_image(rev_feats, p.image_r)
        return k_p, k_r, a_p, a_r

    def bundle(self, prod_tokens, rev_tokens, prod_feats, rev_feats) -> ModalFeatureBundle:
        return interact_all(*self.encode(prod_tokens, rev_tokens, prod_feats, rev_feats),
                            self.params.stacks)

    def score_arrays(self, prod_tokens, rev_tokens, prod_feats, rev_feats) -> Tensor:
        return score(self.bundle(prod_tokens, rev_tokens, prod_feats, rev_feats), self.params.fusion)

    def sample_arrays(self, product: ProductRecord, review: ReviewRecord):
        if max(product.tokens, default=0) >= self.vocab_size or max(review.tokens, default=0) >= self.vocab_size:
            raise ValueError(f"token ids of product {product.product_id!r} exceed the model vocabulary "
                             f"({self.vocab_size})")
        return (np.asarray(product.tokens), np.asarray(review.tokens),
                roi_input(product.image_features, self.feature_dim),
                roi_input(review.image_features, self.feature_dim))

    def forward(self, samples: Sequence[Sample]) -> ForwardResult:
        """Score samples, batching those with identical input shapes into one graph."""
        groups: dict[tuple, list[int]] = {}
        arrays = [self.sample_arrays(p, r) for p, r in samples]
        for i, arr in enumerate(arrays):
            groups.setdefault(tuple(a.shape for a in arr), []).append(i)
        scores, pooled, bundles, order = [], [], [], []
        for rows in groups.values():
            stacked = [np.stack([arrays[i][k] for i in rows]) for k in range(4)]
            b = self.bundle(*stacked)
            scores.append(score(b, self.params.fusion))
            pooled.append(pool_features(b))
            bundles.append((rows, b))
            order.extend(rows)
        inv = np.argsort(np.asarray(order))
        if len(groups) == 1:
            return ForwardResult(scores[0], pooled[0], bundles)
        all_scores = ad.getitem(ad.concat(scores, axis=0), inv)
        all_pooled = PooledFeatures(*(ad.getitem(ad.concat([getattr(pf, k) for pf in pooled], axis=0), inv)
                                      for k in MODALITIES))
        return ForwardResult(all_scores, all_pooled, bundles)

    def score_samples(self, samples: Sequence[Sample]) -> np.ndarray:
        return self.forward(samples).scores.data.copy()
