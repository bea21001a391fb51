"""Multimodal interaction (stacked cross-modal attention) and the three fusion paths.

All functions accept optional leading batch axes: a matrix argument is
(..., rows, d) and concatenations happen along the row axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import SelfAttnParams, ones, self_attention, uniform_init, zeros

ROWS = -2


@dataclass
class CmBlockParams:
    w_q: Tensor  # (d, d_k)
    w_k: Tensor  # (d, d_k)
    w_v: Tensor  # (d, d_v)
    w_lin: Tensor  # (d_v, d)
    b_lin: Tensor
    ln_q_g: Tensor
    ln_q_b: Tensor
    ln_kv_g: Tensor
    ln_kv_b: Tensor

    @classmethod
    def init(cls, rng, d: int):
        return cls(uniform_init(rng, d, (d, d)), uniform_init(rng, d, (d, d)),
                   uniform_init(rng, d, (d, d)), uniform_init(rng, d, (d, d)), zeros((d,)),
                   ones((d,)), zeros((d,)), ones((d,)), zeros((d,)))


@dataclass
class CmStackParams:
    """D blocks for each of the four streams."""

    product_text: list[CmBlockParams] = field(default_factory=list)
    product_image: list[CmBlockParams] = field(default_factory=list)
    review_text: list[CmBlockParams] = field(default_factory=list)
    review_image: list[CmBlockParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng, d: int, depth: int):
        return cls(*([CmBlockParams.init(rng, d) for _ in range(depth)] for _ in range(4)))


@dataclass
class ModalFeatureBundle:
    h_p: Tensor
    v_p: Tensor
    h_r: Tensor
    v_r: Tensor


@dataclass
class FusionParams:
    sa_intra_text: SelfAttnParams
    sa_intra_image: SelfAttnParams
    conv_w: Tensor  # (width, d, d)
    conv_b: Tensor
    sa_inter_ptxt_rimg: SelfAttnParams
    sa_inter_pimg_rtxt: SelfAttnParams
    sa_review_product: SelfAttnParams
    sa_review_review: SelfAttnParams
    out_w: Tensor  # (5d, 1)
    out_b: Tensor  # (1,)

    @classmethod
    def init(cls, rng, d: int, n_heads: int = 4, conv_width: int = 3, residual: bool = True):
        def sa():
            return SelfAttnParams.init(rng, d, n_heads, residual)

        intra_t, intra_i = sa(), sa()
        conv_w = uniform_init(rng, conv_width * d, (conv_width, d, d))
        inter = [sa(), sa()]
        review = [sa(), sa()]
        return cls(intra_t, intra_i, conv_w, zeros((d,)), *inter, *review,
                   uniform_init(rng, 5 * d, (5 * d, 1)), zeros((1,)))


def cm_attention(x_q: Tensor, x_kv: Tensor, block: CmBlockParams, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V with Q from ``x_q`` and K, V from ``x_kv``."""
    d = block.w_q.shape[0]
    if x_q.shape[-1] != d or x_kv.shape[-1] != block.w_k.shape[0]:
        raise ad.DimensionError(
            f"cross-attention widths {x_q.shape[-1]}, {x_kv.shape[-1]} do not match block width {d}")
    q = ad.matmul(x_q, block.w_q)
    k = ad.matmul(x_kv, block.w_k)
    v = ad.matmul(x_kv, block.w_v)
    dk = block.w_k.shape[1]
    weights = ad.softmax(ad.matmul(q, ad.swap_last(k)) * (1.0 / np.sqrt(dk)), axis=-1)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def cm_block(q_prev: Tensor, x_kv: Tensor, block: CmBlockParams) -> Tensor:
    t = cm_attention(ad.layer_norm(q_prev, block.ln_q_g, block.ln_q_b),
                     ad.layer_norm(x_kv, block.ln_kv_g, block.ln_kv_b), block)
    u = t + q_prev
    return ad.gelu(ad.matmul(u, block.w_lin) + block.b_lin)


def cm_stack(x_q: Tensor, x_kv: Tensor, blocks: list[CmBlockParams]) -> Tensor:
    q = x_q
    for block in blocks:
        q = cm_block(q, x_kv, block)
    return q


def interact_all(k_p: Tensor, k_r: Tensor, a_p: Tensor, a_r: Tensor,
                 stacks: CmStackParams) -> ModalFeatureBundle:
    """Each stream attends to the row-wise concatenation of the other three inputs."""
    widths = {t.shape[-1] for t in (k_p, k_r, a_p, a_r)}
    if len(widths) != 1:
        raise ad.DimensionError(f"encoder outputs have mismatched widths {sorted(widths)}")
    return ModalFeatureBundle(
        h_p=cm_stack(k_p, ad.concat([k_r, a_p, a_r], axis=ROWS), stacks.product_text),
        v_p=cm_stack(a_p, ad.concat([k_p, k_r, a_r], axis=ROWS), stacks.product_image),
        h_r=cm_stack(k_r, ad.concat([k_p, a_p, a_r], axis=ROWS), stacks.review_text),
        v_r=cm_stack(a_r, ad.concat([k_p, k_r, a_p], axis=ROWS), stacks.review_image),
    )


def intra_modal_fuse(bundle: ModalFeatureBundle, params: FusionParams) -> Tensor:
    h = self_attention(ad.concat([bundle.h_p, bundle.h_r], axis=ROWS), params.sa_intra_text)
    v = self_attention(ad.concat([bundle.v_p, bundle.v_r], axis=ROWS), params.sa_intra_image)
    conv = ad.conv1d(ad.concat([h, v], axis=ROWS), params.conv_w, params.conv_b)
    return ad.pool(conv, "max", axis=ROWS)


def _paired_mean(a: Tensor, b: Tensor, sa1: SelfAttnParams,
                 c: Tensor, e: Tensor, sa2: SelfAttnParams) -> Tensor:
    first = ad.pool(self_attention(ad.concat([a, b], axis=ROWS), sa1), "mean", axis=ROWS)
    second = ad.pool(self_attention(ad.concat([c, e], axis=ROWS), sa2), "mean", axis=ROWS)
    return ad.concat([first, second], axis=-1)


def inter_modal_fuse(bundle: ModalFeatureBundle, params: FusionParams) -> Tensor:
    """[MeanPool(SelfAttn([H^p, V^r])), MeanPool(SelfAttn([V^p, H^r]))], width 2d."""
    return _paired_mean(bundle.h_p, bundle.v_r, params.sa_inter_ptxt_rimg,
                        bundle.v_p, bundle.h_r, params.sa_inter_pimg_rtxt)


def intra_review_fuse(bundle: ModalFeatureBundle, params: FusionParams) -> Tensor:
    """[MeanPool(SelfAttn([H^p, V^p])), MeanPool(SelfAttn([H^r, V^r]))], width 2d."""
    return _paired_mean(bundle.h_p, bundle.v_p, params.sa_review_product,
                        bundle.h_r, bundle.v_r, params.sa_review_review)


def final_features(bundle: ModalFeatureBundle, params: FusionParams) -> Tensor:
    return ad.concat([intra_modal_fuse(bundle, params), inter_modal_fuse(bundle, params),
                      intra_review_fuse(bundle, params)], axis=-1)


def score(bundle: ModalFeatureBundle, params: FusionParams) -> Tensor:
    """Linear(z_final); shape is the bundle's batch shape (a 0-d tensor for one sample)."""
    z = final_features(bundle, params)
    out = ad.matmul(ad.reshape(z, (-1, z.shape[-1])), params.out_w) + params.out_b
    return ad.reshape(out, z.shape[:-1])
