"""Text and image encoders producing K^p, K^r (LSTM states) and A^p, A^r (attended ROI features)."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Flatten nested parameter dataclasses / lists into ``(dotted.name, tensor)`` pairs."""
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    out = []
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (Tensor, list)) or dataclasses.is_dataclass(val):
                out += named_tensors(val, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, list):
        for i, val in enumerate(obj):
            out += named_tensors(val, f"{prefix}.{i}")
    return out


@dataclass
class EmbeddingTable:
    weight: Tensor  # (vocab, d_emb); row 0 is the unknown token

    @classmethod
    def init(cls, rng, vocab_size: int, d_emb: int):
        return cls(Tensor(rng.normal(0.0, 0.1, size=(vocab_size, d_emb)), requires_grad=True))


@dataclass
class LstmParams:
    # gate blocks are laid out [input, forget, output, cell] along the last axis
    w_x: Tensor  # (d_in, 4d)
    w_h: Tensor  # (d, 4d)
    b: Tensor  # (4d,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, rng, d_in: int, d: int):
        b = np.zeros(4 * d)
        b[d:2 * d] = 1.0
        return cls(uniform_init(rng, d_in, (d_in, 4 * d)), uniform_init(rng, d, (d, 4 * d)),
                   Tensor(b, requires_grad=True))


@dataclass
class SelfAttnParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln_g: Tensor
    ln_b: Tensor
    n_heads: int = 4
    residual: bool = True

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng, d: int, n_heads: int = 4, residual: bool = True):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        mats = []
        for _ in range(4):
            mats += [uniform_init(rng, d, (d, d)), zeros((d,))]
        return cls(*mats, ones((d,)), zeros((d,)), n_heads=n_heads, residual=residual)


@dataclass
class ImageEncoderParams:
    w_proj: Tensor  # (feature_dim, d)
    b_proj: Tensor
    attn: SelfAttnParams

    @classmethod
    def init(cls, rng, feature_dim: int, d: int, n_heads: int = 4, residual: bool = True):
        return cls(uniform_init(rng, feature_dim, (feature_dim, d)), zeros((d,)),
                   SelfAttnParams.init(rng, d, n_heads, residual))


def embed(tokens, table: EmbeddingTable) -> Tensor:
    return ad.embedding(table.weight, tokens)


def lstm_encode(x: Tensor, params: LstmParams) -> Tensor:
    """Run a unidirectional LSTM from zero state; returns every hidden state, (..., l, d)."""
    if x.ndim == 2:
        return ad.reshape(lstm_encode(ad.reshape(x, (1,) + x.shape), params), x.shape[:1] + (params.hidden,))
    d = params.hidden
    length = x.shape[-2]
    lead = x.shape[:-2]
    xproj = ad.matmul(x, params.w_x) + params.b
    h = Tensor(np.zeros(lead + (d,)))
    c = Tensor(np.zeros(lead + (d,)))
    states = []
    for t in range(length):
        gates = xproj[..., t, :]
        if t > 0:
            gates = gates + ad.matmul(h, params.w_h)
        sig = ad.sigmoid(gates[..., :3 * d])
        i, f, o = sig[..., :d], sig[..., d:2 * d], sig[..., 2 * d:]
        g = ad.tanh(gates[..., 3 * d:])
        c = f * c + i * g
        h = o * ad.tanh(c)
        states.append(h)
    return ad.stack(states, axis=-2)


def self_attention(x: Tensor, params: SelfAttnParams, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention with residual and layer norm.

    ``x`` is (..., n, d).  With ``return_weights`` the (..., heads, n, n)
    attention matrix is returned alongside the output.
    """
    n, d = x.shape[-2], x.shape[-1]
    h = params.n_heads
    dh = d // h
    lead = x.shape[:-2]

    def heads(t):
        t = ad.reshape(t, lead + (n, h, dh))
        nl = len(lead)
        return ad.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    q = heads(ad.matmul(x, params.w_q) + params.b_q)
    k = heads(ad.matmul(x, params.w_k) + params.b_k)
    v = heads(ad.matmul(x, params.w_v) + params.b_v)
    weights = ad.softmax(ad.matmul(q, ad.swap_last(k)) * (1.0 / np.sqrt(dh)), axis=-1)
    ctx = ad.matmul(weights, v)
    nl = len(lead)
    ctx = ad.reshape(ad.transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2)), lead + (n, d))
    out = ad.matmul(ctx, params.w_o) + params.b_o
    if params.residual:
        out = out + x
    out = ad.layer_norm(out, params.ln_g, params.ln_b)
    return (out, weights) if return_weights else out


def project(features, params: ImageEncoderParams) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    if x.shape[-1] != params.w_proj.shape[0]:
        raise ad.DimensionError(
            f"ROI feature width {x.shape[-1]} != encoder input width {params.w_proj.shape[0]}")
    return ad.matmul(x, params.w_proj) + params.b_proj


def encode_image(features, params: ImageEncoderParams) -> Tensor:
    """A = SelfAttn(project(features)); accepts a RoiFeatureMatrix, array or Tensor of (..., m, dim)."""
    values = getattr(features, "values", features)
    return self_attention(project(values, params), params.attn)
