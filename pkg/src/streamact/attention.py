"""Scaled dot-product attention and pre-norm transformer layers.

All functions are pure in (inputs, params) and operate on sequences shaped
(L, width) or batched (B, L, width). Attention weights are returned for
inspection; there is no causal masking anywhere — every position may attend
to every other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .rng import SeededRng, ones_init, xavier_uniform_init, zeros_init
from .tensor import Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, width: int, dtype=np.float64) -> "NormParams":
        return cls(gamma=ones_init((width,), dtype), beta=zeros_init((width,), dtype))

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class MultiHeadParams:
    """Per-head q/k/v projections plus the shared output projection.

    Each head projects queries from ``query_width`` and keys/values from
    ``kv_width`` down to ``out_width / n_head``; concatenated heads are mixed
    back to ``out_width`` by ``w_out``.
    """

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_out: Tensor
    n_head: int

    @classmethod
    def init(cls, rng: SeededRng, query_width: int, kv_width: int, out_width: int,
             n_head: int, dtype=np.float64) -> "MultiHeadParams":
        if out_width % n_head:
            raise DimensionError(f"width {out_width} not divisible by {n_head} heads")
        head = out_width // n_head
        return cls(
            w_q=[xavier_uniform_init((query_width, head), rng.split(f"q{i}"), dtype)
                 for i in range(n_head)],
            w_k=[xavier_uniform_init((kv_width, head), rng.split(f"k{i}"), dtype)
                 for i in range(n_head)],
            w_v=[xavier_uniform_init((kv_width, head), rng.split(f"v{i}"), dtype)
                 for i in range(n_head)],
            w_out=xavier_uniform_init((out_width, out_width), rng.split("out"), dtype),
            n_head=n_head,
        )

    @property
    def head_width(self) -> int:
        return self.w_q[0].shape[1]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i in range(self.n_head):
            yield f"{prefix}.q{i}", self.w_q[i]
            yield f"{prefix}.k{i}", self.w_k[i]
            yield f"{prefix}.v{i}", self.w_v[i]
        yield f"{prefix}.out", self.w_out


@dataclass
class FeedForwardParams:
    """Two affine maps with a GELU between them."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: SeededRng, width: int, hidden: int, dtype=np.float64) -> "FeedForwardParams":
        return cls(
            w1=xavier_uniform_init((width, hidden), rng.split("w1"), dtype),
            b1=zeros_init((hidden,), dtype),
            w2=xavier_uniform_init((hidden, width), rng.split("w2"), dtype),
            b2=zeros_init((width,), dtype),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class EncoderLayerParams:
    norm_attn: NormParams
    attn: MultiHeadParams
    norm_ffn: NormParams
    ffn: FeedForwardParams

    @classmethod
    def init(cls, rng: SeededRng, width: int, n_head: int, ffn_hidden: int,
             dtype=np.float64) -> "EncoderLayerParams":
        return cls(
            norm_attn=NormParams.init(width, dtype),
            attn=MultiHeadParams.init(rng.split("attn"), width, width, width, n_head, dtype),
            norm_ffn=NormParams.init(width, dtype),
            ffn=FeedForwardParams.init(rng.split("ffn"), width, ffn_hidden, dtype),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.norm_attn.named(f"{prefix}.norm_attn")
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.norm_ffn.named(f"{prefix}.norm_ffn")
        yield from self.ffn.named(f"{prefix}.ffn")


@dataclass
class DecoderLayerParams:
    norm_self: NormParams
    self_attn: MultiHeadParams
    norm_cross: NormParams
    cross_attn: MultiHeadParams
    norm_ffn: NormParams
    ffn: FeedForwardParams

    @classmethod
    def init(cls, rng: SeededRng, query_width: int, memory_width: int, n_head: int,
             ffn_hidden: int, dtype=np.float64) -> "DecoderLayerParams":
        return cls(
            norm_self=NormParams.init(query_width, dtype),
            self_attn=MultiHeadParams.init(rng.split("self"), query_width, query_width,
                                           query_width, n_head, dtype),
            norm_cross=NormParams.init(query_width, dtype),
            cross_attn=MultiHeadParams.init(rng.split("cross"), query_width, memory_width,
                                            query_width, n_head, dtype),
            norm_ffn=NormParams.init(query_width, dtype),
            ffn=FeedForwardParams.init(rng.split("ffn"), query_width, ffn_hidden, dtype),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.norm_self.named(f"{prefix}.norm_self")
        yield from self.self_attn.named(f"{prefix}.self_attn")
        yield from self.norm_cross.named(f"{prefix}.norm_cross")
        yield from self.cross_attn.named(f"{prefix}.cross_attn")
        yield from self.norm_ffn.named(f"{prefix}.norm_ffn")
        yield from self.ffn.named(f"{prefix}.ffn")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         scale: float) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / scale) v; also returns the weight matrix.

    q: (..., L_q, d), k: (..., L_k, d), v: (..., L_k, d_v), scale > 0.
    """
    if k.shape[-2] == 0:
        raise DimensionError("attention over an empty key sequence")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape} does not match value length {v.shape}")
    logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / scale)
    weights = T.softmax(logits, axis=-1)
    return T.matmul(weights, v), weights


def _project_heads(x: Tensor, mats: list[Tensor], n_head: int, head: int) -> Tensor:
    """Apply all heads' projections as one matmul, split into (..., H, L, head)."""
    fused = T.concat(mats, axis=1) if n_head > 1 else mats[0]
    proj = T.matmul(x, fused)
    batched = proj.ndim == 3
    lead = proj.shape[:-1]
    proj = T.reshape(proj, lead + (n_head, head))
    if batched:
        return T.transpose(proj, (0, 2, 1, 3))
    return T.transpose(proj, (1, 0, 2))


def multi_head_attention(x_query: Tensor, x_kv: Tensor,
                         p: MultiHeadParams) -> tuple[Tensor, Tensor]:
    """Shared core for self- and cross-attention.

    Returns (output, weights) with weights shaped (..., n_head, L_q, L_k);
    heads are concatenated in head order and mixed by w_out.
    """
    if x_query.shape[-1] != p.w_q[0].shape[0]:
        raise DimensionError(
            f"query input width {x_query.shape} does not match projection {p.w_q[0].shape}")
    if x_kv.shape[-1] != p.w_k[0].shape[0]:
        raise DimensionError(
            f"key/value input width {x_kv.shape} does not match projection {p.w_k[0].shape}")
    if x_kv.shape[-2] == 0:
        raise DimensionError("attention memory is empty")
    head = p.head_width
    q = _project_heads(x_query, p.w_q, p.n_head, head)
    k = _project_heads(x_kv, p.w_k, p.n_head, head)
    v = _project_heads(x_kv, p.w_v, p.n_head, head)
    out, weights = scaled_dot_attention(q, k, v, math.sqrt(head))
    if out.ndim == 4:  # (B, H, L, head) -> (B, L, H*head)
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (out.shape[0], out.shape[1], p.n_head * head))
    else:  # (H, L, head) -> (L, H*head)
        out = T.transpose(out, (1, 0, 2))
        out = T.reshape(out, (out.shape[0], p.n_head * head))
    return T.matmul(out, p.w_out), weights


def multi_head_self_attention(x: Tensor, p: MultiHeadParams) -> tuple[Tensor, Tensor]:
    return multi_head_attention(x, x, p)


def multi_head_cross_attention(x_query: Tensor, memory: Tensor,
                               p: MultiHeadParams) -> tuple[Tensor, Tensor]:
    return multi_head_attention(x_query, memory, p)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return T.matmul(T.gelu(T.matmul(x, p.w1) + p.b1), p.w2) + p.b2


def encoder_layer_forward(x: Tensor, p: EncoderLayerParams, eps: float = 1e-5,
                          maps_out: list | None = None) -> Tensor:
    """Pre-norm residual block: x + MSA(Norm(x)), then + FFN(Norm(.))."""
    attended, weights = multi_head_self_attention(
        T.layer_norm(x, p.norm_attn.gamma, p.norm_attn.beta, eps), p.attn)
    if maps_out is not None:
        maps_out.append(weights.data.copy())
    a = x + attended
    return a + feed_forward(T.layer_norm(a, p.norm_ffn.gamma, p.norm_ffn.beta, eps), p.ffn)


def decoder_layer_forward(queries: Tensor, memory: Tensor, p: DecoderLayerParams,
                          eps: float = 1e-5, self_maps_out: list | None = None,
                          cross_maps_out: list | None = None) -> Tensor:
    """Query self-attention, cross-attention into memory, FFN; all pre-norm residual.

    Queries are decoded in parallel: no causal mask over the query axis.
    """
    attended, self_w = multi_head_self_attention(
        T.layer_norm(queries, p.norm_self.gamma, p.norm_self.beta, eps), p.self_attn)
    if self_maps_out is not None:
        self_maps_out.append(self_w.data.copy())
    a = queries + attended
    crossed, cross_w = multi_head_cross_attention(
        T.layer_norm(a, p.norm_cross.gamma, p.norm_cross.beta, eps), memory, p.cross_attn)
    if cross_maps_out is not None:
        cross_maps_out.append(cross_w.data.copy())
    b = a + crossed
    return b + feed_forward(T.layer_norm(b, p.norm_ffn.gamma, p.norm_ffn.beta, eps), p.ffn)
