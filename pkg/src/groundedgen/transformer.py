"""Multi-head attention, encoder layers, and the two decoder layer variants.

Every sublayer is wrapped post-norm: ``LayerNorm(residual + dropout(h))``,
with the wrapper's output becoming the residual for the next sublayer.
The standard decoder layer runs [self, cross, ffn]; the document-headed
variant runs [self, cxt, doc, ffn] where the document attention takes the
context-attention sublayer's output as its query. The document sublayer's
norm shares the context sublayer's norm parameters, so adding document
attention to a layer adds exactly the four projection matrices and their
biases and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, concat, dropout, gelu, layer_norm, matmul,
                       masked_softmax, slice_axis, transpose)

__all__ = [
    "LayerNormParams",
    "MultiHeadParams",
    "FeedForwardParams",
    "EncoderLayer",
    "DecoderLayerStd",
    "DecoderLayerDoHA",
    "STD_SUBLAYERS",
    "DOHA_SUBLAYERS",
    "multi_head_attention",
    "feed_forward",
    "encoder_forward",
    "decoder_layer_std",
    "decoder_layer_doha",
    "init_doha_from_cxt",
    "causal_mask",
]

STD_SUBLAYERS = ("self", "cross", "ffn")
DOHA_SUBLAYERS = ("self", "cxt", "doc", "ffn")


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    def tensors(self):
        yield self.gamma
        yield self.beta


@dataclass
class MultiHeadParams:
    """Projections for one multi-head attention block.

    Per-head weights live as column blocks of the combined matrices:
    head j's query projection is ``wq[:, j*d_head:(j+1)*d_head]``, and the
    matching bias slice of ``bq``; likewise for keys and values. ``wo``
    projects the concatenated head outputs back to d_model.
    """

    num_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def head_weights(self, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo, hi = j * self.d_head, (j + 1) * self.d_head
        return self.wq.data[:, lo:hi], self.wk.data[:, lo:hi], self.wv.data[:, lo:hi]

    def tensors(self):
        yield from (self.wq, self.wk, self.wv, self.wo,
                    self.bq, self.bk, self.bv, self.bo)


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        yield from (self.w1, self.b1, self.w2, self.b2)


@dataclass
class EncoderLayer:
    self_attn: MultiHeadParams
    self_ln: LayerNormParams
    ffn: FeedForwardParams
    ffn_ln: LayerNormParams

    def tensors(self):
        for part in (self.self_attn, self.self_ln, self.ffn, self.ffn_ln):
            yield from part.tensors()


@dataclass
class DecoderLayerStd:
    self_attn: MultiHeadParams
    self_ln: LayerNormParams
    cross_cxt: MultiHeadParams
    cross_ln: LayerNormParams
    ffn: FeedForwardParams
    ffn_ln: LayerNormParams

    def tensors(self):
        for part in (self.self_attn, self.self_ln, self.cross_cxt,
                     self.cross_ln, self.ffn, self.ffn_ln):
            yield from part.tensors()


@dataclass
class DecoderLayerDoHA:
    """Decoder layer with a second, document-focused cross attention.

    ``cross_ln`` wraps both the context and the document sublayers; the
    document attention owns no norm parameters of its own.
    """

    self_attn: MultiHeadParams
    self_ln: LayerNormParams
    cross_cxt: MultiHeadParams
    cross_ln: LayerNormParams
    cross_doc: MultiHeadParams
    ffn: FeedForwardParams
    ffn_ln: LayerNormParams

    def tensors(self):
        for part in (self.self_attn, self.self_ln, self.cross_cxt,
                     self.cross_ln, self.cross_doc, self.ffn, self.ffn_ln):
            yield from part.tensors()


def param_count(layer) -> int:
    return sum(t.size for t in layer.tensors())


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular keep-mask: position t may attend positions <= t."""
    return np.tril(np.ones((n, n), dtype=bool))


def multi_head_attention(params: MultiHeadParams, q_in: Tensor, k_in: Tensor,
                         v_in: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` heads.

    ``q_in`` is (..., Tq, d_model); ``k_in`` and ``v_in`` share (..., Tk,
    d_model). ``mask`` broadcasts to (..., Tq, Tk) with True marking key
    positions a query may attend. Scores are scaled by 1/sqrt(d_head);
    head outputs are concatenated and projected by ``wo``.
    """
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ValueError(
            f"keys and values disagree in length: {k_in.shape} vs {v_in.shape}")
    m, dh = params.num_heads, params.d_head
    q = matmul(q_in, params.wq) + params.bq
    k = matmul(k_in, params.wk) + params.bk
    v = matmul(v_in, params.wv) + params.bv
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    kt = transpose(k, axes)
    inv_sqrt = 1.0 / math.sqrt(dh)
    heads = []
    for j in range(m):
        lo, hi = j * dh, (j + 1) * dh
        scores = matmul(slice_axis(q, -1, lo, hi), slice_axis(kt, -2, lo, hi)) * inv_sqrt
        weights = masked_softmax(scores, mask)
        heads.append(matmul(weights, slice_axis(v, -1, lo, hi)))
    merged = heads[0] if m == 1 else concat(heads, axis=-1)
    return matmul(merged, params.wo) + params.bo


def feed_forward(params: FeedForwardParams, x: Tensor) -> Tensor:
    return matmul(gelu(matmul(x, params.w1) + params.b1), params.w2) + params.b2


def _wrap_sublayer(residual: Tensor, h: Tensor, ln: LayerNormParams, *,
                   drop: float, train: bool, rng, eps: float) -> Tensor:
    h = dropout(h, drop, training=train, rng=rng)
    return layer_norm(residual + h, ln.gamma, ln.beta, eps)


def encoder_forward(layers, x: Tensor, pad_mask: np.ndarray | None, *,
                    drop: float = 0.0, train: bool = False, rng=None,
                    eps: float = 1e-5) -> Tensor:
    """Self-attention + FFN stack over embedded tokens (..., T, d_model).

    ``pad_mask`` is (..., T) with True on real tokens; padded positions are
    never attended. Zero layers is the identity.
    """
    key_mask = None if pad_mask is None else np.asarray(pad_mask, bool)[..., None, :]
    for layer in layers:
        h = multi_head_attention(layer.self_attn, x, x, x, key_mask)
        x = _wrap_sublayer(x, h, layer.self_ln, drop=drop, train=train, rng=rng, eps=eps)
        h = feed_forward(layer.ffn, x)
        x = _wrap_sublayer(x, h, layer.ffn_ln, drop=drop, train=train, rng=rng, eps=eps)
    return x


def decoder_layer_std(layer: DecoderLayerStd, h_x: Tensor, h_src: Tensor,
                      causal: np.ndarray, src_mask: np.ndarray | None, *,
                      drop: float = 0.0, train: bool = False, rng=None,
                      eps: float = 1e-5, trace: list | None = None,
                      capture: dict | None = None) -> Tensor:
    """[self, cross, ffn] over target states with one source memory."""
    if h_src.shape[-2] == 0:
        raise ValueError("decoder needs a non-empty source memory")
    h = _wrap_sublayer(h_x, multi_head_attention(layer.self_attn, h_x, h_x, h_x, causal),
                       layer.self_ln, drop=drop, train=train, rng=rng, eps=eps)
    _note(trace, capture, "self", h)
    h = _wrap_sublayer(h, multi_head_attention(layer.cross_cxt, h, h_src, h_src, src_mask),
                       layer.cross_ln, drop=drop, train=train, rng=rng, eps=eps)
    _note(trace, capture, "cross", h)
    h = _wrap_sublayer(h, feed_forward(layer.ffn, h),
                       layer.ffn_ln, drop=drop, train=train, rng=rng, eps=eps)
    _note(trace, capture, "ffn", h)
    return h


def decoder_layer_doha(layer: DecoderLayerDoHA, h_x: Tensor, h_c: Tensor,
                       h_d: Tensor, causal: np.ndarray,
                       cxt_mask: np.ndarray | None, doc_mask: np.ndarray | None, *,
                       drop: float = 0.0, train: bool = False, rng=None,
                       eps: float = 1e-5, trace: list | None = None,
                       capture: dict | None = None) -> Tensor:
    """[self, cxt, doc, ffn]: document attention queries the cxt sublayer output."""
    if h_c.shape[-2] == 0:
        raise ValueError("context memory is empty")
    if h_d.shape[-2] == 0:
        raise ValueError("document memory is empty")
    h = _wrap_sublayer(h_x, multi_head_attention(layer.self_attn, h_x, h_x, h_x, causal),
                       layer.self_ln, drop=drop, train=train, rng=rng, eps=eps)
    _note(trace, capture, "self", h)
    h = _wrap_sublayer(h, multi_head_attention(layer.cross_cxt, h, h_c, h_c, cxt_mask),
                       layer.cross_ln, drop=drop, train=train, rng=rng, eps=eps)
    _note(trace, capture, "cxt", h)
    h = _wrap_sublayer(h, multi_head_attention(layer.cross_doc, h, h_d, h_d, doc_mask),
                       layer.cross_ln, drop=drop, train=train, rng=rng, eps=eps)
    _note(trace, capture, "doc", h)
    h = _wrap_sublayer(h, feed_forward(layer.ffn, h),
                       layer.ffn_ln, drop=drop, train=train, rng=rng, eps=eps)
    _note(trace, capture, "ffn", h)
    return h


def _note(trace, capture, name: str, value: Tensor) -> None:
    if trace is not None:
        trace.append(name)
    if capture is not None:
        capture[name] = value


def init_doha_from_cxt(layer: DecoderLayerDoHA) -> None:
    """Copy the context cross-attention parameters into the document head.

    Element-wise copy of weights and biases; idempotent. No norm copy is
    needed because the document sublayer shares ``cross_ln``.
    """
    for dst, src in zip(layer.cross_doc.tensors(), layer.cross_cxt.tensors()):
        if dst.shape != src.shape:
            raise ValueError(
                f"document head shape {dst.shape} differs from context head {src.shape}")
        dst.data[...] = src.data
