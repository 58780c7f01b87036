"""Bidirectional Interaction Module and the fusion baselines it is compared to.

Both streams run at the bottleneck resolution. Attention logits carry a
distance-decaying bias ``B = -w * D2`` shared by every head and direction,
with ``w = softplus(w_raw)`` so it stays nonnegative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from denet import ops
from denet.nn import Conv1x1, DepthwiseConv, Module
from denet.tensor import Tensor


def pairwise_sq_dist(h: int, w: int) -> np.ndarray:
    """Squared Euclidean distances between the row-major positions of an h x w grid."""
    if h < 1 or w < 1:
        raise ValueError("grid must be at least 1x1")
    ys, xs = np.divmod(np.arange(h * w), w)
    return ((ys[:, None] - ys[None, :]) ** 2 + (xs[:, None] - xs[None, :]) ** 2).astype(np.float64)


class LocalAttention(Module):
    """Depthwise 3x3 filter gated by a sigmoid of a 1x1 convolution."""

    def __init__(self, channels: int, rng, dtype=np.float64):
        self.dw = DepthwiseConv(channels, 3, rng, dtype)
        self.gate = Conv1x1(channels, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return local_self_attention(x, self)


def local_self_attention(x: Tensor, p: LocalAttention) -> Tensor:
    if x.shape[-3] != p.dw.weight.shape[0]:
        raise ValueError(f"local_self_attention: input has {x.shape[-3]} channels, params expect {p.dw.weight.shape[0]}")
    return ops.depthwise_conv2d(x, p.dw.weight) * ops.sigmoid(p.gate(x))


class Projections(Module):
    """Bias-free query/key/value maps from a path's width to the attention width."""

    def __init__(self, cin: int, width: int, rng, dtype=np.float64):
        self.q = Conv1x1(cin, width, rng, bias=False, dtype=dtype, gain=1.0)
        self.k = Conv1x1(cin, width, rng, bias=False, dtype=dtype, gain=1.0)
        self.v = Conv1x1(cin, width, rng, bias=False, dtype=dtype, gain=1.0)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    lead = t.shape[:-3]
    width, h, w = t.shape[-3:]
    if width % heads:
        raise ValueError(f"attention width {width} is not divisible by {heads} heads")
    return ops.swap_last(ops.reshape(t, lead + (heads, width // heads, h * w)))


def _merge_heads(z: Tensor, h: int, w: int) -> Tensor:
    lead = z.shape[:-3]
    heads, n, d = z.shape[-3:]
    return ops.reshape(ops.swap_last(z), lead + (heads * d, h, w))


def attention_weights(q: Tensor, k: Tensor, w: Tensor, d2: Tensor, heads: int) -> Tensor:
    """Row-stochastic weights ``softmax((Q K^T + B) / sqrt(d))`` per head."""
    n = q.shape[-2] * q.shape[-1]
    if d2.shape != (n, n):
        raise ValueError(f"distance table {d2.shape} does not match {n} positions")
    if k.shape[-2:] != q.shape[-2:]:
        raise ValueError(f"query/key spatial mismatch {q.shape} vs {k.shape}")
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    d = qh.shape[-1]
    bias = ops.neg(w) * d2
    logits = ops.matmul(qh, ops.swap_last(kh)) + bias
    return ops.softmax_rows(ops.scale(logits, 1.0 / math.sqrt(d)))


def attend(q: Tensor, k: Tensor, v: Tensor, w: Tensor, d2: Tensor, heads: int) -> Tensor:
    h, wd = q.shape[-2:]
    a = attention_weights(q, k, w, d2, heads)
    return _merge_heads(ops.matmul(a, _split_heads(v, heads)), h, wd)


def global_self_attention(x: Tensor, proj: Projections, out: Conv1x1, w: Tensor,
                          d2: Tensor, heads: int) -> Tensor:
    """Gaussian-biased multi-head self attention, projected back to x's width."""
    return out(attend(proj.q(x), proj.k(x), proj.v(x), w, d2, heads))


def cross_attention(q_path: Tensor, kv_path: Tensor, q_proj: Projections, kv_proj: Projections,
                    restore: Conv1x1, w: Tensor, d2: Tensor, heads: int) -> Tensor:
    """Queries from one stream, keys and values from the other, same bias."""
    if q_path.shape[-2:] != kv_path.shape[-2:]:
        raise ValueError(f"cross_attention: spatial mismatch {q_path.shape} vs {kv_path.shape}")
    return restore(attend(q_proj.q(q_path), kv_proj.k(kv_path), kv_proj.v(kv_path), w, d2, heads))


@dataclass(frozen=True)
class BimOptions:
    use_local: bool = True
    use_global: bool = True
    gaussian_bias: bool = True
    share_local: bool = False


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class BIM(Module):
    """Edge/semantic fusion hub.

    Per stream: ``X_loc = X + t_loc(X)``, ``X_glob = X_loc + SA(X_loc)``.
    Then ``U_e = X_e_glob + Proj(Z_{s<-e})``, ``U_s = X_s_glob + Proj(Z_{e<-s})``
    and ``t = Conv1x1([t_loc(U_e), t_loc(U_s)])``.
    """

    def __init__(self, edge_channels: int, sem_channels: int, out_channels: int, heads: int,
                 rng, options: BimOptions = BimOptions(), w_init: float = 0.1, dtype=np.float64):
        width = edge_channels
        self.heads = heads
        self.options = options
        self.w_raw = Tensor(np.asarray(_inverse_softplus(w_init), dtype=dtype), requires_grad=True)
        # step 1: local attention
        self.local_e = LocalAttention(edge_channels, rng, dtype) if options.use_local else None
        self.local_s = LocalAttention(sem_channels, rng, dtype) if options.use_local else None
        # step 2: global attention
        if options.use_global:
            self.sa_e = Projections(edge_channels, width, rng, dtype)
            self.sa_s = Projections(sem_channels, width, rng, dtype)
            self.sa_out_e = Conv1x1(width, edge_channels, rng, dtype=dtype)
            self.sa_out_s = Conv1x1(width, sem_channels, rng, dtype=dtype)
        # step 3: cross attention and restore projections
        self.cross_e = Projections(edge_channels, width, rng, dtype)
        self.cross_s = Projections(sem_channels, width, rng, dtype)
        self.proj_e = Conv1x1(width, edge_channels, rng, dtype=dtype)
        self.proj_s = Conv1x1(width, sem_channels, rng, dtype=dtype)
        # output fusion
        if options.use_local and not options.share_local:
            self.out_local_e = LocalAttention(edge_channels, rng, dtype)
            self.out_local_s = LocalAttention(sem_channels, rng, dtype)
        self.fuse = Conv1x1(edge_channels + sem_channels, out_channels, rng, dtype=dtype)
        self._d2_cache: dict[tuple[int, int], Tensor] = {}

    def distance_table(self, h: int, w: int, dtype) -> Tensor:
        key = (h, w)
        if key not in self._d2_cache:
            self._d2_cache[key] = Tensor(pairwise_sq_dist(h, w).astype(dtype))
        return self._d2_cache[key]

    def bias_scale(self, dtype) -> Tensor:
        if not self.options.gaussian_bias:
            return Tensor(np.zeros((), dtype=dtype))
        return ops.softplus(self.w_raw)

    def _out_local(self, stream: str) -> Optional[LocalAttention]:
        if not self.options.use_local:
            return None
        if self.options.share_local:
            return self.local_e if stream == "e" else self.local_s
        return self.out_local_e if stream == "e" else self.out_local_s

    def stream(self, x: Tensor, local: Optional[LocalAttention], proj: Optional[Projections],
               out: Optional[Conv1x1], w: Tensor, d2: Tensor) -> Tensor:
        """Local then global enhancement of one stream, both residual."""
        if local is not None:
            x = x + local(x)
        if proj is not None:
            x = x + global_self_attention(x, proj, out, w, d2, self.heads)
        return x

    def streams(self, f_edge: Tensor, f_sem: Tensor):
        if f_edge.shape[-2:] != f_sem.shape[-2:]:
            raise ValueError(f"bim: spatial mismatch {f_edge.shape} vs {f_sem.shape}")
        h, wd = f_edge.shape[-2:]
        d2 = self.distance_table(h, wd, f_edge.dtype)
        w = self.bias_scale(f_edge.dtype)
        g = self.options.use_global
        xe = self.stream(f_edge, self.local_e, self.sa_e if g else None, self.sa_out_e if g else None, w, d2)
        xs = self.stream(f_sem, self.local_s, self.sa_s if g else None, self.sa_out_s if g else None, w, d2)
        return xe, xs, w, d2

    def cross(self, xe: Tensor, xs: Tensor, direction: str, w: Tensor, d2: Tensor) -> Tensor:
        """``e_from_s``: edge queries over semantic keys/values; ``s_from_e`` the mirror."""
        if direction == "e_from_s":
            return cross_attention(xe, xs, self.cross_e, self.cross_s, self.proj_s, w, d2, self.heads)
        if direction == "s_from_e":
            return cross_attention(xs, xe, self.cross_s, self.cross_e, self.proj_e, w, d2, self.heads)
        raise ValueError(f"unknown cross-attention direction {direction!r}")

    def forward(self, f_edge: Tensor, f_sem: Tensor) -> Tensor:
        xe, xs, w, d2 = self.streams(f_edge, f_sem)
        ue = xe + self.cross(xe, xs, "s_from_e", w, d2)
        us = xs + self.cross(xe, xs, "e_from_s", w, d2)
        le, ls = self._out_local("e"), self._out_local("s")
        te = ue if le is None else le(ue)
        ts = us if ls is None else ls(us)
        return self.fuse(ops.concat_channels(te, ts))


def bim_forward(f_edge: Tensor, f_sem: Tensor, p: BIM) -> Tensor:
    return p(f_edge, f_sem)


class ConcatFusion(Module):
    """Plain concatenation followed by a 1x1 convolution (no interaction module)."""

    def __init__(self, edge_channels: int, sem_channels: int, out_channels: int, rng, dtype=np.float64):
        self.fuse = Conv1x1(edge_channels + sem_channels, out_channels, rng, dtype=dtype)

    def forward(self, f_edge: Tensor, f_sem: Tensor) -> Tensor:
        return self.fuse(ops.concat_channels(f_edge, f_sem))


class CoAttentionFusion(Module):
    """Concatenate both streams first, then one biased self-attention."""

    def __init__(self, edge_channels: int, sem_channels: int, out_channels: int, heads: int,
                 rng, dtype=np.float64):
        self.heads = heads
        self.merge = Conv1x1(edge_channels + sem_channels, out_channels, rng, dtype=dtype)
        self.sa = Projections(out_channels, out_channels, rng, dtype)
        self.sa_out = Conv1x1(out_channels, out_channels, rng, dtype=dtype)
        self.w_raw = Tensor(np.asarray(_inverse_softplus(0.1), dtype=dtype), requires_grad=True)

    def forward(self, f_edge: Tensor, f_sem: Tensor) -> Tensor:
        x = self.merge(ops.concat_channels(f_edge, f_sem))
        h, w = x.shape[-2:]
        d2 = Tensor(pairwise_sq_dist(h, w).astype(x.dtype))
        return x + global_self_attention(x, self.sa, self.sa_out, ops.softplus(self.w_raw), d2, self.heads)


class MergedAttentionFusion(Module):
    """Sequential variant: edge self attention, then edge queries over the semantic stream."""

    def __init__(self, edge_channels: int, sem_channels: int, out_channels: int, heads: int,
                 rng, dtype=np.float64):
        self.heads = heads
        self.sa = Projections(edge_channels, edge_channels, rng, dtype)
        self.sa_out = Conv1x1(edge_channels, edge_channels, rng, dtype=dtype)
        self.q = Projections(edge_channels, edge_channels, rng, dtype)
        self.kv = Projections(sem_channels, edge_channels, rng, dtype)
        self.restore = Conv1x1(edge_channels, edge_channels, rng, dtype=dtype)
        self.out = Conv1x1(edge_channels, out_channels, rng, dtype=dtype)
        self.w_raw = Tensor(np.asarray(_inverse_softplus(0.1), dtype=dtype), requires_grad=True)

    def forward(self, f_edge: Tensor, f_sem: Tensor) -> Tensor:
        h, w = f_edge.shape[-2:]
        d2 = Tensor(pairwise_sq_dist(h, w).astype(f_edge.dtype))
        bw = ops.softplus(self.w_raw)
        x = f_edge + global_self_attention(f_edge, self.sa, self.sa_out, bw, d2, self.heads)
        x = x + cross_attention(x, f_sem, self.q, self.kv, self.restore, bw, d2, self.heads)
        return self.out(x)
