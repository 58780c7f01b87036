"""Multi-Edge Refiner: Sobel seed plus cascaded finite-difference refiners.

Each refiner stage keeps the two most recent cascade features ``T_j`` and
``T_{j+1}`` and produces

    T_{j+2} = T_gate + T_{j+1} - 3 (T_{j+1} - T_j)

where ``T_gate`` is the attention-gated mix of ``T_{j+1}`` and a learned
transform of the edge seed.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from denet import ops
from denet.nn import Conv1x1, Conv2d, Linear, Module, StridedConv1x1
from denet.tensor import Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
SEED_EPS = 1e-12


def sobel_seed(x: Tensor) -> Tensor:
    """Per-channel Sobel gradient magnitude, same spatial size as ``x``.

    Borders are handled by edge replication, so a constant image maps to
    exactly zero. The magnitude is ``sqrt(gx^2 + gy^2 + eps) - sqrt(eps)``,
    which is smooth at zero gradient and exactly zero there.
    """
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"sobel_seed: image {h}x{w} is smaller than the 3x3 kernel")
    c = x.shape[-3]
    kx = Tensor(np.broadcast_to(SOBEL_X, (c, 3, 3)).astype(x.dtype))
    ky = Tensor(np.broadcast_to(SOBEL_Y, (c, 3, 3)).astype(x.dtype))
    xp = ops.pad_replicate(x, 1)
    gx = ops.depthwise_conv2d(xp, kx, pad=0)
    gy = ops.depthwise_conv2d(xp, ky, pad=0)
    eps = np.asarray(SEED_EPS, dtype=x.dtype)
    return ops.sqrt(gx * gx + gy * gy + eps) - np.sqrt(eps)


class FilterBranch(Module):
    """Two 3x3 convolutions with a rectifier in between."""

    def __init__(self, cin: int, channels: int, rng, dtype=np.float64):
        self.conv1 = Conv2d(cin, channels, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, dtype=dtype)

    def forward(self, e: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(e)))


class SpatialGate(Module):
    def __init__(self, cin: int, hidden: int, rng, dtype=np.float64):
        self.conv1 = Conv2d(cin, hidden, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, 1, 3, rng, dtype=dtype)

    def forward(self, t: Tensor, e: Tensor) -> Tensor:
        return spatial_attention(t, e, self)


class ChannelGate(Module):
    def __init__(self, channels: int, hidden: int, rng, dtype=np.float64):
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def forward(self, t: Tensor) -> Tensor:
        return channel_attention(t, self)


def spatial_attention(t: Tensor, e: Tensor, gate: SpatialGate) -> Tensor:
    """Map in (0, 1) of shape ``1 x H x W`` from concatenated features and edge evidence."""
    if t.shape[-2:] != e.shape[-2:]:
        raise ValueError(f"spatial_attention: spatial mismatch {t.shape} vs {e.shape}")
    z = ops.concat_channels(t, e)
    return ops.sigmoid(gate.conv2(ops.relu(gate.conv1(z))))


def channel_attention(t: Tensor, gate: ChannelGate) -> Tensor:
    """Softmax weights over the channels of ``t`` (a point on the simplex)."""
    pooled = ops.global_avg_pool(t)
    return ops.softmax_rows(gate.fc2(ops.relu(gate.fc1(pooled))))


def taylor_update(t_gate: Tensor, t_next: Tensor, t_prev: Tensor) -> Tensor:
    """``t_gate + t_next - 3 (t_next - t_prev)``."""
    if not (t_gate.shape == t_next.shape == t_prev.shape):
        raise ValueError(f"taylor_update: shape mismatch {t_gate.shape}, {t_next.shape}, {t_prev.shape}")
    return t_gate + t_next - ops.scale(t_next - t_prev, 3.0)


class EdgeRefinerStage(Module):
    def __init__(self, seed_channels: int, channels: int, divisor: int, rng, dtype=np.float64):
        self.channels = channels
        self.divisor = divisor
        width = 2 * channels
        self.filter = FilterBranch(seed_channels, channels, rng, dtype)
        self.spatial_gate = SpatialGate(width, max(width // 8, 4), rng, dtype)
        self.channel_gate = ChannelGate(width, max(width // 8, 4), rng, dtype)
        self.align_proj = Conv1x1(width, channels, rng, dtype=dtype)

    def gate(self, t_next: Tensor, fe: Tensor) -> Tensor:
        z = ops.concat_channels(t_next, fe)
        a = self.spatial_gate(t_next, fe)
        b = channel_attention(z, self.channel_gate)
        b = ops.reshape(b, b.shape + (1, 1))
        return self.align_proj(a * (b * z))

    def forward(self, t_prev: Tensor, e_stage: Tensor) -> Tensor:
        fe = self.filter(e_stage)
        t_next = t_prev + fe
        return taylor_update(self.gate(t_next, fe), t_next, t_prev)


def gated_input(t_next: Tensor, e_coarse: Tensor, stage: EdgeRefinerStage) -> Tensor:
    """Aligned gated input ``align_proj(a * (b . [t_next, F(e)]))``."""
    if t_next.shape[-2:] != e_coarse.shape[-2:]:
        raise ValueError(f"gated_input: resolution mismatch {t_next.shape} vs {e_coarse.shape}")
    return stage.gate(t_next, stage.filter(e_coarse))


class MultiEdgeRefiner(Module):
    """Cascade of up to three refiners at /2, /4 and /8 of the input size.

    Stage ``k`` starts from the encoder feature at its scale, plus the
    strided 1x1 bridge of the previous stage's output. With fewer than three
    stages the last output is bridged straight to /8; with none, the /8
    encoder feature passes through a single 1x1 projection.
    """

    DIVISORS = (2, 4, 8)

    def __init__(self, stage_channels: Sequence[int], edge_channels: int, n_stages: int,
                 seed_channels: int, rng, dtype=np.float64):
        if not 0 <= n_stages <= 3:
            raise ValueError(f"er_stages must be in 0..3, got {n_stages}")
        self.n_stages = n_stages
        ch = list(stage_channels)
        self.stages = [EdgeRefinerStage(seed_channels, ch[k], self.DIVISORS[k], rng, dtype)
                       for k in range(n_stages)]
        self.bridges = [StridedConv1x1(ch[k - 1], ch[k], self.DIVISORS[k] // self.DIVISORS[k - 1], rng, dtype)
                        for k in range(1, n_stages)]
        self.exit: Optional[Module] = None
        if n_stages == 0:
            self.exit = Conv1x1(edge_channels, edge_channels, rng, dtype=dtype)
        elif n_stages < 3:
            self.exit = StridedConv1x1(ch[n_stages - 1], edge_channels,
                                       8 // self.DIVISORS[n_stages - 1], rng, dtype)
        elif ch[2] != edge_channels:
            raise ValueError("third refiner width must equal the edge channel width")
        self.edge_head = Conv1x1(ch[0], 1, rng, dtype=dtype)

    def forward(self, feats: Sequence[Tensor], seed: Tensor, out_size: tuple[int, int]):
        """``feats`` = (f2, f4, f8_edge). Returns (edge feature at /8, edge logits at full size)."""
        f8 = feats[2]
        h, w = out_size
        prev = None
        first = None
        for k, stage in enumerate(self.stages):
            t_prev = feats[k] if k == 0 else self.bridges[k - 1](prev) + feats[k]
            e_stage = ops.bilinear_resize(seed, h // stage.divisor, w // stage.divisor)
            prev = stage(t_prev, e_stage)
            if k == 0:
                first = prev
        if self.n_stages == 0:
            out = self.exit(f8)
            first = feats[0]
        elif self.n_stages < 3:
            out = self.exit(prev) + f8
        else:
            out = prev
        edge_logits = ops.bilinear_resize(self.edge_head(first), h, w)
        return out, edge_logits


def multi_er_forward(features: dict, image: Tensor, refiner: MultiEdgeRefiner):
    """Run the cascade on ``{f2, f4, f8}`` with a Sobel seed from ``image``.

    Returns the /8 edge feature and the auxiliary full-resolution edge
    probability map.
    """
    h, w = image.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"multi_er_forward: input {h}x{w} is not divisible by 8")
    out, logits = refiner([features["f2"], features["f4"], features["f8"]], sobel_seed(image), (h, w))
    return out, ops.sigmoid(logits)
