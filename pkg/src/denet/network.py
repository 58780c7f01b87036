"""Full dual-path model: conv encoder, Multi-ER edge path, fusion, decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from denet import ops
from denet.bim import BIM, BimOptions, CoAttentionFusion, ConcatFusion, MergedAttentionFusion
from denet.edge import MultiEdgeRefiner, sobel_seed
from denet.nn import Conv1x1, ConvNormAct, Module, param_total
from denet.tensor import Tensor

FUSION_MODES = ("bim", "co_attention", "merged_attention")
SEED_SOURCES = ("image", "features")
MASK_PRIOR = 0.01


@dataclass
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 32
    stage_channels: tuple[int, int, int] = (64, 128, 128)
    edge_channels: int = 128
    sem_channels: int = 512
    heads: int = 4
    er_stages: int = 3
    bim_enabled: bool = True
    fusion_mode: str = "bim"
    bim_local: bool = True
    bim_global: bool = True
    gaussian_bias: bool = True
    share_local: bool = False
    seed_source: str = "image"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.stage_channels = tuple(self.stage_channels)
        h, w = self.input_size
        if h % 8 or w % 8:
            raise ValueError(f"input_size {self.input_size} must be multiples of 8")
        if self.er_stages not in (0, 1, 2, 3):
            raise ValueError(f"er_stages must be 0..3, got {self.er_stages}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.seed_source not in SEED_SOURCES:
            raise ValueError(f"seed_source must be one of {SEED_SOURCES}")
        if self.edge_channels % self.heads:
            raise ValueError("edge_channels must be divisible by heads")
        if self.stage_channels[2] != self.edge_channels:
            raise ValueError("the /8 stage width must equal edge_channels")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)


class Encoder(Module):
    """Full-resolution stem and three stride-2 blocks (stand-in backbone)."""

    def __init__(self, cfg: NetworkConfig, rng, dtype):
        b = cfg.base_channels
        c2, c4, c8 = cfg.stage_channels
        self.stem = ConvNormAct(1, b, rng, dtype=dtype)
        self.block2 = [ConvNormAct(b, c2, rng, stride=2, dtype=dtype), ConvNormAct(c2, c2, rng, dtype=dtype)]
        self.block4 = [ConvNormAct(c2, c4, rng, stride=2, dtype=dtype), ConvNormAct(c4, c4, rng, dtype=dtype)]
        self.block8 = [ConvNormAct(c4, c8, rng, stride=2, dtype=dtype), ConvNormAct(c8, c8, rng, dtype=dtype)]
        self.edge_head = Conv1x1(c8, cfg.edge_channels, rng, dtype=dtype)
        self.sem_head = Conv1x1(c8, cfg.sem_channels, rng, dtype=dtype)

    def forward(self, image: Tensor) -> dict:
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"encoder: input {h}x{w} is not divisible by 8")
        f1 = self.stem(image)
        x = f1
        out = {"f1": f1}
        for name, block in (("f2", self.block2), ("f4", self.block4), ("f8", self.block8)):
            for layer in block:
                x = layer(x)
            out[name] = x
        out["f8_edge"] = self.edge_head(x)
        out["f8_sem"] = self.sem_head(x)
        return out


class Decoder(Module):
    """Three x2 bilinear upsampling steps, each a conv block plus an aligned skip."""

    def __init__(self, cfg: NetworkConfig, rng, dtype):
        b = cfg.base_channels
        c2, c4, _ = cfg.stage_channels
        w4, w2, w1 = 2 * b, b, max(b // 2, 1)
        self.up4 = ConvNormAct(cfg.edge_channels, w4, rng, dtype=dtype)
        self.skip4 = Conv1x1(c4, w4, rng, dtype=dtype)
        self.up2 = ConvNormAct(w4, w2, rng, dtype=dtype)
        self.skip2 = Conv1x1(c2, w2, rng, dtype=dtype)
        self.up1 = ConvNormAct(w2, w1, rng, dtype=dtype)
        self.skip1 = Conv1x1(b, w1, rng, dtype=dtype)
        self.refine = ConvNormAct(w1, w1, rng, dtype=dtype)
        self.head = Conv1x1(w1, 1, rng, dtype=dtype)
        # start from a small foreground prior: targets cover ~1% of pixels
        self.head.bias.data[:] = math.log(MASK_PRIOR / (1.0 - MASK_PRIOR))

    def forward(self, t: Tensor, feats: dict) -> Tensor:
        x = t
        for up, skip, key in ((self.up4, self.skip4, "f4"), (self.up2, self.skip2, "f2"),
                              (self.up1, self.skip1, "f1")):
            ref = feats[key]
            x = up(ops.bilinear_resize(x, *ref.shape[-2:])) + skip(ref)
        return self.head(self.refine(x))


class DENet(Module):
    def __init__(self, cfg: NetworkConfig):
        self.config = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng, dtype)
        seed_channels = 1 if cfg.seed_source == "image" else cfg.base_channels
        self.refiner = MultiEdgeRefiner(cfg.stage_channels, cfg.edge_channels, cfg.er_stages,
                                        seed_channels, rng, dtype)
        c_out = cfg.edge_channels
        if not cfg.bim_enabled:
            self.fusion = ConcatFusion(cfg.edge_channels, cfg.sem_channels, c_out, rng, dtype)
        elif cfg.fusion_mode == "bim":
            opts = BimOptions(cfg.bim_local, cfg.bim_global, cfg.gaussian_bias, cfg.share_local)
            self.fusion = BIM(cfg.edge_channels, cfg.sem_channels, c_out, cfg.heads, rng, opts, dtype=dtype)
        elif cfg.fusion_mode == "co_attention":
            self.fusion = CoAttentionFusion(cfg.edge_channels, cfg.sem_channels, c_out, cfg.heads, rng, dtype)
        else:
            self.fusion = MergedAttentionFusion(cfg.edge_channels, cfg.sem_channels, c_out, cfg.heads, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)

    def forward(self, image: Tensor) -> dict:
        """Mask and edge logits, both ``1 x H x W`` (per sample) and pre-sigmoid."""
        if image.dtype != self.config.np_dtype:
            image = Tensor(image.data.astype(self.config.np_dtype))
        h, w = image.shape[-2:]
        if (h, w) != tuple(self.config.input_size):
            raise ValueError(f"image size {(h, w)} does not match config input_size {self.config.input_size}")
        feats = self.encoder(image)
        seed_src = image if self.config.seed_source == "image" else feats["f1"]
        edge_feat, edge_logits = self.refiner([feats["f2"], feats["f4"], feats["f8_edge"]],
                                              sobel_seed(seed_src), (h, w))
        fused = self.fusion(edge_feat, feats["f8_sem"])
        mask_logits = self.decoder(fused, feats)
        return {"mask_logits": mask_logits, "edge_logits": edge_logits}


def build_model(cfg: NetworkConfig) -> DENet:
    return DENet(cfg)


def model_forward(model: DENet, image: Tensor) -> dict:
    return model(image)


def encoder_forward(model: DENet, image: Tensor) -> dict:
    f = model.encoder(image)
    return {"f2": f["f2"], "f4": f["f4"], "f8_edge": f["f8_edge"], "f8_sem": f["f8_sem"]}


def param_count(cfg: NetworkConfig) -> int:
    return param_total(DENet(cfg))


def shrunken_config(**overrides) -> NetworkConfig:
    """Tiny float64 configuration for end-to-end gradient checks."""
    base = dict(input_size=(16, 16), base_channels=4, stage_channels=(4, 8, 8), edge_channels=8,
                sem_channels=16, heads=2, dtype="float64", seed=0)
    base.update(overrides)
    return NetworkConfig(**base)
