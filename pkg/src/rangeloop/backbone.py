"""Convolutional feature extractor for range images.

Every convolution has width-kernel 1 and vertical stride only, so column j
of the output depends on column j of the input alone: circularly shifting
the image columns shifts the feature sequence by exactly the same amount.
A stage plan compresses the image height to 1, leaving a (B, W, C) token
sequence; sequential pyramid pooling (chained same-length circular max
pools) then spreads horizontal context without breaking that equivariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import tensor as tt
from .errors import ConfigError


@dataclass(frozen=True)
class SppConfig:
    kernel: int = 5
    depth: int = 3
    mode: str = "concat"

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"pooling kernel must be odd, got {self.kernel}")
        if self.depth < 1:
            raise ConfigError(f"pooling depth must be >= 1, got {self.depth}")
        if self.mode not in ("concat", "add"):
            raise ConfigError(f"spp mode must be concat or add, got {self.mode!r}")


@dataclass(frozen=True)
class BackboneConfig:
    stages: Tuple[Tuple[int, int, int], ...]  # (out_channels, kernel_h, stride_h)
    in_channels: int = 1
    spp: SppConfig = field(default_factory=SppConfig)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for c, k, s in self.stages:
            if c < 1 or k < 1 or s < 1:
                raise ConfigError(f"invalid stage ({c}, {k}, {s})")

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]

    def height_trace(self, h: int) -> List[int]:
        """Heights after each stage; must end at exactly 1."""
        trace = [h]
        for _, k, s in self.stages:
            if k > trace[-1]:
                raise ConfigError(
                    f"stage plan dies at height {trace[-1]} < kernel {k}; trace so far {trace}"
                )
            trace.append((trace[-1] - k) // s + 1)
        if trace[-1] != 1:
            raise ConfigError(f"stage plan does not reach height 1: trace {trace}")
        return trace


def default_stages(h: int, c_final: int = 256) -> Tuple[Tuple[int, int, int], ...]:
    """Halving plan for power-of-two input heights: kernel 2, stride 2 per
    stage, channels doubling up to c_final (e.g. 64 rows: 1->16->...->256)."""
    n = 0
    hh = h
    while hh > 1:
        if hh % 2:
            raise ConfigError(f"no default plan for height {h}; provide stages explicitly")
        hh //= 2
        n += 1
    if n == 0:
        raise ConfigError("input height must exceed 1")
    stages = []
    for i in range(n):
        c = c_final if i == n - 1 else max(1, c_final // 2 ** (n - 2 - i))
        stages.append((c, 2, 2))
    return tuple(stages)


class BackboneParams:
    """Learned tensors for the stage convolutions and the SPP compressor."""

    def __init__(self, stage_weights, stage_biases, spp_w=None, spp_b=None):
        self.stage_weights = list(stage_weights)
        self.stage_biases = list(stage_biases)
        self.spp_w = spp_w
        self.spp_b = spp_b

    def named(self, prefix: str = "backbone") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.stage_weights, self.stage_biases)):
            out[f"{prefix}.s{i}.weight"] = w
            out[f"{prefix}.s{i}.bias"] = b
        if self.spp_w is not None:
            out[f"{prefix}.spp.weight"] = self.spp_w
            out[f"{prefix}.spp.bias"] = self.spp_b
        return out


def init_backbone(rng: np.random.Generator, cfg: BackboneConfig) -> BackboneParams:
    weights, biases = [], []
    c_in = cfg.in_channels
    for c_out, k, _ in cfg.stages:
        bound = 1.0 / np.sqrt(c_in * k)
        weights.append(
            tt.Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, 1)), requires_grad=True)
        )
        biases.append(tt.Tensor(np.zeros(c_out), requires_grad=True))
        c_in = c_out
    spp_w = spp_b = None
    if cfg.spp.mode == "concat":
        c = cfg.out_channels
        c_cat = (cfg.spp.depth + 1) * c
        bound = 1.0 / np.sqrt(c_cat)
        spp_w = tt.Tensor(rng.uniform(-bound, bound, size=(c, c_cat, 1)), requires_grad=True)
        spp_b = tt.Tensor(np.zeros(c), requires_grad=True)
    return BackboneParams(weights, biases, spp_w, spp_b)


def _bias_nchw(x: tt.Tensor, b: tt.Tensor) -> tt.Tensor:
    c = b.shape[0]
    return tt.add(x, tt.broadcast_to(tt.reshape(b, (1, c, 1, 1)), x.shape))


def _bias_ncm(x: tt.Tensor, b: tt.Tensor) -> tt.Tensor:
    c = b.shape[0]
    return tt.add(x, tt.broadcast_to(tt.reshape(b, (1, c, 1)), x.shape))


def _spp_channels_first(x: tt.Tensor, params: BackboneParams, cfg: SppConfig) -> tt.Tensor:
    """Pyramid pooling on a (B, C, M) stream."""
    levels = [x]
    for _ in range(cfg.depth):
        levels.append(tt.maxpool1d_circular(levels[-1], cfg.kernel))
    if cfg.mode == "add":
        out = levels[0]
        for lv in levels[1:]:
            out = tt.add(out, lv)
        return out
    cat = tt.concat(levels, axis=1)
    return _bias_ncm(tt.conv1d_circular(cat, params.spp_w), params.spp_b)


def spp_forward(seq: tt.Tensor, params: BackboneParams, cfg: SppConfig) -> tt.Tensor:
    """Pyramid pooling on a (B, M, D) token sequence."""
    x = tt.transpose(seq, (0, 2, 1))
    out = _spp_channels_first(x, params, cfg)
    return tt.transpose(out, (0, 2, 1))


def backbone_forward(x: tt.Tensor, params: BackboneParams, cfg: BackboneConfig) -> tt.Tensor:
    """(B, C_in, H, W) image batch -> (B, W, C) token sequence."""
    x = tt.as_tensor(x)
    if x.ndim != 4:
        raise ConfigError(f"backbone input must be (B, C, H, W), got {x.shape}")
    cfg.height_trace(x.shape[2])
    for (w, b), (_, _, s) in zip(
        zip(params.stage_weights, params.stage_biases), cfg.stages
    ):
        x = tt.silu(_bias_nchw(tt.conv_vertical(x, w, stride_h=s), b))
    bsz, c, _, m = x.shape
    seq = tt.reshape(x, (bsz, c, m))
    seq = _spp_channels_first(seq, params, cfg.spp)
    return tt.transpose(seq, (0, 2, 1))
