"""Full model assembly: range image -> tokens -> mixed sequence -> descriptor.

A scan's range image (1, H, W) runs through the vertical-conv backbone to a
(W, C) token sequence, through the stack of multi-direction mixing blocks,
and into the aggregation head, yielding one unit-norm descriptor per scan.
This module owns model configuration, initialization, checkpoint round-trips,
and the config-file encoding, so the trainer, embedder, and CLI all agree on
what "the model" is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import block as bk
from . import descriptor as dsc
from . import io
from . import tensor as tt
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class ModelConfig:
    h: int = 64  # range image rows
    w: int = 900  # range image columns
    stages: tuple = ()  # backbone plan; empty means the default halving plan
    spp_kernel: int = 5
    spp_depth: int = 3
    spp_mode: str = "concat"
    olm_blocks: int = 1
    olm_e: int = 0  # widened channels; 0 means 2x the token width
    olm_n: int = 16
    olm_conv_kernel: int = 3
    vlad_k: int = 64
    mlp_hidden: int = 1024
    out_dim: int = 256

    def __post_init__(self):
        if self.h < 2 or self.w < 2:
            raise ConfigError(f"sensor grid must be at least 2x2, got {self.h}x{self.w}")

    def backbone_config(self) -> bb.BackboneConfig:
        stages = tuple(tuple(s) for s in self.stages) or bb.default_stages(self.h)
        spp = bb.SppConfig(kernel=self.spp_kernel, depth=self.spp_depth, mode=self.spp_mode)
        cfg = bb.BackboneConfig(stages=stages, in_channels=1, spp=spp)
        cfg.height_trace(self.h)  # fail fast if the plan cannot flatten h rows
        return cfg

    @property
    def token_dim(self) -> int:
        return self.backbone_config().out_channels

    def olm_config(self, train_mode: bool = False) -> bk.OlmConfig:
        return bk.OlmConfig(d=self.token_dim, e=self.olm_e, n=self.olm_n,
                            l=self.olm_blocks, conv_kernel=self.olm_conv_kernel,
                            train_mode=train_mode)

    def vlad_config(self) -> dsc.VladConfig:
        return dsc.VladConfig(d=self.token_dim, k=self.vlad_k,
                              hidden=self.mlp_hidden, out=self.out_dim)


class ModelParams:
    def __init__(self, backbone: bb.BackboneParams, olm: bk.OlmParams,
                 gdg: dsc.GdgParams):
        self.backbone = backbone
        self.olm = olm
        self.gdg = gdg

    def named(self) -> dict:
        out = {}
        out.update(self.backbone.named("backbone"))
        out.update(self.olm.named("olm"))
        out.update(self.gdg.named("gdg"))
        return out


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        backbone=bb.init_backbone(rng, cfg.backbone_config()),
        olm=bk.init_olm(rng, cfg.olm_config()),
        gdg=dsc.init_gdg(rng, cfg.vlad_config()),
    )


def model_forward(x, params: ModelParams, cfg: ModelConfig,
                  rng: np.random.Generator = None, train: bool = False,
                  bypass_olm: bool = False) -> tt.Tensor:
    """(B, 1, H, W) scaled range images -> (B, out_dim) unit descriptors.

    train=True draws the per-block start offsets from rng (required then);
    eval needs no rng.  bypass_olm skips the mixing stack entirely, leaving
    the exactly shift-invariant backbone+aggregation path.
    """
    if train and rng is None:
        raise ContractError("training forward requires a random generator")
    if rng is None:
        rng = np.random.default_rng(0)
    tokens = bb.backbone_forward(x, params.backbone, cfg.backbone_config())
    if not bypass_olm:
        tokens = bk.olm_stack(tokens, params.olm, cfg.olm_config(train_mode=train), rng)
    return dsc.gdg_forward(tokens, params.gdg, cfg.vlad_config())


def prepare_batch(images) -> tt.Tensor:
    """Stack RangeImage objects into a (B, 1, H, W) network input batch."""
    arrays = [ri.network_input() for ri in images]
    return tt.Tensor(np.stack(arrays, axis=0))


def describe_images(images, params: ModelParams, cfg: ModelConfig,
                    bypass_olm: bool = False) -> np.ndarray:
    """Eval-mode descriptors for a list of RangeImage, one forward per scan."""
    rows = []
    for ri in images:
        out = model_forward(prepare_batch([ri]), params, cfg, bypass_olm=bypass_olm)
        rows.append(out.data[0])
    return np.stack(rows, axis=0)


# --------------------------------------------------------------------------
# checkpoints


def save_model(path, params: ModelParams) -> None:
    io.save_checkpoint(path, {name: t.data for name, t in params.named().items()})


def load_model(path, cfg: ModelConfig) -> ModelParams:
    arrays = io.load_checkpoint(path)
    params = init_model(cfg, seed=0)
    named = params.named()
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise ContractError(
            f"{path}: checkpoint does not match the model configuration"
            f" (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, t in named.items():
        if arrays[name].shape != t.data.shape:
            raise ContractError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                f"expected {t.data.shape}"
            )
        t.data = arrays[name]
    return params


# --------------------------------------------------------------------------
# config files


def model_config_pairs(cfg: ModelConfig):
    stages = tuple(tuple(s) for s in cfg.stages) or bb.default_stages(cfg.h)
    pairs = [("h", cfg.h), ("w", cfg.w)]
    pairs += [("stage", f"{c},{k},{s}") for c, k, s in stages]
    pairs += [
        ("spp_kernel", cfg.spp_kernel),
        ("spp_depth", cfg.spp_depth),
        ("spp_mode", cfg.spp_mode),
        ("olm_blocks", cfg.olm_blocks),
        ("olm_e", cfg.olm_e),
        ("olm_n", cfg.olm_n),
        ("olm_conv_kernel", cfg.olm_conv_kernel),
        ("vlad_k", cfg.vlad_k),
        ("mlp_hidden", cfg.mlp_hidden),
        ("out_dim", cfg.out_dim),
    ]
    return pairs


def save_model_config(path, cfg: ModelConfig) -> None:
    io.save_kv(path, model_config_pairs(cfg))


_INT_KEYS = {"h", "w", "spp_kernel", "spp_depth", "olm_blocks", "olm_e",
             "olm_n", "olm_conv_kernel", "vlad_k", "mlp_hidden", "out_dim"}


def model_config_from_pairs(pairs) -> ModelConfig:
    stages = []
    fields = {}
    for key, val in pairs:
        if key == "stage":
            parts = val.split(",")
            if len(parts) != 3:
                raise ContractError(f"stage line must be C,k,s, got {val!r}")
            try:
                stages.append(tuple(int(p) for p in parts))
            except ValueError:
                raise ContractError(f"stage line must be integers, got {val!r}")
        elif key in _INT_KEYS:
            try:
                fields[key] = int(val)
            except ValueError:
                raise ContractError(f"{key} must be an integer, got {val!r}")
        elif key == "spp_mode":
            fields[key] = val
        else:
            raise ContractError(f"unknown model config key {key!r}")
    if stages:
        fields["stages"] = tuple(stages)
    return ModelConfig(**fields)


def load_model_config(path) -> ModelConfig:
    return model_config_from_pairs(io.load_kv_pairs(path))
