"""Model configuration, construction, forward pass and parameter accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..autodiff import Tensor, bilinear_resize
from ..errors import ConfigError, PaddingRequiredError, ShapeError
from .layers import Module, cast_module, count, init_modules, state_dict
from .networks import ASPPDecoder, ResNetEncoder, UNet

ARCHITECTURES = ("aspp", "unet")
DEFAULT_RATES = (12, 24, 36)
UNET_FILTERS = (16, 32, 32, 32)
ASPP_BLOCK = 32


@dataclass
class ModelConfig:
    num_classes: int = 2
    in_channels: int = 3
    architecture: str = "aspp"
    atrous_rates: Tuple[int, ...] = DEFAULT_RATES
    init: str = "random"
    seed: int = 0
    width: float = 1.0
    pool_branch: bool = True
    unet_filters: Tuple[int, ...] = UNET_FILTERS

    def __post_init__(self):
        self.atrous_rates = tuple(int(r) for r in self.atrous_rates)
        self.unet_filters = tuple(int(f) for f in self.unet_filters)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        rates = self.atrous_rates
        if not rates or any(r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"atrous_rates must be strictly increasing positive ints, got {rates}")
        if self.init not in ("random", "imported"):
            raise ConfigError(f"init must be 'random' or 'imported', got {self.init!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if not self.width > 0:
            raise ConfigError(f"width must be positive, got {self.width}")
        if len(self.unet_filters) != 4 or min(self.unet_filters) < 1:
            raise ConfigError(f"unet_filters must list four positive widths, got {self.unet_filters}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["atrous_rates"] = list(self.atrous_rates)
        d["unet_filters"] = list(self.unet_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParameterCount:
    encoder: int
    decoder: int
    total: int


class SegModel(Module):
    """Segmentation network with an ``encoder``/``decoder`` split of its parameter tree.

    For the U-Net the contracting path (input block, down blocks, bridge) counts
    as encoder and the expanding path plus classifier as decoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.architecture == "aspp":
            self.encoder = ResNetEncoder(config.in_channels, config.width)
            self.decoder = ASPPDecoder(self.encoder.out_channels, config.num_classes, config.atrous_rates,
                                       config.width, config.pool_branch)
            self.downsample_factor = 16
        else:
            self.net = UNet(config.in_channels, config.num_classes, config.unet_filters)
            self.downsample_factor = 16
        init_modules(self, np.random.default_rng(np.random.SeedSequence(int(config.seed))))

    @property
    def architecture(self) -> str:
        return self.config.architecture

    def encode(self, x: Tensor) -> Tensor:
        if self.architecture != "aspp":
            raise ConfigError("encode() is only defined for the aspp architecture")
        return self.encoder(x)

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 4:
            raise ShapeError(f"forward: batch must be 4-D (N, C, H, W), got rank {x.ndim}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"forward: channel axis has {x.shape[1]}, model expects {self.config.in_channels}")
        h, w = x.shape[2:]
        self.set_mode(mode)
        if self.architecture == "aspp":
            if h % ASPP_BLOCK or w % ASPP_BLOCK:
                raise PaddingRequiredError(
                    f"aspp input H, W must be multiples of {ASPP_BLOCK}, got {(h, w)}; pad the input first")
            logits = self.decoder(self.encoder(x))
            return bilinear_resize(logits, h, w)
        if h < 16 or w < 16:
            raise ShapeError(f"forward: unet needs H, W >= 16, got {(h, w)}")
        return self.net(x)

    def __call__(self, x: Tensor, mode: str = "eval") -> Tensor:
        return self.forward(x, mode)

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> Dict[str, np.ndarray]:
        return state_dict(self)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def astype(self, dtype) -> "SegModel":
        cast_module(self, dtype)
        return self


def build_model(config: ModelConfig) -> SegModel:
    config.validate()
    return SegModel(config)


def build_unet_baseline(config: ModelConfig) -> SegModel:
    if config.architecture != "unet":
        raise ConfigError("build_unet_baseline requires architecture='unet'")
    return SegModel(config)


def forward(model: SegModel, batch: Tensor, mode: str = "eval") -> Tensor:
    return model.forward(batch, mode)


def count_parameters(model: SegModel) -> ParameterCount:
    if model.architecture == "aspp":
        enc = count(model.encoder.named_parameters())
        dec = count(model.decoder.named_parameters())
    else:
        net = model.net
        enc = count(net.inc.named_parameters() + net.down.named_parameters() + net.bridge.named_parameters())
        dec = count(net.up.named_parameters() + net.classifier.named_parameters())
    total = count(model.named_parameters())
    assert total == enc + dec
    return ParameterCount(enc, dec, total)
