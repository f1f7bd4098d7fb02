"""Small trainable convolutional backbone producing K x H x W feature maps.

Stands in for a large pretrained feature extractor: a few stride-2
conv/BN/ReLU stages followed by a 1x1 projection to the requested channel
count. Spatial extent halves per stage (ceil division via same padding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm2d, Conv2d, ConfigError, ConvSpec
from .tensor import Tensor, relu


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64)
    out_channels: int = 64
    input_size: tuple = (64, 64)

    def __post_init__(self):
        if not self.stage_channels:
            raise ConfigError("need at least one stage")
        factor = 2 ** len(self.stage_channels)
        h, w = self.input_size
        if h % factor or w % factor:
            raise ConfigError(
                f"input size {self.input_size} not divisible by 2^{len(self.stage_channels)}")

    @property
    def feature_size(self) -> tuple:
        factor = 2 ** len(self.stage_channels)
        return (self.input_size[0] // factor, self.input_size[1] // factor)


class Backbone:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stages = []
        prev = 3
        for ch in cfg.stage_channels:
            conv = Conv2d(ConvSpec(prev, ch, 3, stride=2), rng)
            self.stages.append((conv, BatchNorm2d(ch)))
            prev = ch
        self.proj = Conv2d(ConvSpec(prev, cfg.out_channels, 1), rng)

    def forward(self, images: Tensor, train: bool = False) -> Tensor:
        h, w = self.cfg.input_size
        if images.data.ndim != 4 or images.dims[1] != 3 or images.dims[2:] != (h, w):
            raise ConfigError(
                f"expected N x 3 x {h} x {w} images, got {images.dims}")
        x = images
        for conv, bn in self.stages:
            x = relu(bn(conv(x), train))
        return self.proj(x)

    __call__ = forward

    def parameters(self):
        out = []
        for i, (conv, bn) in enumerate(self.stages):
            out += [(f"stage{i}.conv.{n}", t) for n, t in conv.parameters()]
            out += [(f"stage{i}.bn.{n}", t) for n, t in bn.parameters()]
        out += [(f"proj.{n}", t) for n, t in self.proj.parameters()]
        return out

    def buffers(self):
        out = []
        for i, (_, bn) in enumerate(self.stages):
            out += [(f"stage{i}.bn.{n}", b) for n, b in bn.buffers()]
        return out
