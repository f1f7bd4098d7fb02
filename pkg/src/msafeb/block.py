"""Multi-scale attention feature extraction block.

Maps an N x K x H x W feature tensor to a flat feature vector by running
three dilated grouped convolutions at kernel sizes 1/3/5, a four-rate
dilated pyramid over each, an attention-gated 1x1 fusion of the pyramid
outputs with the input skip, and a BN + GAP aggregation, concatenated with
per-branch GAP vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import BatchNorm2d, Conv2d, ConfigError, ConvSpec, Dense, global_avg_pool
from .tensor import (Tensor, concat_channels, max_channels, mean_channels,
                     relu, reshape, sigmoid)


@dataclass(frozen=True)
class AttentionKind:
    """Which gating stage runs after the fusion conv."""

    variant: str = "channel_then_spatial"  # {identity, channel_gate, channel_then_spatial}
    reduction_ratio: int = 8
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.variant not in ("identity", "channel_gate", "channel_then_spatial"):
            raise ConfigError(f"unknown attention variant '{self.variant}'")
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be >= 1")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError("spatial_kernel must be odd (same padding)")


@dataclass(frozen=True)
class MsafebConfig:
    """Every hyperparameter of the block."""

    input_channels: int = 1920
    branch_kernels: tuple = (1, 3, 5)
    branch_filters: int = 480
    branch_dilation: int = 4
    branch_groups: int = 8
    aspp_rates: tuple = (1, 6, 12, 18)
    aspp_branch_channels: int = 120
    fusion_channels: int = 480
    attention: AttentionKind = field(default_factory=AttentionKind)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.branch_filters % self.branch_groups:
            raise ConfigError(
                f"branch_filters={self.branch_filters} must divide by "
                f"branch_groups={self.branch_groups}")
        if self.input_channels % self.branch_groups:
            raise ConfigError(
                f"input_channels={self.input_channels} must divide by "
                f"branch_groups={self.branch_groups}")
        if not self.aspp_rates:
            raise ConfigError("aspp_rates must be nonempty")
        if self.aspp_rates[0] != 1:
            raise ConfigError(f"first pyramid rate must be 1, got {self.aspp_rates[0]}")
        if any(a >= b for a, b in zip(self.aspp_rates, self.aspp_rates[1:])):
            raise ConfigError(f"aspp_rates must be strictly increasing: {self.aspp_rates}")
        if self.attention.variant != "identity" and \
                self.fusion_channels < self.attention.reduction_ratio:
            raise ConfigError(
                f"fusion_channels={self.fusion_channels} smaller than "
                f"reduction_ratio={self.attention.reduction_ratio}")

    @property
    def feature_length(self) -> int:
        return self.fusion_channels + len(self.branch_kernels) * self.branch_filters


def gap_branches(branch_feats) -> list:
    """Global average pooling of each branch map, in branch order."""
    return [global_avg_pool(f) for f in branch_feats]


class ChannelGate:
    """Squeeze (GAP) -> bottleneck dense pair -> sigmoid per-channel scale."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        hidden = channels // reduction
        self.squeeze = Dense(channels, hidden, rng)
        self.expand = Dense(hidden, channels, rng)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        n = x.dims[0]
        g = sigmoid(self.expand(relu(self.squeeze(global_avg_pool(x)))))
        return x * reshape(g, (n, self.channels, 1, 1))

    def parameters(self):
        return ([("squeeze." + k, v) for k, v in self.squeeze.parameters()]
                + [("expand." + k, v) for k, v in self.expand.parameters()])


class SpatialGate:
    """Channel mean+max maps -> k x k conv -> sigmoid per-position scale."""

    def __init__(self, kernel: int, rng: np.random.Generator):
        self.conv = Conv2d(ConvSpec(2, 1, kernel), rng)

    def __call__(self, x: Tensor) -> Tensor:
        maps = concat_channels([mean_channels(x), max_channels(x)])
        return x * sigmoid(self.conv(maps))

    def parameters(self):
        return [("conv." + k, v) for k, v in self.conv.parameters()]


class MsafebBlock:
    """Instantiated block; parameters draw from `rng` in a fixed order."""

    def __init__(self, cfg: MsafebConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.branches = [
            Conv2d(ConvSpec(cfg.input_channels, cfg.branch_filters, k,
                            dilation=cfg.branch_dilation, groups=cfg.branch_groups), rng)
            for k in cfg.branch_kernels]
        self.pyramids = [
            [Conv2d(ConvSpec(cfg.branch_filters, cfg.aspp_branch_channels,
                             1 if rate == 1 else 3,
                             dilation=rate), rng)
             for rate in cfg.aspp_rates]
            for _ in cfg.branch_kernels]
        fuse_in = cfg.input_channels + (len(cfg.branch_kernels)
                                        * len(cfg.aspp_rates) * cfg.aspp_branch_channels)
        self.fuse = Conv2d(ConvSpec(fuse_in, cfg.fusion_channels, 1), rng)
        kind = cfg.attention
        self.channel_gate = (ChannelGate(cfg.fusion_channels, kind.reduction_ratio, rng)
                             if kind.variant in ("channel_gate", "channel_then_spatial")
                             else None)
        self.spatial_gate = (SpatialGate(kind.spatial_kernel, rng)
                             if kind.variant == "channel_then_spatial" else None)
        self.bn = BatchNorm2d(cfg.fusion_channels, cfg.bn_momentum, cfg.bn_eps)

    # -- stages ------------------------------------------------------------

    def multi_scale(self, x: Tensor) -> list:
        """Three parallel dilated grouped convs + ReLU, one per kernel size."""
        return [relu(branch(x)) for branch in self.branches]

    def pyramid(self, branch_index: int, feat: Tensor) -> Tensor:
        """Four-rate dilated pyramid over one branch output, channel-concatenated."""
        convs = self.pyramids[branch_index]
        return concat_channels([relu(c(feat)) for c in convs])

    def attend(self, x: Tensor) -> Tensor:
        if self.channel_gate is not None:
            x = self.channel_gate(x)
        if self.spatial_gate is not None:
            x = self.spatial_gate(x)
        return x

    def fuse_attend(self, x: Tensor, pyramid_outs: list) -> Tensor:
        """Skip-concat (input first), 1x1 fusion conv + ReLU, then attention."""
        for k, p in enumerate(pyramid_outs):
            if p.dims[0] != x.dims[0] or p.dims[2:] != x.dims[2:]:
                raise ConfigError(
                    f"pyramid output {k} dims {p.dims} do not align with input {x.dims}")
        fused = relu(self.fuse(concat_channels([x] + list(pyramid_outs))))
        return self.attend(fused)

    def aggregate(self, attended: Tensor, train: bool) -> Tensor:
        """Batch-norm then global average pool."""
        return global_avg_pool(self.bn(attended, train))

    def forward(self, x: Tensor, train: bool = False,
                capture: Optional[dict] = None) -> Tensor:
        """Full block: returns N x (fusion + 3 * branch_filters) features.

        When `capture` is a dict, named intermediate maps are stored into it
        (keys listed by `activation_names`).
        """
        branch_feats = self.multi_scale(x)
        pyramid_outs = [self.pyramid(i, f) for i, f in enumerate(branch_feats)]
        pooled = gap_branches(branch_feats)
        attended = self.fuse_attend(x, pyramid_outs)
        aggregated = self.aggregate(attended, train)
        if capture is not None:
            for k, f in zip(self.cfg.branch_kernels, branch_feats):
                capture[f"branch_k{k}"] = f
            for k, p in zip(self.cfg.branch_kernels, pyramid_outs):
                capture[f"pyramid_k{k}"] = p
            capture["attended"] = attended
        return concat_channels([aggregated] + pooled)

    __call__ = forward

    def activation_names(self) -> list:
        names = [f"branch_k{k}" for k in self.cfg.branch_kernels]
        names += [f"pyramid_k{k}" for k in self.cfg.branch_kernels]
        names.append("attended")
        return names

    # -- parameter bookkeeping ----------------------------------------------

    def parameters(self):
        out = []
        for k, branch in zip(self.cfg.branch_kernels, self.branches):
            out += [(f"branch_k{k}.{n}", t) for n, t in branch.parameters()]
        for k, stack in zip(self.cfg.branch_kernels, self.pyramids):
            for rate, conv in zip(self.cfg.aspp_rates, stack):
                out += [(f"pyramid_k{k}.rate{rate}.{n}", t)
                        for n, t in conv.parameters()]
        out += [(f"fuse.{n}", t) for n, t in self.fuse.parameters()]
        if self.channel_gate is not None:
            out += [(f"attention.channel.{n}", t)
                    for n, t in self.channel_gate.parameters()]
        if self.spatial_gate is not None:
            out += [(f"attention.spatial.{n}", t)
                    for n, t in self.spatial_gate.parameters()]
        out += [(f"bn.{n}", t) for n, t in self.bn.parameters()]
        return out

    def buffers(self):
        return [(f"bn.{n}", b) for n, b in self.bn.buffers()]


def param_count(cfg: MsafebConfig) -> dict:
    """Analytic per-stage learnable-scalar counts; `total` must equal the
    enumerated size of an instantiated block exactly."""
    in_per_group = cfg.input_channels // cfg.branch_groups
    branch = sum(cfg.branch_filters * in_per_group * k * k + cfg.branch_filters
                 for k in cfg.branch_kernels)
    per_stack = sum(cfg.aspp_branch_channels * cfg.branch_filters
                    * (1 if rate == 1 else 9) + cfg.aspp_branch_channels
                    for rate in cfg.aspp_rates)
    aspp = len(cfg.branch_kernels) * per_stack
    fuse_in = cfg.input_channels + (len(cfg.branch_kernels)
                                    * len(cfg.aspp_rates) * cfg.aspp_branch_channels)
    fusion = cfg.fusion_channels * fuse_in + cfg.fusion_channels
    attention = 0
    kind = cfg.attention
    if kind.variant in ("channel_gate", "channel_then_spatial"):
        c, hidden = cfg.fusion_channels, cfg.fusion_channels // kind.reduction_ratio
        attention += c * hidden + hidden + hidden * c + c
    if kind.variant == "channel_then_spatial":
        attention += 2 * kind.spatial_kernel ** 2 + 1
    bn = 2 * cfg.fusion_channels
    return {
        "branch_convs": branch,
        "aspp": aspp,
        "fusion": fusion,
        "attention": attention,
        "batch_norm": bn,
        "total": branch + aspp + fusion + attention + bn,
    }


def enumerate_params(block: MsafebBlock) -> int:
    """Count learnable scalars by walking the instantiated block."""
    return sum(int(np.prod(t.dims)) for _, t in block.parameters())
