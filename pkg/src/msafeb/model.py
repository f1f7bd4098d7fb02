"""Classifier assembly: backbone -> feature block -> dropout -> dense head.

The ablation twin replaces the block with plain global average pooling over
the backbone features.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .backbone import Backbone, BackboneConfig
from .block import AttentionKind, MsafebBlock, MsafebConfig
from .layers import ConfigError, Dense, dropout, global_avg_pool
from .tensor import Tensor


class Model:
    def __init__(self, backbone: Backbone, block: Optional[MsafebBlock],
                 classifier: Dense, n_classes: int, dropout_rate: float,
                 seed: int):
        self.backbone = backbone
        self.block = block
        self.classifier = classifier
        self.n_classes = n_classes
        self.dropout_rate = dropout_rate
        self.seed = seed

    def forward(self, images: Tensor, train: bool = False,
                rng: Optional[np.random.Generator] = None,
                capture: Optional[dict] = None) -> Tensor:
        feats = self.backbone(images, train)
        if capture is not None:
            capture["backbone"] = feats
        if self.block is not None:
            flat = self.block.forward(feats, train, capture)
        else:
            flat = global_avg_pool(feats)
        flat = dropout(flat, self.dropout_rate, train, rng)
        return self.classifier(flat)

    __call__ = forward

    def activation_names(self) -> list:
        names = ["backbone"]
        if self.block is not None:
            names += self.block.activation_names()
        return names

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        out = [(f"backbone.{n}", t) for n, t in self.backbone.parameters()]
        if self.block is not None:
            out += [(f"block.{n}", t) for n, t in self.block.parameters()]
        out += [(f"classifier.{n}", t) for n, t in self.classifier.parameters()]
        return out

    def named_buffers(self):
        out = [(f"backbone.{n}", b) for n, b in self.backbone.buffers()]
        if self.block is not None:
            out += [(f"block.{n}", b) for n, b in self.block.buffers()]
        return out

    def state_stages(self):
        """Fixed-order (name, mutable array) manifest for checkpoints."""
        return ([(n, t.data) for n, t in self.named_parameters()]
                + list(self.named_buffers()))

    def trainable_parameters(self, freeze_backbone: bool = False):
        params = self.named_parameters()
        if freeze_backbone:
            params = [(n, t) for n, t in params if not n.startswith("backbone.")]
        return [t for _, t in params]


def assemble_model(backbone_cfg: BackboneConfig,
                   msafeb_cfg: Optional[MsafebConfig],
                   n_classes: int, with_msafeb: bool, seed: int,
                   dropout_rate: float = 0.5) -> Model:
    """Build a freshly initialized model; identical seeds give bit-identical
    parameters."""
    if n_classes < 2:
        raise ConfigError(f"need >= 2 classes, got {n_classes}")
    if with_msafeb:
        if msafeb_cfg is None:
            raise ConfigError("with_msafeb requires a block config")
        if backbone_cfg.out_channels != msafeb_cfg.input_channels:
            raise ConfigError(
                f"backbone emits {backbone_cfg.out_channels} channels but block "
                f"expects {msafeb_cfg.input_channels}")
    rng = np.random.default_rng(seed)
    backbone = Backbone(backbone_cfg, rng)
    block = MsafebBlock(msafeb_cfg, rng) if with_msafeb else None
    feat_len = msafeb_cfg.feature_length if with_msafeb else backbone_cfg.out_channels
    classifier = Dense(feat_len, n_classes, rng)
    return Model(backbone, block, classifier, n_classes, dropout_rate, seed)


# -- config round-trip (checkpoint sidecars) -----------------------------------

def model_config(model: Model) -> dict:
    """Flat scalar/tuple dict sufficient to rebuild the architecture."""
    b = model.backbone.cfg
    seed = model.seed
    cfg = {
        "n_classes": model.n_classes,
        "with_msafeb": model.block is not None,
        "dropout_rate": model.dropout_rate,
        "seed": tuple(seed) if isinstance(seed, (list, tuple)) else int(seed),
        "backbone.stage_channels": tuple(b.stage_channels),
        "backbone.out_channels": b.out_channels,
        "backbone.input_size": tuple(b.input_size),
    }
    if model.block is not None:
        m = model.block.cfg
        cfg.update({
            "msafeb.input_channels": m.input_channels,
            "msafeb.branch_kernels": tuple(m.branch_kernels),
            "msafeb.branch_filters": m.branch_filters,
            "msafeb.branch_dilation": m.branch_dilation,
            "msafeb.branch_groups": m.branch_groups,
            "msafeb.aspp_rates": tuple(m.aspp_rates),
            "msafeb.aspp_branch_channels": m.aspp_branch_channels,
            "msafeb.fusion_channels": m.fusion_channels,
            "msafeb.attention.variant": m.attention.variant,
            "msafeb.attention.reduction_ratio": m.attention.reduction_ratio,
            "msafeb.attention.spatial_kernel": m.attention.spatial_kernel,
            "msafeb.bn_momentum": m.bn_momentum,
            "msafeb.bn_eps": m.bn_eps,
        })
    return cfg


def build_model_from_config(cfg: dict) -> Model:
    backbone_cfg = BackboneConfig(
        stage_channels=tuple(cfg["backbone.stage_channels"]),
        out_channels=int(cfg["backbone.out_channels"]),
        input_size=tuple(cfg["backbone.input_size"]))
    msafeb_cfg = None
    if cfg["with_msafeb"]:
        msafeb_cfg = MsafebConfig(
            input_channels=int(cfg["msafeb.input_channels"]),
            branch_kernels=tuple(cfg["msafeb.branch_kernels"]),
            branch_filters=int(cfg["msafeb.branch_filters"]),
            branch_dilation=int(cfg["msafeb.branch_dilation"]),
            branch_groups=int(cfg["msafeb.branch_groups"]),
            aspp_rates=tuple(cfg["msafeb.aspp_rates"]),
            aspp_branch_channels=int(cfg["msafeb.aspp_branch_channels"]),
            fusion_channels=int(cfg["msafeb.fusion_channels"]),
            attention=AttentionKind(
                variant=str(cfg["msafeb.attention.variant"]),
                reduction_ratio=int(cfg["msafeb.attention.reduction_ratio"]),
                spatial_kernel=int(cfg["msafeb.attention.spatial_kernel"])),
            bn_momentum=float(cfg["msafeb.bn_momentum"]),
            bn_eps=float(cfg["msafeb.bn_eps"]))
    seed = cfg["seed"]
    seed = list(seed) if isinstance(seed, (list, tuple)) else int(seed)
    return assemble_model(backbone_cfg, msafeb_cfg,
                          n_classes=int(cfg["n_classes"]),
                          with_msafeb=bool(cfg["with_msafeb"]),
                          seed=seed,
                          dropout_rate=float(cfg["dropout_rate"]))
