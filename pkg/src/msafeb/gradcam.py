"""Gradient-weighted class activation maps over named model stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import bilinear_resize, write_ppm
from .model import Model
from .tensor import ShapeError, Tensor, tsum


@dataclass
class GradCamMap:
    values: np.ndarray  # (H, W) float32 in [0, 1]; max 1 unless identically zero
    target_class: int
    target_layer: str
    input_size: tuple


def grad_cam(model: Model, image: np.ndarray, target_class: int,
             target_layer: str = "attended") -> GradCamMap:
    """Saliency of `target_class` at a rank-4 stage of the model.

    Channel weights are the spatial means of the class logit's gradient at
    the stage; the map is the ReLU of the weighted channel sum, max-normalized
    (an identically zero map stays zero). Parameter gradients produced along
    the way are cleared before returning.
    """
    if not 0 <= target_class < model.n_classes:
        raise ValueError(
            f"class {target_class} out of range [0, {model.n_classes})")
    names = model.activation_names()
    if target_layer not in names:
        raise ValueError(
            f"unknown stage '{target_layer}'; valid stages: {', '.join(names)}")
    from .data import to_batch
    x = to_batch(image[None])
    capture: dict = {}
    logits = model.forward(x, train=False, capture=capture)
    act = capture[target_layer]
    if act.data.ndim != 4:
        raise ShapeError(f"stage '{target_layer}' is rank {act.data.ndim}, need 4")
    act.retain_grad()
    onehot = np.zeros(logits.dims, dtype=np.float32)
    onehot[0, target_class] = 1.0
    tsum(logits * Tensor(onehot)).backward()
    grads = act.grad[0]
    weights = grads.mean(axis=(1, 2))
    raw = np.maximum((weights[:, None, None] * act.data[0]).sum(axis=0), 0.0)
    peak = float(raw.max())
    values = (raw / peak if peak > 0.0 else np.zeros_like(raw)).astype(np.float32)
    for _, p in model.named_parameters():
        p.grad = None
    return GradCamMap(values, target_class, target_layer, image.shape[:2])


def render_heatmap(cam: GradCamMap, image: np.ndarray, out_path) -> None:
    """Blue-to-red overlay at alpha 0.5 on the grayscale image, as PPM P6."""
    h, w = image.shape[:2]
    up = np.clip(bilinear_resize(cam.values, h, w), 0.0, 1.0)
    color = np.stack([255.0 * up, np.zeros_like(up), 255.0 * (1.0 - up)], axis=2)
    img = image.astype(np.float32)
    gray = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    blend = 0.5 * color + 0.5 * gray[:, :, None]
    write_ppm(out_path, np.clip(np.rint(blend), 0, 255).astype(np.uint8))
