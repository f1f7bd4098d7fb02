"""Dataset handling: PPM ingestion, synthetic texture generation, stratified
splits, and training-time augmentation.

Images are H x W x 3 uint8 throughout; all randomness flows from explicit
seeds or generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor


class DataError(ValueError):
    """Dataset contents or layout violate a precondition."""


# -- PPM P6 -------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Decode a binary P6 file (maxval 255) to H x W x 3 uint8."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise DataError(f"{path}: bad magic {raw[:2]!r}, expected b'P6'")
    # header is three whitespace-separated tokens after the magic,
    # with '#' comment lines allowed
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: non-numeric header tokens {tokens}") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise DataError(f"{path}: expected {need} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"write_ppm needs H x W x 3 uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resampling; returns float32."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    if img.ndim == 3:
        wy, wx = wy[:, None, None], wx[None, :, None]
    else:
        wy, wx = wy[:, None], wx[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    class_names: list
    source: str
    # (y0, x0, y1, x1) of the planted patch, synthetic datasets only
    patch_boxes: Optional[list] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= len(self.class_names):
            raise DataError("label outside class_names range")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class DatasetSplit:
    split_id: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    train_ratio: float
    seed: int


def to_batch(images: np.ndarray) -> Tensor:
    """uint8 (N, H, W, 3) -> float32 N x 3 x H x W scaled to [0, 1]."""
    x = np.ascontiguousarray(images.transpose(0, 3, 1, 2)).astype(np.float32) / 255.0
    return Tensor(x)


def load_image_dataset(root_dir, target_size) -> Dataset:
    """Class-per-subdirectory PPM layout; class index = lexicographic rank."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise DataError(f"{root}: need >= 2 class subdirectories, found {len(class_dirs)}")
    th, tw = target_size
    images, labels = [], []
    for idx, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        if not files:
            raise DataError(f"class directory '{d.name}' is empty")
        for p in files:
            img = read_ppm(p)
            if img.shape[:2] != (th, tw):
                img = np.clip(np.rint(bilinear_resize(img, th, tw)), 0, 255).astype(np.uint8)
            images.append(img)
            labels.append(idx)
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                   [d.name for d in class_dirs], source="directory")


def synth_dataset(n_classes: int, per_class: int, size, seed: int) -> Dataset:
    """Oriented-grating patches over speckle noise; one orientation per class.

    Class k's grating runs at k * 180 / n_classes degrees inside a randomly
    placed patch covering 25-50% of the image; the patch box is retained for
    localization checks. Deterministic under `seed`.
    """
    if n_classes < 2:
        raise DataError(f"need >= 2 classes, got {n_classes}")
    h, w = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    period = 8.0
    images, labels, boxes = [], [], []
    for k in range(n_classes):
        theta = math.pi * k / n_classes
        cs, sn = math.cos(theta), math.sin(theta)
        for _ in range(per_class):
            frac = math.sqrt(rng.uniform(0.25, 0.5))
            ph = max(2, round(h * frac))
            pw = max(2, round(w * frac))
            y0 = int(rng.integers(0, h - ph + 1))
            x0 = int(rng.integers(0, w - pw + 1))
            phase = rng.uniform(0.0, 2.0 * math.pi)
            img = 128.0 + rng.uniform(-40.0, 40.0, size=(h, w)).astype(np.float32)
            wave = 128.0 + 110.0 * np.sin(
                2.0 * math.pi * (xx * cs + yy * sn) / period + phase)
            img[y0:y0 + ph, x0:x0 + pw] = wave[y0:y0 + ph, x0:x0 + pw]
            gray = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            images.append(np.repeat(gray[:, :, None], 3, axis=2))
            labels.append(k)
            boxes.append((y0, x0, y0 + ph, x0 + pw))
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                   [f"class_{k:02d}" for k in range(n_classes)],
                   source="synthetic", patch_boxes=boxes)


def make_splits(dataset: Dataset, train_ratio: float, n_splits: int,
                seed: int) -> list:
    """Stratified random splits; split k draws from seed + k."""
    if not 0.0 < train_ratio < 1.0:
        raise DataError(f"train_ratio must be in (0, 1), got {train_ratio}")
    labels = dataset.labels
    for c, name in enumerate(dataset.class_names):
        if int((labels == c).sum()) < 2:
            raise DataError(f"class '{name}' has < 2 samples, cannot stratify")
    splits = []
    for k in range(n_splits):
        rng = np.random.default_rng(seed + k)
        train, test = [], []
        for c in range(len(dataset.class_names)):
            idx = np.flatnonzero(labels == c)
            perm = rng.permutation(idx)
            n_train = int(np.clip(round(train_ratio * len(idx)), 1, len(idx) - 1))
            train.extend(perm[:n_train])
            test.extend(perm[n_train:])
        splits.append(DatasetSplit(
            split_id=k,
            train_indices=np.sort(np.asarray(train, dtype=np.int64)),
            test_indices=np.sort(np.asarray(test, dtype=np.int64)),
            train_ratio=train_ratio,
            seed=seed + k))
    return splits


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentFlags:
    enabled: bool = True
    hflip: bool = True
    random_crop: bool = True
    crop_fraction: float = 0.875


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def random_crop_resize(image: np.ndarray, rng: np.random.Generator,
                       fraction: float) -> np.ndarray:
    h, w = image.shape[:2]
    ch = max(1, round(h * fraction))
    cw = max(1, round(w * fraction))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = image[y0:y0 + ch, x0:x0 + cw]
    return np.clip(np.rint(bilinear_resize(crop, h, w)), 0, 255).astype(np.uint8)


def augment(image: np.ndarray, rng: np.random.Generator,
            flags: AugmentFlags = AugmentFlags()) -> np.ndarray:
    """Mirror with probability 0.5, then crop-and-resize; train-time only."""
    if not flags.enabled:
        return image
    if flags.hflip and rng.random() < 0.5:
        image = hflip(image)
    if flags.random_crop:
        image = random_crop_resize(image, rng, flags.crop_fraction)
    return image
