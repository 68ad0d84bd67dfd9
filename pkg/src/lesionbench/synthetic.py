"""Synthetic blob-vs-ring images with known object bounding boxes."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Manifest, ingest_directory


@dataclass(frozen=True)
class ShapeSample:
    image: np.ndarray
    label: int  # 1 = blob, 0 = ring
    bbox: tuple[int, int, int, int]  # y0, x0, y1, x1 (exclusive)


RING_INNER = 0.7


def shape_image(size: int, blob: bool, rng: np.random.Generator, equal_area: bool = False) -> ShapeSample:
    """Textured background with either a filled disk ("blob") or an annulus ("ring").

    With ``equal_area`` the disk is shrunk to the annulus' area, so the amount
    of foreground colour no longer tells the classes apart and a classifier has
    to look at the shape itself.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    # the radius spread is narrow enough that the disk always covers more area
    # than any ring, which keeps the two classes linearly separable
    radius = rng.uniform(0.18, 0.22) * size
    cy, cx = rng.uniform(radius + 2, size - radius - 2, size=2)
    if blob and equal_area:
        radius *= np.sqrt(1 - RING_INNER**2)
    dist = np.hypot(yy - cy, xx - cx)
    mask = dist <= radius if blob else (dist <= radius) & (dist >= RING_INNER * radius)

    bg = rng.uniform(150, 200, size=3)
    fg = np.array([190.0, 60.0, 60.0]) + rng.uniform(-20, 20, size=3)
    img = np.empty((size, size, 3))
    img[:] = bg
    img += rng.normal(0, 6, size=(size, size, 1))
    img[mask] = fg + rng.normal(0, 6, size=(int(mask.sum()), 3))
    y0, y1 = int(np.floor(cy - radius)), int(np.ceil(cy + radius)) + 1
    x0, x1 = int(np.floor(cx - radius)), int(np.ceil(cx + radius)) + 1
    bbox = (max(y0, 0), max(x0, 0), min(y1, size), min(x1, size))
    return ShapeSample(np.clip(img, 0, 255).astype(np.uint8), int(blob), bbox)


def shape_dataset(n: int, size: int = 64, seed: int = 0, equal_area: bool = False) -> list[ShapeSample]:
    """``n`` samples alternating blob / ring."""
    rng = np.random.default_rng(seed)
    return [shape_image(size, i % 2 == 0, rng, equal_area) for i in range(n)]


def write_shape_dataset(
    root: str | os.PathLike, n: int, size: int = 64, seed: int = 0,
    class_names: tuple[str, str] = ("EM", "Confuser"),
) -> Manifest:
    """Write blobs under the positive class and rings under the negative, then ingest."""
    root = Path(root)
    for c in class_names:
        (root / c).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(shape_dataset(n, size, seed)):
        cls = class_names[0] if s.label == 1 else class_names[1]
        Image.fromarray(s.image).save(root / cls / f"img{i:04d}.png")
    return ingest_directory(root, class_names=class_names)


def write_multiclass_dataset(root: str | os.PathLike, n_per_class: int, n_classes: int = 7, size: int = 64, seed: int = 0) -> Manifest:
    """Small stand-in for an intermediate skin-lesion corpus: one tint per class."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for c in range(n_classes):
        d = root / f"class{c}"
        d.mkdir(parents=True, exist_ok=True)
        hue = np.array([40 + 200 * c / max(n_classes - 1, 1), 120, 220 - 180 * c / max(n_classes - 1, 1)])
        for i in range(n_per_class):
            s = shape_image(size, bool(i % 2), rng)
            img = s.image.astype(float)
            img = 0.6 * img + 0.4 * hue
            Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(d / f"img{i:04d}.png")
    return ingest_directory(root, class_names=None)


PRETEXT_CLASSES = ("square", "hollow_square", "triangle", "hollow_triangle", "cross", "stripes", "plain")


def pretext_image(size: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Shapes that are not disks or rings, for pretraining stand-in backbones."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    half = rng.uniform(0.15, 0.25) * size
    cy, cx = rng.uniform(half + 2, size - half - 2, size=2)
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if kind in ("square", "hollow_square"):
        mask = np.maximum(dy, dx) <= half
        if kind == "hollow_square":
            mask &= np.maximum(dy, dx) >= 0.6 * half
    elif kind in ("triangle", "hollow_triangle"):
        top = cy - half
        depth = (yy - top) / (2 * half)
        mask = (depth >= 0) & (depth <= 1) & (dx <= depth * half)
        if kind == "hollow_triangle":
            inner = (depth >= 0.35) & (depth <= 0.85) & (dx <= (depth - 0.2) * half * 0.8)
            mask &= ~inner
    elif kind == "cross":
        mask = ((dy <= 0.3 * half) & (dx <= half)) | ((dx <= 0.3 * half) & (dy <= half))
    elif kind == "stripes":
        period = rng.uniform(6, 12)
        mask = (np.sin(2 * np.pi * (xx * rng.uniform(-1, 1) + yy) / period) > 0)
    else:
        mask = np.zeros((size, size), bool)
    bg = rng.uniform(120, 220, size=3)
    fg = rng.uniform(20, 240, size=3)
    img = np.empty((size, size, 3))
    img[:] = bg
    img += rng.normal(0, 6, size=(size, size, 1))
    img[mask] = fg
    return np.clip(img, 0, 255).astype(np.uint8)


def pretext_dataset(n_per_class: int, size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for i in range(n_per_class):
        for c, kind in enumerate(PRETEXT_CLASSES):
            xs.append(pretext_image(size, kind, rng))
            ys.append(c)
    return np.stack(xs), np.array(ys)


def pretrain_stand_in(desc, out_path: str | os.PathLike, n_per_class: int = 400, epochs: int = 3, seed: int = 0) -> str:
    """Pretrain ``desc``'s backbone on the pretext shapes and save its weights.

    A substitute for ImageNet weights where those cannot be downloaded; the
    saved file is accepted as a backbone ``weight_source``.
    """
    import keras

    from .backbones import build_backbone, preprocess_fn

    keras.utils.set_random_seed(seed)
    x, y = pretext_dataset(n_per_class, desc.input_shape[0], seed)
    x = preprocess_fn(desc.name)(x.astype(np.float32))
    backbone = build_backbone(desc.with_weights("none"))
    inputs = keras.Input(desc.input_shape)
    feats = keras.layers.GlobalAveragePooling2D()(backbone(inputs))
    out = keras.layers.Dense(len(PRETEXT_CLASSES), activation="softmax")(feats)
    model = keras.Model(inputs, out)
    model.compile(keras.optimizers.Adam(1e-3), "sparse_categorical_crossentropy", metrics=["accuracy"])
    model.fit(x, y, batch_size=32, epochs=epochs, shuffle=True, verbose=0)
    recalibrate_batchnorm(backbone, x)
    backbone.save_weights(str(out_path))
    return str(out_path)


def recalibrate_batchnorm(model, x: np.ndarray, batch_size: int = 256) -> None:
    """Set every batch-norm layer's moving statistics to the statistics of ``x``.

    Short pretraining leaves slow moving averages near their initial values;
    one training-mode pass with momentum 0 replaces them.
    """
    import keras

    bns = [l for l in _all_layers(model) if isinstance(l, keras.layers.BatchNormalization)]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.momentum = 0.0
    model(x[:batch_size], training=True)
    for bn, m in zip(bns, saved):
        bn.momentum = m


def _all_layers(model):
    for layer in model.layers:
        yield layer
        if hasattr(layer, "layers"):
            yield from _all_layers(layer)
