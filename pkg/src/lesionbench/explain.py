"""Grad-CAM heatmaps and overlays.

The explained layer is the last one producing a spatial (H, W > 1) 4-D
activation, searched inside the nested ``backbone`` when the model has one.
A few architectures end in a pooling layer and are pointed at their last
convolution instead (``CAM_LAYER_OVERRIDES``).

For a single sigmoid output the gradient is taken of the logit z (class 1)
or -z (class 0) rather than of sigmoid(z) and 1 - sigmoid(z). The two differ
by the positive factor sigmoid'(z), which max-normalization removes, but the
logit does not underflow on confident predictions.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import keras
import numpy as np
import tensorflow as tf
from PIL import Image

CAM_LAYER_OVERRIDES = {
    "VGG16": "block5_conv3",
    "VGG19": "block5_conv4",
}
OVERLAY_ALPHA = 0.4
COLORMAP = "jet"


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # (h, w) float64 in [0, 1]
    source_layer: str
    target_class: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in self.grid:
                w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class Overlay:
    image: np.ndarray  # (H, W, 3) uint8
    heatmap: Heatmap
    alpha: float

    def save_png(self, path: str | os.PathLike) -> None:
        Image.fromarray(self.image).save(path)


def read_heatmap_csv(path: str | os.PathLike, source_layer: str = "", target_class: int = 1) -> Heatmap:
    with open(path, newline="") as fh:
        grid = np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=np.float64)
    return Heatmap(grid, source_layer, target_class)


def _spatial(layer) -> bool:
    shape = getattr(getattr(layer, "output", None), "shape", None)
    return shape is not None and len(shape) == 4 and (shape[1] or 0) > 1 and (shape[2] or 0) > 1


def _host(model: keras.Model) -> keras.Model:
    try:
        inner = model.get_layer("backbone")
    except ValueError:
        return model
    return inner if isinstance(inner, keras.Model) else model


def cam_layer(model: keras.Model, backbone_name: str | None = None) -> str:
    """Name of the activation Grad-CAM explains (override table first, then auto-detection)."""
    host = _host(model)
    names = {l.name for l in host.layers}
    override = CAM_LAYER_OVERRIDES.get(backbone_name or "")
    if override in names:
        return override
    for layer in reversed(host.layers):
        if _spatial(layer):
            return layer.name
    raise ExplainError(f"model {model.name!r} has no convolutional layer with a spatial output")


def _sigmoid_dense(layer) -> bool:
    return isinstance(layer, keras.layers.Dense) and getattr(layer.activation, "__name__", "") == "sigmoid"


def _forward(model: keras.Model, layer_name: str, x):
    """(activations, output, output_is_logit) for one batch."""
    host = _host(model)
    last = model.layers[-1]
    logit = _sigmoid_dense(last)
    if host is model:
        tip = last.input if logit else model.outputs[0]
        acts, y = keras.Model(model.inputs, [model.get_layer(layer_name).output, tip])(x, training=False)
    else:
        acts, y = keras.Model(host.inputs, [host.get_layer(layer_name).output, host.outputs[0]])(x, training=False)
        names = [l.name for l in model.layers]
        # the classifier is a plain chain after the backbone
        for layer in model.layers[names.index(host.name) + 1 : -1]:
            y = layer(y, training=False)
        if not logit:
            y = last(y, training=False)
    if logit:
        y = tf.matmul(y, last.kernel) + (last.bias if last.use_bias else 0.0)
    return acts, y, logit


def grad_cam(
    model: keras.Model,
    image: np.ndarray,
    target_class: int,
    layer_name: str | None = None,
    backbone_name: str | None = None,
) -> Heatmap:
    """Grad-CAM for one preprocessed image shaped like the model input."""
    in_shape = tuple(model.inputs[0].shape[1:])
    image = np.asarray(image, dtype=np.float32)
    if image.shape != in_shape:
        raise ExplainError(f"image shape {image.shape} does not match model input {in_shape}")
    name = layer_name or cam_layer(model, backbone_name)
    host = _host(model)
    if name not in {l.name for l in host.layers}:
        raise ExplainError(f"layer {name!r} not found")
    if not _spatial(host.get_layer(name)):
        raise ExplainError(f"layer {name!r} does not produce a spatial 4-D activation")
    with tf.GradientTape() as tape:
        acts, out, is_logit = _forward(model, name, tf.convert_to_tensor(image[None]))
        if out.shape[-1] == 1:
            if target_class not in (0, 1):
                raise ExplainError(f"binary model: target_class must be 0 or 1, got {target_class}")
            s = out[0, 0]
            if target_class == 1:
                score = s
            else:
                score = -s if is_logit else 1.0 - s
        else:
            if not 0 <= target_class < out.shape[-1]:
                raise ExplainError(f"target_class {target_class} out of range for {out.shape[-1]} outputs")
            score = out[0, target_class]
    grads = tape.gradient(score, acts)
    if grads is None:
        raise ExplainError(f"class score is not differentiable w.r.t. layer {name!r}")
    a = acts[0].numpy().astype(np.float64)
    weights = grads[0].numpy().astype(np.float64).mean(axis=(0, 1))
    cam = np.maximum(a @ weights, 0.0)
    peak = cam.max()
    return Heatmap(cam / peak if peak > 0 else np.zeros_like(cam), name, int(target_class))


def upsample(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (pixel-centre alignment) of a 2-D grid to ``(height, width)``."""
    h, w = size
    up = Image.fromarray(np.asarray(grid, dtype=np.float32), mode="F").resize((w, h), Image.Resampling.BILINEAR)
    return np.clip(np.asarray(up, dtype=np.float64), 0.0, 1.0)


def colorize(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[COLORMAP](values)[..., :3]


def overlay(h: Heatmap, image: np.ndarray, alpha: float = OVERLAY_ALPHA) -> Overlay:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    base = img[..., :3].astype(np.float64)
    heat = colorize(upsample(h.grid, base.shape[:2])) * 255.0
    blended = (1.0 - alpha) * base + alpha * heat
    return Overlay(np.clip(np.rint(blended), 0, 255).astype(np.uint8), h, alpha)


def mass_in_box(h: Heatmap, image_shape: tuple[int, int], bbox: tuple[int, int, int, int]) -> float:
    """Fraction of upsampled heatmap mass inside ``bbox`` = (y0, x0, y1, x1), exclusive ends."""
    up = upsample(h.grid, image_shape)
    total = up.sum()
    if total <= 0:
        return 0.0
    y0, x0, y1, x1 = bbox
    return float(up[y0:y1, x0:x1].sum() / total)


def write_outputs(image_id: str, h: Heatmap, image: np.ndarray, out_dir: str | os.PathLike) -> tuple[str, str]:
    """Write ``<id>_cam.png`` (overlay) and ``<id>_cam.csv`` (raw grid)."""
    os.makedirs(out_dir, exist_ok=True)
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in image_id)
    png = os.path.join(out_dir, f"{safe}_cam.png")
    grid = os.path.join(out_dir, f"{safe}_cam.csv")
    overlay(h, image).save_png(png)
    h.write_csv(grid)
    return png, grid
