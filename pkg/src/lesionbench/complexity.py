"""Parameter/FLOP counting and runtime profiling of Keras models.

FLOP convention (batch size one, forward pass):

    Conv2D / Conv1D      2 * k_h * k_w * (C_in / groups) * C_out per output position, + bias adds
    DepthwiseConv2D      2 * k_h * k_w * depth_multiplier per output element, + bias adds
    SeparableConv2D      depthwise part + pointwise 1x1 part
    Dense                2 * in * out per leading position, + bias adds
    BatchNormalization   2 per element (fused scale and shift)
    Rescaling / Normalization   2 per element
    Add, Multiply, ...   (inputs - 1) per output element
    scaled residual add  2 per output element (InceptionResNetV2's a + s*b)
    Max/AveragePooling   k_h * k_w per output element
    GlobalAveragePooling 1 per input element (+1 per channel for the division)
    activations          1 per element
    reshape-like layers  0

Multiplies and adds are counted separately, so convolutions and dense layers
cost twice their multiply-accumulate count.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import keras
import numpy as np
from keras import layers

logger = logging.getLogger(__name__)

FLOP_CONVENTION = "2xMAC; batch 1; bias/BN/activation/pool/elementwise per module docstring"
COMPLEXITY_HEADER = (
    "model",
    "params_millions",
    "flops_giga",
    "train_sec_per_epoch",
    "disk_mb",
    "accel_mem_mb",
    "inference_sec",
    "input_shape",
)

_FREE = (
    layers.InputLayer,
    layers.ZeroPadding2D,
    layers.Reshape,
    layers.Flatten,
    layers.Dropout,
    layers.Concatenate,
    layers.Cropping2D,
    layers.Permute,
    layers.SpatialDropout2D,
)
_ELEMENTWISE = (layers.Add, layers.Multiply, layers.Subtract, layers.Average, layers.Maximum, layers.Minimum)
_ACTIVATIONS = (layers.Activation, layers.ReLU, layers.LeakyReLU, layers.PReLU, layers.ELU, layers.Softmax)


class ComplexityError(ValueError):
    pass


def count_params(model: keras.Model) -> int:
    """Trainable plus non-trainable parameters."""
    return int(sum(int(np.prod(w.shape)) for w in model.weights))


def _elems(shape: Sequence[int | None]) -> int:
    dims = list(shape[1:])
    if any(d is None for d in dims):
        raise ComplexityError(f"dynamic shape {tuple(shape)}; FLOPs need a static input shape")
    return int(np.prod(dims)) if dims else 1


def _shapes(t) -> list[tuple]:
    if isinstance(t, (list, tuple)):
        return [tuple(x.shape) for x in t]
    return [tuple(t.shape)]


def layer_flops(layer: keras.layers.Layer) -> int:
    in_shapes = _shapes(layer.input)
    out_shape = _shapes(layer.output)[0]
    out = _elems(out_shape)

    if isinstance(layer, _FREE):
        return 0
    if isinstance(layer, layers.SeparableConv2D):
        kh, kw = layer.kernel_size
        c_in = in_shapes[0][-1]
        positions = out // out_shape[-1]
        depthwise = 2 * kh * kw * c_in * layer.depth_multiplier * positions
        pointwise = 2 * c_in * layer.depth_multiplier * out
        return depthwise + pointwise + (out if layer.use_bias else 0)
    if isinstance(layer, layers.DepthwiseConv2D):
        kh, kw = layer.kernel_size
        return 2 * kh * kw * out + (out if layer.use_bias else 0)
    if isinstance(layer, (layers.Conv2D, layers.Conv1D)):
        k = int(np.prod(layer.kernel_size))
        c_in = in_shapes[0][-1]
        return 2 * k * (c_in // layer.groups) * out + (out if layer.use_bias else 0)
    if isinstance(layer, layers.Dense):
        n_in = in_shapes[0][-1]
        return 2 * n_in * out + (out if layer.use_bias else 0)
    if isinstance(layer, (layers.BatchNormalization, layers.LayerNormalization, layers.Rescaling, layers.Normalization)):
        return 2 * out
    if isinstance(layer, _ELEMENTWISE):
        return (len(in_shapes) - 1) * out
    if isinstance(layer, (layers.MaxPooling2D, layers.AveragePooling2D)):
        ph, pw = layer.pool_size
        return ph * pw * out
    if isinstance(layer, (layers.GlobalAveragePooling2D, layers.GlobalAveragePooling1D)):
        return _elems(in_shapes[0]) + in_shapes[0][-1]
    if isinstance(layer, (layers.GlobalMaxPooling2D, layers.GlobalMaxPooling1D)):
        return _elems(in_shapes[0])
    if isinstance(layer, _ACTIVATIONS):
        return out
    if isinstance(layer, keras.Model):
        return count_flops(layer)
    if type(layer).__name__ == "CustomScaleLayer":
        return 2 * out
    logger.warning("no FLOP rule for layer type %s (%s); counted as 0", type(layer).__name__, layer.name)
    return 0


def count_flops(model: keras.Model) -> int:
    for t in model.inputs:
        if any(d is None for d in t.shape[1:]):
            raise ComplexityError(f"model input {tuple(t.shape)} is dynamic; FLOPs need a static input shape")
    return int(sum(layer_flops(l) for l in model.layers))


# --------------------------------------------------------------------------
# runtime profile


@dataclass
class ComplexityReport:
    model: str
    params_millions: float
    flops_giga: float
    train_sec_per_epoch: float | None
    disk_mb: float | None
    accel_mem_mb: float | None
    inference_sec: float | None
    input_shape: tuple[int, int, int]
    raw: dict = field(default_factory=dict, repr=False)

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(round(float(v), 6))

        return [
            self.model,
            fmt(self.params_millions),
            fmt(self.flops_giga),
            fmt(self.train_sec_per_epoch),
            fmt(self.disk_mb),
            fmt(self.accel_mem_mb),
            fmt(self.inference_sec),
            "x".join(str(d) for d in self.input_shape),
        ]


def write_complexity_csv(reports: Iterable[ComplexityReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPLEXITY_HEADER)
        for r in reports:
            w.writerow(r.row())


def read_complexity_csv(path: str | os.PathLike) -> dict[str, ComplexityReport]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            num = lambda k: float(row[k]) if row[k] else None
            out[row["model"]] = ComplexityReport(
                row["model"],
                float(row["params_millions"]),
                float(row["flops_giga"]),
                num("train_sec_per_epoch"),
                num("disk_mb"),
                num("accel_mem_mb"),
                num("inference_sec"),
                tuple(int(d) for d in row["input_shape"].split("x")),
            )
    return out


def mean_seconds(samples: Sequence[float]) -> float:
    if not samples:
        raise ComplexityError("no timing samples")
    return float(statistics.fmean(samples))


def saved_size_mb(model: keras.Model, path: str | os.PathLike | None = None) -> float:
    """Size of the serialized ``.keras`` artifact in MiB (bytes / 2**20)."""
    if path is None:
        with tempfile.TemporaryDirectory() as tmp:
            return saved_size_mb(model, os.path.join(tmp, "model.keras"))
    model.save(path)
    return os.path.getsize(path) / 2**20


def accelerator_memory_mb() -> float | None:
    """Current accelerator allocation in MiB, or ``None`` on CPU-only hosts."""
    import tensorflow as tf

    gpus = tf.config.list_logical_devices("GPU")
    if not gpus:
        return None
    info = tf.config.experimental.get_memory_info(gpus[0].name)
    return info["current"] / 2**20


def time_inference(model: keras.Model, image: np.ndarray, reps: int = 300, warmup: int = 10) -> list[float]:
    batch = np.asarray(image, dtype=np.float32)[None]
    for _ in range(warmup):
        model(batch, training=False)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model(batch, training=False)
        samples.append(time.perf_counter() - t0)
    return samples


def time_training(model: keras.Model, train_stream, epochs: int = 3) -> list[float]:
    samples = []
    for _ in range(epochs):
        t0 = time.perf_counter()
        model.fit(train_stream, epochs=1, verbose=0)
        samples.append(time.perf_counter() - t0)
    return samples


def _variance_warning(name: str, samples: Sequence[float]) -> None:
    if len(samples) > 1:
        mu = statistics.fmean(samples)
        cv = statistics.stdev(samples) / mu if mu > 0 else 0.0
        if cv > 0.25:
            logger.warning("%s timings vary widely (cv=%.2f); the device may be busy", name, cv)


def measure_runtime_profile(
    model: keras.Model,
    train_stream,
    probe_image: np.ndarray,
    name: str = "",
    reps: int = 300,
    epochs: int = 3,
    warmup: int = 10,
    cpu_ok: bool = False,
) -> ComplexityReport:
    """Full complexity row: counts plus timed training, inference, disk and memory."""
    import tensorflow as tf

    if not tf.config.list_logical_devices("GPU") and not cpu_ok:
        raise ComplexityError("no accelerator found; pass cpu_ok=True to profile on CPU")
    mem = accelerator_memory_mb()
    disk = saved_size_mb(model)
    train = time_training(model, train_stream, epochs) if train_stream is not None and epochs > 0 else []
    infer = time_inference(model, probe_image, reps, warmup)
    _variance_warning("training", train)
    _variance_warning("inference", infer)
    shape = tuple(int(d) for d in model.inputs[0].shape[1:])
    return ComplexityReport(
        model=name or model.name,
        params_millions=count_params(model) / 1e6,
        flops_giga=count_flops(model) / 1e9,
        train_sec_per_epoch=mean_seconds(train) if train else None,
        disk_mb=disk,
        accel_mem_mb=mem,
        inference_sec=mean_seconds(infer),
        input_shape=shape,
        raw={"train_seconds": train, "inference_seconds": infer, "warmup": warmup, "flop_convention": FLOP_CONVENTION},
    )
