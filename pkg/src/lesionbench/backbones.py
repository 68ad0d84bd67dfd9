"""Registry of pretrained convolutional backbones.

Backbones are taken whole from ``keras.applications`` with their classifier
removed. ``total_layers`` (N) is the length of the backbone's flattened layer
list, input layer included, as produced by the pinned Keras version; the
unfreeze depth U always counts from the end of that list.

MobileNetV3 backbones keep the trailing 1x1 ``Conv_2`` projection (applied on
the spatial map) that TensorFlow 2.4 left outside the classifier, so their
parameter counts, FLOPs and feature widths match models built with it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Callable

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

import keras
import numpy as np
from keras import applications as apps
from keras import layers


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    input_shape: tuple[int, int, int]
    total_layers: int
    feature_channels: int
    weight_source: str = "imagenet"  # "none", "imagenet", or a saved backbone .weights.h5 file

    def __post_init__(self) -> None:
        if self.weight_source not in ("none", "imagenet") and not self.weight_source.endswith(".weights.h5"):
            raise BackboneError(
                f"weight source must be 'none', 'imagenet' or a .weights.h5 file, got {self.weight_source!r}"
            )
        if self.total_layers <= 0 or self.feature_channels <= 0:
            raise BackboneError("total_layers and feature_channels must be positive")

    def with_weights(self, source: str) -> "BackboneDescriptor":
        return replace(self, weight_source=source)

    def with_input_size(self, size: int) -> "BackboneDescriptor":
        """Same architecture at a different square resolution (for fast experiments)."""
        return replace(self, input_shape=(size, size, 3))


@dataclass(frozen=True)
class _Entry:
    builder: str | None
    size: int
    total_layers: int
    channels: int
    preprocess: str | None
    legacy_top: int = 0  # width of the extra 1x1 projection, MobileNetV3 only


# name: (keras builder, input size, N, C, preprocess module)
_REGISTRY: dict[str, _Entry] = {
    "VGG16": _Entry("VGG16", 224, 19, 512, "vgg16"),
    "VGG19": _Entry("VGG19", 224, 22, 512, "vgg19"),
    "ResNet50": _Entry("ResNet50", 224, 175, 2048, "resnet"),
    "ResNet101": _Entry("ResNet101", 224, 345, 2048, "resnet"),
    "ResNet50V2": _Entry("ResNet50V2", 224, 190, 2048, "resnet_v2"),
    "ResNet101V2": _Entry("ResNet101V2", 224, 377, 2048, "resnet_v2"),
    "InceptionV3": _Entry("InceptionV3", 224, 311, 2048, "inception_v3"),
    "InceptionV4": _Entry(None, 299, 1, 1536, None),
    "InceptionResNetV2": _Entry("InceptionResNetV2", 299, 780, 1536, "inception_resnet_v2"),
    "Xception": _Entry("Xception", 299, 132, 2048, "xception"),
    "DenseNet121": _Entry("DenseNet121", 224, 427, 1024, "densenet"),
    "DenseNet169": _Entry("DenseNet169", 224, 595, 1664, "densenet"),
    "DenseNet201": _Entry("DenseNet201", 224, 707, 1920, "densenet"),
    "MobileNetV2": _Entry("MobileNetV2", 224, 154, 1280, "mobilenet_v2"),
    "MobileNetV3Large": _Entry("MobileNetV3Large", 224, 189, 1280, None, legacy_top=1280),
    "MobileNetV3Small": _Entry("MobileNetV3Small", 224, 159, 1024, None, legacy_top=1024),
    "NASNetMobile": _Entry("NASNetMobile", 224, 769, 1056, "nasnet"),
    "EfficientNetB0": _Entry("EfficientNetB0", 224, 237, 1280, None),
    "EfficientNetB1": _Entry("EfficientNetB1", 240, 339, 1280, None),
    "EfficientNetB2": _Entry("EfficientNetB2", 260, 339, 1408, None),
    "EfficientNetB3": _Entry("EfficientNetB3", 300, 384, 1536, None),
    "EfficientNetB4": _Entry("EfficientNetB4", 380, 474, 1792, None),
    "EfficientNetB5": _Entry("EfficientNetB5", 456, 576, 2048, None),
}

BACKBONE_NAMES = tuple(_REGISTRY)


def _entry(name: str) -> _Entry:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise BackboneError(f"unknown backbone {name!r}; valid names: {', '.join(BACKBONE_NAMES)}") from None


def describe(name: str, weight_source: str = "imagenet") -> BackboneDescriptor:
    e = _entry(name)
    return BackboneDescriptor(name, (e.size, e.size, 3), e.total_layers, e.channels, weight_source)


def available(name: str) -> bool:
    return _entry(name).builder is not None


def preprocess_fn(name: str) -> Callable[[np.ndarray], np.ndarray]:
    """Canonical input normalization for the backbone, applied to float RGB in [0, 255]."""
    module = _entry(name).preprocess
    if module is None:
        # EfficientNet and MobileNetV3 normalize inside the network
        return lambda x: np.asarray(x, dtype=np.float32)
    fn = getattr(apps, module).preprocess_input
    return lambda x: fn(np.array(x, dtype=np.float32, copy=True))


def _legacy_mobilenet_v3(name: str, builder, shape, weights: str | None, width: int) -> keras.Model:
    base = builder(include_top=False, weights=weights, input_shape=shape, include_preprocessing=True)
    x = layers.Conv2D(width, 1, padding="same", use_bias=True, name="Conv_2")(base.output)
    x = layers.Activation("hard_swish", name="Conv_2_hard_swish")(x)
    model = keras.Model(base.input, x, name=name)
    if weights is not None:
        full = builder(include_top=True, weights=weights, input_shape=shape, include_preprocessing=True)
        model.get_layer("Conv_2").set_weights(full.get_layer("Conv_2").get_weights())
    return model


def build_backbone(desc: BackboneDescriptor) -> keras.Model:
    """Instantiate the headless backbone as a standalone functional model."""
    e = _entry(desc.name)
    if e.builder is None:
        raise BackboneError(f"{desc.name} has no implementation in keras.applications")
    builder = getattr(apps, e.builder)
    weights = "imagenet" if desc.weight_source == "imagenet" else None
    weights_file = desc.weight_source if desc.weight_source.endswith(".weights.h5") else None
    if weights_file is not None and not os.path.isfile(weights_file):
        raise BackboneError(f"backbone weights file not found: {weights_file}")
    try:
        if e.legacy_top:
            model = _legacy_mobilenet_v3(desc.name, builder, desc.input_shape, weights, e.legacy_top)
        else:
            model = builder(include_top=False, weights=weights, input_shape=desc.input_shape)
    except Exception as exc:
        if weights is not None:
            raise BackboneError(f"could not load ImageNet weights for {desc.name}: {exc}") from exc
        raise
    model.name = "backbone"
    if weights_file is not None:
        model.load_weights(weights_file)
    if len(model.layers) != desc.total_layers:
        raise BackboneError(
            f"{desc.name}: registry documents N={desc.total_layers} layers, keras built {len(model.layers)}"
        )
    return model


def feature_layer_name(backbone: keras.Model) -> str:
    """Last layer emitting a spatial (H, W > 1) 4-D activation."""
    for layer in reversed(backbone.layers):
        shape = getattr(layer, "output", None)
        shape = getattr(shape, "shape", None)
        if shape is not None and len(shape) == 4 and (shape[1] or 0) > 1 and (shape[2] or 0) > 1:
            return layer.name
    raise BackboneError("backbone has no spatial convolutional activation")
