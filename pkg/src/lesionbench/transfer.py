"""Classifier construction and the seven transfer-learning strategies.

A classifier is ``input -> backbone (nested model named "backbone") -> GAP ->
dropout -> Dense(1, sigmoid)``. Freezing works on the backbone's flattened
layer list: ``set_unfrozen_suffix(model, U)`` makes the last U backbone
layers trainable and everything before them frozen. Frozen batch-norm layers
run in inference mode, so their moving statistics stay put as well.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import keras
import numpy as np
from keras import layers
from PIL import Image

from .augment import AugmentedSet
from .backbones import BackboneDescriptor, build_backbone, preprocess_fn
from .data import Manifest, SplitAssignment, stratified_holdout

logger = logging.getLogger(__name__)

HEAD_LAYERS = ("head_pool", "head_dropout", "head_dense")
HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


class TransferError(ValueError):
    pass


class Strategy(str, enum.Enum):
    NTL = "NTL"
    HAM_FFT = "HAM_FFT"
    IMG_WFT = "IMG_WFT"
    IMG_FFT = "IMG_FFT"
    IMG_FTU = "IMG_FTU"
    IMG_HAMFP_FTU = "IMG_HAMFP_FTU"
    IMG_HAMPP_FTU = "IMG_HAMPP_FTU"

    @property
    def needs_u(self) -> bool:
        return self in (Strategy.IMG_FTU, Strategy.IMG_HAMFP_FTU, Strategy.IMG_HAMPP_FTU)

    @property
    def needs_intermediate(self) -> bool:
        return self in (Strategy.HAM_FFT, Strategy.IMG_HAMFP_FTU, Strategy.IMG_HAMPP_FTU)

    @property
    def uses_pretrained(self) -> bool:
        return self.value.startswith("IMG")


@dataclass(frozen=True)
class HeadSpec:
    dropout_rate: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            raise TransferError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class TransferConfig:
    strategy: Strategy
    backbone: BackboneDescriptor
    unfreeze: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.strategy.needs_u:
            if self.unfreeze is None:
                raise TransferError(f"strategy {self.strategy.value} requires an unfreeze depth U")
            if not 0 < self.unfreeze <= self.backbone.total_layers:
                raise TransferError(f"U={self.unfreeze} outside (0, {self.backbone.total_layers}]")
        elif self.unfreeze is not None:
            raise TransferError(f"strategy {self.strategy.value} takes no unfreeze depth")

    @property
    def name(self) -> str:
        s = self.strategy.value.replace("_", "-")
        if self.strategy.needs_u:
            s = s.replace("FTU", f"FT{self.unfreeze}")
        return f"{self.backbone.name}-{s}"

    @property
    def short_name(self) -> str:
        """``<backbone>-<U>`` for strategies with an unfreeze depth, else the full name."""
        return f"{self.backbone.name}-{self.unfreeze}" if self.strategy.needs_u else self.name


@dataclass(frozen=True)
class TrainingHyperparams:
    lr_head: float = 1e-4
    lr_finetune: float = 1e-5
    beta_1: float = 0.9
    beta_2: float = 0.999
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 200
    head_max_epochs: int = 50
    intermediate_max_epochs: int = 200
    intermediate_val_fraction: float = 0.10

    def __post_init__(self) -> None:
        if min(self.lr_head, self.lr_finetune) <= 0:
            raise TransferError("learning rates must be positive")
        if self.patience < 1:
            raise TransferError("patience must be >= 1")
        if min(self.max_epochs, self.head_max_epochs, self.intermediate_max_epochs, self.batch_size) < 1:
            raise TransferError("epoch caps and batch size must be >= 1")


@dataclass
class PhaseRecord:
    name: str
    learning_rate: float
    trainable_backbone_layers: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1


@dataclass
class TrainedModel:
    model: keras.Model
    config: TransferConfig
    fold: int
    phases: list[PhaseRecord]
    weights_loaded: str

    @property
    def final_phase(self) -> PhaseRecord:
        return self.phases[-1]

    @property
    def history(self) -> list[dict]:
        return self.final_phase.history

    @property
    def best_epoch(self) -> int:
        return self.final_phase.best_epoch

    @property
    def stopped_epoch(self) -> int:
        return self.final_phase.stopped_epoch

    @property
    def best_val_accuracy(self) -> float:
        return max(h["val_acc"] for h in self.history)

    def save(self, run_dir: str | os.PathLike) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        self.model.save_weights(run_dir / "model.weights.h5")
        write_history_csv(self.history, run_dir / "history.csv")
        payload = {
            "config": self.config.name,
            "strategy": self.config.strategy.value,
            "backbone": self.config.backbone.name,
            "unfreeze": self.config.unfreeze,
            "input_shape": list(self.config.backbone.input_shape),
            "fold": self.fold,
            "weights_loaded": self.weights_loaded,
            "phases": [asdict(p) for p in self.phases],
        }
        (run_dir / "phases.json").write_text(json.dumps(payload, indent=2) + "\n")


def write_history_csv(history: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[k])) for k in HISTORY_HEADER[1:]])


# --------------------------------------------------------------------------
# model surgery


def attach_head(backbone: keras.Model, head: HeadSpec = HeadSpec()) -> keras.Model:
    inputs = keras.Input(shape=tuple(backbone.inputs[0].shape[1:]), name="image")
    x = backbone(inputs)
    x = layers.GlobalAveragePooling2D(name="head_pool")(x)
    x = layers.Dropout(head.dropout_rate, name="head_dropout")(x)
    out = layers.Dense(1, activation="sigmoid", name="head_dense")(x)
    return keras.Model(inputs, out, name="classifier")


def backbone_of(model: keras.Model) -> keras.Model:
    return model.get_layer("backbone")


def set_unfrozen_suffix(model: keras.Model, u: int) -> keras.Model:
    """Make exactly the last ``u`` backbone layers (plus the head) trainable."""
    backbone = backbone_of(model)
    n = len(backbone.layers)
    if not 0 <= u <= n:
        raise TransferError(f"unfreeze depth U={u} outside [0, {n}]")
    backbone.trainable = True
    for i, layer in enumerate(backbone.layers):
        layer.trainable = i >= n - u
    for name in HEAD_LAYERS:
        model.get_layer(name).trainable = True
    return model


def layer_digests(model: keras.Model) -> list[str]:
    """Per-layer SHA-256 of all weights (trainable and not), in layer order."""
    out = []
    for layer in model.layers:
        h = hashlib.sha256()
        for w in layer.weights:
            h.update(np.ascontiguousarray(keras.ops.convert_to_numpy(w)).tobytes())
        out.append(h.hexdigest())
    return out


# --------------------------------------------------------------------------
# data streams


def load_rgb(src: str | os.PathLike | np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Decode to RGB uint8 and resize bilinearly to ``size`` = (height, width)."""
    if isinstance(src, np.ndarray):
        im = Image.fromarray(np.asarray(src, dtype=np.uint8))
    else:
        with Image.open(src) as f:
            im = f.convert("RGB")
    if im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.Resampling.BILINEAR)
    return np.asarray(im, dtype=np.uint8)


class ImageBatches(keras.utils.PyDataset):
    """Batches of (preprocessed image, label) from file paths or in-memory arrays.

    Images are resized to ``size`` with bilinear filtering. Decoded images are
    cached when the whole set fits in ``cache_mb``.
    """

    def __init__(
        self,
        sources: Sequence[str | np.ndarray],
        labels: Sequence[int],
        size: tuple[int, int],
        preprocess: Callable[[np.ndarray], np.ndarray],
        batch_size: int = 32,
        shuffle: bool = False,
        seed: int = 0,
        ids: Sequence[str] | None = None,
        cache_mb: float = 512.0,
    ):
        super().__init__()
        if len(sources) != len(labels):
            raise TransferError("sources and labels differ in length")
        self.sources = list(sources)
        self.labels = np.asarray(labels)
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.sources))]
        self.size = tuple(size)
        self.preprocess = preprocess
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self.order = np.arange(len(self.sources))
        if shuffle:
            self.rng.shuffle(self.order)
        est_mb = len(self.sources) * self.size[0] * self.size[1] * 3 / 2**20
        self._cache: dict[int, np.ndarray] | None = {} if est_mb <= cache_mb else None

    def __len__(self) -> int:
        return int(np.ceil(len(self.sources) / self.batch_size))

    def _load(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        arr = load_rgb(self.sources[i], self.size)
        if self._cache is not None:
            self._cache[i] = arr
        return arr

    def __getitem__(self, idx: int):
        sel = self.order[idx * self.batch_size : (idx + 1) * self.batch_size]
        x = np.stack([self._load(i) for i in sel]).astype(np.float32)
        return self.preprocess(x), self.labels[sel].astype(np.float32)

    def on_epoch_end(self) -> None:
        if self.shuffle:
            self.rng.shuffle(self.order)


def _size(desc: BackboneDescriptor) -> tuple[int, int]:
    return desc.input_shape[0], desc.input_shape[1]


def manifest_batches(
    m: Manifest, ids: Sequence[str], desc: BackboneDescriptor, batch_size: int = 32,
    shuffle: bool = False, seed: int = 0, multiclass: bool = False,
) -> ImageBatches:
    recs = m.by_id()
    labels = [m.class_index(recs[i]) if multiclass else m.binary_label(recs[i]) for i in ids]
    return ImageBatches(
        [recs[i].path for i in ids], labels, _size(desc), preprocess_fn(desc.name),
        batch_size, shuffle, seed, ids=list(ids),
    )


def augmented_batches(
    aug: AugmentedSet, m: Manifest, desc: BackboneDescriptor, batch_size: int = 32, seed: int = 0
) -> ImageBatches:
    recs = m.by_id()
    sources = [it.image if it.image is not None else it.path for it in aug.items]
    labels = [m.binary_label(recs[it.source_id]) for it in aug.items]
    ids = [f"{it.source_id}#{it.replica}" for it in aug.items]
    return ImageBatches(sources, labels, _size(desc), preprocess_fn(desc.name), batch_size, True, seed, ids=ids)


# --------------------------------------------------------------------------
# training


class BestWeights(keras.callbacks.Callback):
    """Early stopping on validation accuracy with restoration of the best epoch.

    Training stops once ``patience`` epochs pass without a strict improvement;
    the weights of the first epoch reaching the best value are restored at the end.
    """

    def __init__(self, patience: int, monitor: str = "val_accuracy"):
        super().__init__()
        self.patience = patience
        self.monitor = monitor

    def on_train_begin(self, logs=None):
        self.best = -np.inf
        self.best_epoch = -1
        self.best_weights = None
        self.stopped_epoch = -1

    def on_epoch_end(self, epoch, logs=None):
        value = float((logs or {})[self.monitor])
        self.stopped_epoch = epoch
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.best_weights = self.model.get_weights()
        elif epoch - self.best_epoch >= self.patience:
            self.model.stop_training = True

    def on_train_end(self, logs=None):
        if self.best_weights is not None:
            self.model.set_weights(self.best_weights)


def _optimizer(lr: float, hp: TrainingHyperparams) -> keras.optimizers.Optimizer:
    return keras.optimizers.Adam(learning_rate=lr, beta_1=hp.beta_1, beta_2=hp.beta_2)


def fit_phase(
    model: keras.Model,
    name: str,
    train,
    val,
    lr: float,
    max_epochs: int,
    hp: TrainingHyperparams,
    trainable_backbone_layers: int,
    loss: str = "binary_crossentropy",
) -> PhaseRecord:
    metric = "accuracy" if loss == "binary_crossentropy" else "sparse_categorical_accuracy"
    model.compile(optimizer=_optimizer(lr, hp), loss=loss, metrics=[metric])
    stopper = BestWeights(hp.patience, monitor=f"val_{metric}")
    hist = model.fit(train, validation_data=val, epochs=max_epochs, callbacks=[stopper], verbose=0)
    h = hist.history
    rows = [
        {
            "epoch": e,
            "train_loss": float(h["loss"][e]),
            "train_acc": float(h[metric][e]),
            "val_loss": float(h["val_loss"][e]),
            "val_acc": float(h[f"val_{metric}"][e]),
        }
        for e in range(len(h["loss"]))
    ]
    logger.info("%s: %d epoch(s), best val acc %.4f at epoch %d", name, len(rows), stopper.best, stopper.best_epoch)
    return PhaseRecord(name, lr, trainable_backbone_layers, rows, stopper.best_epoch, stopper.stopped_epoch)


def pretrain_partial(
    model: keras.Model,
    u: int,
    intermediate: Manifest,
    hp: TrainingHyperparams,
    desc: BackboneDescriptor,
    seed: int = 0,
) -> PhaseRecord:
    """Train the last ``u`` backbone layers on a multi-class dataset under a
    temporary softmax head, then drop that head.

    With ``u`` equal to the backbone depth this is full intermediate pretraining.
    """
    if len(intermediate) == 0:
        raise TransferError("intermediate pretraining dataset is empty")
    backbone = backbone_of(model)
    n = len(backbone.layers)
    n_classes = len(intermediate.class_names)
    train_ids, val_ids = stratified_holdout(intermediate, hp.intermediate_val_fraction, seed)
    train = manifest_batches(intermediate, train_ids, desc, hp.batch_size, True, seed, multiclass=True)
    val = manifest_batches(intermediate, val_ids, desc, hp.batch_size, multiclass=True)

    inputs = keras.Input(shape=desc.input_shape)
    x = backbone(inputs)
    x = layers.GlobalAveragePooling2D(name="temp_pool")(x)
    x = layers.Dropout(0.2, name="temp_dropout")(x)
    out = layers.Dense(n_classes, activation="softmax", name="temp_head")(x)
    temp = keras.Model(inputs, out, name="intermediate_pretrain")

    backbone.trainable = True
    for i, layer in enumerate(backbone.layers):
        layer.trainable = i >= n - u
    name = "full-intermediate-pretrain" if u == n else "partial-intermediate-pretrain"
    return fit_phase(
        temp, name, train, val, hp.lr_head, hp.intermediate_max_epochs, hp, u,
        loss="sparse_categorical_crossentropy",
    )


def seed_everything(seed: int) -> None:
    import tensorflow as tf

    keras.utils.set_random_seed(seed)
    try:
        tf.config.experimental.enable_op_determinism()
    except Exception:  # pragma: no cover - older TF
        pass


def run_strategy(
    cfg: TransferConfig,
    train,
    val,
    hp: TrainingHyperparams = TrainingHyperparams(),
    seed: int = 0,
    intermediate: Manifest | None = None,
    head: HeadSpec = HeadSpec(),
    fold: int = 0,
) -> TrainedModel:
    """Execute the staging of ``cfg.strategy`` on prepared train/val streams."""
    s = cfg.strategy
    if s.needs_u and cfg.unfreeze is None:
        raise TransferError(f"strategy {s.value} requires U")
    if s.needs_intermediate and intermediate is None:
        raise TransferError(f"strategy {s.value} needs an intermediate pretraining dataset")
    seed_everything(seed)

    weights = cfg.backbone.weight_source if s.uses_pretrained else "none"
    desc = cfg.backbone.with_weights(weights)
    model = attach_head(build_backbone(desc), head)
    n = desc.total_layers
    phases: list[PhaseRecord] = []

    if s in (Strategy.HAM_FFT, Strategy.IMG_HAMFP_FTU):
        phases.append(pretrain_partial(model, n, intermediate, hp, desc, seed))
    elif s is Strategy.IMG_HAMPP_FTU:
        phases.append(pretrain_partial(model, cfg.unfreeze, intermediate, hp, desc, seed))

    def phase(name: str, u: int, lr: float, cap: int) -> None:
        set_unfrozen_suffix(model, u)
        phases.append(fit_phase(model, name, train, val, lr, cap, hp, u))

    if s is Strategy.NTL:
        phase("full-train", n, hp.lr_finetune, hp.max_epochs)
    elif s is Strategy.HAM_FFT:
        phase("full-fine-tune", n, hp.lr_finetune, hp.max_epochs)
    else:
        phase("head-train", 0, hp.lr_head, hp.head_max_epochs)
        if s is Strategy.IMG_FFT:
            phase("full-fine-tune", n, hp.lr_finetune, hp.max_epochs)
        elif s.needs_u:
            phase("suffix-fine-tune", cfg.unfreeze, hp.lr_finetune, hp.max_epochs)

    return TrainedModel(model, cfg, fold, phases, weights)


def run_configuration(
    cfg: TransferConfig,
    splits: SplitAssignment,
    augmented: AugmentedSet | None,
    manifest: Manifest,
    hp: TrainingHyperparams = TrainingHyperparams(),
    seed: int = 0,
    intermediate: Manifest | None = None,
    head: HeadSpec = HeadSpec(),
) -> TrainedModel:
    """Train one strategy on one fold rotation.

    ``augmented`` replaces the training ids when given (it must be generated
    from exactly ``splits.train_ids``); without it the raw training images are used.
    """
    desc = cfg.backbone
    if augmented is not None:
        if augmented.source_ids() != set(splits.train_ids):
            raise TransferError("augmented set does not match the split's training ids")
        train = augmented_batches(augmented, manifest, desc, hp.batch_size, seed)
    else:
        train = manifest_batches(manifest, splits.train_ids, desc, hp.batch_size, True, seed)
    val = manifest_batches(manifest, splits.val_ids, desc, hp.batch_size)
    return run_strategy(cfg, train, val, hp, seed, intermediate, head, splits.test_fold)


def predict_scores(model: keras.Model, stream: ImageBatches) -> np.ndarray:
    scores = [np.asarray(model(stream[i][0], training=False)).reshape(-1) for i in range(len(stream))]
    return np.clip(np.concatenate(scores), 0.0, 1.0) if scores else np.zeros(0)


def config_for_depth(strategy: Strategy | str, backbone: BackboneDescriptor, u: int) -> TransferConfig:
    """The configuration a U-parameterized strategy reduces to at depth ``u``."""
    strategy = Strategy(strategy)
    if u == 0:
        # a zero-length suffix fine-tune is head-only training
        return TransferConfig(Strategy.IMG_WFT, backbone)
    if u == backbone.total_layers and strategy is Strategy.IMG_FTU:
        return TransferConfig(Strategy.IMG_FFT, backbone)
    return TransferConfig(strategy, backbone, u)


def search_unfreeze_depth(
    strategy: Strategy | str,
    backbone: BackboneDescriptor,
    candidate_us: Sequence[int],
    train,
    val,
    hp: TrainingHyperparams = TrainingHyperparams(),
    seed: int = 0,
    intermediate: Manifest | None = None,
    trainer: Callable[..., TrainedModel] = run_strategy,
) -> tuple[int, dict[int, float]]:
    """Train one model per candidate U and return the U with the best validation
    accuracy (ties go to the smaller U) plus every candidate's score."""
    strategy = Strategy(strategy)
    if not candidate_us:
        raise TransferError("candidate U list is empty")
    bad = [u for u in candidate_us if not 0 <= u <= backbone.total_layers]
    if bad:
        raise TransferError(f"candidate U values outside [0, {backbone.total_layers}]: {bad}")

    scores: dict[int, float] = {}
    errors: dict[int, str] = {}
    for u in sorted(set(candidate_us)):
        cfg = config_for_depth(strategy, backbone, u)
        try:
            scores[u] = trainer(cfg, train, val, hp, seed, intermediate).best_val_accuracy
        except Exception as exc:  # noqa: BLE001 - one failed candidate must not sink the search
            logger.error("U=%d failed: %s", u, exc)
            errors[u] = str(exc)
    if not scores:
        raise TransferError(f"every candidate U failed: {errors}")
    best = max(scores.values())
    return min(u for u, v in scores.items() if v == best), scores
