import csv
import json

import keras
import numpy as np
import pytest

from lesionbench.backbones import build_backbone, describe
from lesionbench.data import stratified_kfold, make_run_splits
from lesionbench.transfer import (
    BestWeights,
    HeadSpec,
    PhaseRecord,
    Strategy,
    TrainedModel,
    TrainingHyperparams,
    TransferConfig,
    TransferError,
    attach_head,
    backbone_of,
    config_for_depth,
    layer_digests,
    manifest_batches,
    pretrain_partial,
    run_configuration,
    run_strategy,
    search_unfreeze_depth,
    set_unfrozen_suffix,
)

from conftest import SMALLEST, STANDIN_SIZE


def _small(weights="none"):
    return describe(SMALLEST, weights).with_input_size(STANDIN_SIZE)


# ---------------------------------------------------------------- configuration


def test_config_names():
    r50 = describe("ResNet50")
    c = TransferConfig(Strategy.IMG_FTU, r50, 141)
    assert c.name == "ResNet50-IMG-FT141" and c.short_name == "ResNet50-141"
    assert TransferConfig("IMG_HAMPP_FTU", r50, 20).name == "ResNet50-IMG-HAMPP-FT20"
    assert TransferConfig(Strategy.NTL, r50).short_name == "ResNet50-NTL"


def test_config_validation():
    r50 = describe("ResNet50")
    with pytest.raises(TransferError, match="requires an unfreeze depth"):
        TransferConfig(Strategy.IMG_FTU, r50)
    with pytest.raises(TransferError, match="outside"):
        TransferConfig(Strategy.IMG_FTU, r50, r50.total_layers + 1)
    with pytest.raises(TransferError, match="takes no unfreeze"):
        TransferConfig(Strategy.IMG_WFT, r50, 5)
    with pytest.raises(ValueError):
        TransferConfig("IMG_SOMETHING", r50)
    with pytest.raises(TransferError):
        TrainingHyperparams(patience=0)
    with pytest.raises(TransferError):
        HeadSpec(dropout_rate=1.0)


def test_degenerate_depths():
    r50 = describe("ResNet50")
    n = r50.total_layers
    assert config_for_depth("IMG_FTU", r50, 0).strategy is Strategy.IMG_WFT
    assert config_for_depth("IMG_FTU", r50, n).strategy is Strategy.IMG_FFT
    # with intermediate pretraining a full-depth U stays distinct
    assert config_for_depth("IMG_HAMPP_FTU", r50, n).unfreeze == n


def test_head_shape_and_param_increment():
    d = _small()
    bb = build_backbone(d)
    model = attach_head(bb)
    assert [l.name for l in model.layers] == ["image", "backbone", "head_pool", "head_dropout", "head_dense"]
    assert model.count_params() - bb.count_params() == d.feature_channels + 1
    assert model.output.shape[-1] == 1


def test_unfrozen_suffix():
    model = attach_head(build_backbone(_small()))
    bb = backbone_of(model)
    n = len(bb.layers)
    set_unfrozen_suffix(model, 0)
    assert not any(l.trainable for l in bb.layers)
    assert {w.path for w in model.trainable_weights} == {
        w.path for w in model.get_layer("head_dense").trainable_weights
    }
    set_unfrozen_suffix(model, 10)
    assert [l.trainable for l in bb.layers] == [False] * (n - 10) + [True] * 10
    with pytest.raises(TransferError):
        set_unfrozen_suffix(model, n + 1)


def test_temporary_head_size():
    # 7-class temporary head on a 2048-channel backbone: 2048*7 + 7
    d = describe("ResNet50")
    assert d.feature_channels * 7 + 7 == 14343
    dense = keras.layers.Dense(7)
    dense.build((None, d.feature_channels))
    assert dense.count_params() == 14343


# ---------------------------------------------------------------- early stopping


class _Stub:
    def __init__(self):
        self.w = [np.zeros(1)]
        self.stop_training = False

    def get_weights(self):
        return [a.copy() for a in self.w]

    def set_weights(self, w):
        self.w = [a.copy() for a in w]


def _drive(values, patience):
    cb = BestWeights(patience)
    stub = _Stub()
    cb.set_model(stub)
    cb.on_train_begin()
    ran = 0
    for e, v in enumerate(values):
        stub.w = [np.array([float(e)])]
        cb.on_epoch_end(e, {"val_accuracy": v})
        ran += 1
        if stub.stop_training:
            break
    cb.on_train_end()
    return cb, stub, ran


def test_best_weights_patience_and_restore():
    vals = [0.5, 0.6, 0.7, 0.65] + [0.7] * 20
    cb, stub, ran = _drive(vals, 10)
    assert cb.best_epoch == 2
    assert ran == 13  # epochs 3..12 bring no strict improvement
    assert stub.w[0][0] == 2.0


def test_best_weights_ties_keep_first_epoch():
    cb, stub, ran = _drive([0.8] * 30, 10)
    assert (cb.best_epoch, ran, stub.w[0][0]) == (0, 11, 0.0)


# ---------------------------------------------------------------- training (slow)

FAST = TrainingHyperparams(
    batch_size=16, patience=2, max_epochs=2, head_max_epochs=2, intermediate_max_epochs=1
)


@pytest.fixture(scope="module")
def streams(shape_root):
    _, m = shape_root
    plan = stratified_kfold(m, 5, seed=0)
    split = make_run_splits(plan, 0, m, 0.10, seed=0)
    d = _small()
    train = manifest_batches(m, split.train_ids, d, 16, shuffle=True, seed=0)
    val = manifest_batches(m, split.val_ids, d, 16)
    return m, split, train, val


@pytest.mark.slow
def test_wft_keeps_backbone(streams, standin_weights):
    _, _, train, val = streams
    d = _small(standin_weights)
    before = layer_digests(build_backbone(d))
    tm = run_strategy(TransferConfig(Strategy.IMG_WFT, d), train, val, FAST, seed=0)
    assert layer_digests(backbone_of(tm.model)) == before
    assert [p.name for p in tm.phases] == ["head-train"]
    assert tm.weights_loaded == standin_weights


@pytest.mark.slow
def test_partial_pretrain_keeps_prefix(intermediate_root, standin_weights):
    _, inter = intermediate_root
    d = _small(standin_weights)
    model = attach_head(build_backbone(d))
    before = layer_digests(backbone_of(model))
    rec = pretrain_partial(model, 10, inter, FAST, d, seed=0)
    after = layer_digests(backbone_of(model))
    n = len(before)
    assert after[: n - 10] == before[: n - 10]
    assert after[n - 10 :] != before[n - 10 :]
    assert rec.name == "partial-intermediate-pretrain" and rec.trainable_backbone_layers == 10
    # the temporary softmax head is discarded
    assert [l.name for l in model.layers][-1] == "head_dense"


@pytest.mark.slow
def test_hampp_phase_order(streams, intermediate_root, standin_weights):
    _, _, train, val = streams
    d = _small(standin_weights)
    tm = run_strategy(TransferConfig(Strategy.IMG_HAMPP_FTU, d, 12), train, val, FAST, 0, intermediate_root[1])
    assert [p.name for p in tm.phases] == ["partial-intermediate-pretrain", "head-train", "suffix-fine-tune"]
    assert [p.trainable_backbone_layers for p in tm.phases] == [12, 0, 12]
    assert tm.phases[1].learning_rate == FAST.lr_head and tm.phases[2].learning_rate == FAST.lr_finetune


@pytest.mark.slow
def test_intermediate_required(streams):
    _, _, train, val = streams
    with pytest.raises(TransferError, match="intermediate"):
        run_strategy(TransferConfig(Strategy.HAM_FFT, _small()), train, val, FAST)


@pytest.mark.slow
def test_first_epoch_loss_deterministic(streams):
    m, split, _, _ = streams
    hp = TrainingHyperparams(batch_size=16, patience=1, max_epochs=1)
    cfg = TransferConfig(Strategy.NTL, _small())
    a = run_configuration(cfg, split, None, m, hp, seed=7)
    b = run_configuration(cfg, split, None, m, hp, seed=7)
    assert a.history[0]["train_loss"] == b.history[0]["train_loss"]


@pytest.mark.slow
def test_save_writes_history_and_phases(streams, tmp_path):
    m, split, _, _ = streams
    tm = run_configuration(TransferConfig(Strategy.NTL, _small()), split, None, m, FAST, seed=0)
    tm.save(tmp_path)
    payload = json.loads((tmp_path / "phases.json").read_text())
    assert payload["config"] == "MobileNetV3Small-NTL" and payload["input_shape"] == [64, 64, 3]
    rows = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert len(rows) == len(tm.history) and set(rows[0]) >= {"epoch", "train_loss", "val_acc"}
    assert (tmp_path / "model.weights.h5").exists()


# ---------------------------------------------------------------- depth search


def _fake_trainer(table, fail=()):
    def trainer(cfg, train, val, hp, seed, intermediate):
        u = cfg.unfreeze or (0 if cfg.strategy is Strategy.IMG_WFT else cfg.backbone.total_layers)
        if u in fail:
            raise RuntimeError(f"boom {u}")
        rec = PhaseRecord("x", 1e-5, u, [{"val_acc": table[u]}])
        return TrainedModel(None, cfg, 0, [rec], "none")

    return trainer


def test_depth_search_tie_prefers_smaller():
    d = describe("ResNet50")
    best, scores = search_unfreeze_depth(
        "IMG_FTU", d, [141, 20, 0, 175], None, None, trainer=_fake_trainer({0: 0.7, 20: 0.8, 141: 0.8, 175: 0.75})
    )
    assert best == 20 and scores == {0: 0.7, 20: 0.8, 141: 0.8, 175: 0.75}


def test_depth_search_survives_single_failure():
    d = describe("ResNet50")
    best, scores = search_unfreeze_depth(
        "IMG_FTU", d, [10, 20], None, None, trainer=_fake_trainer({10: 0.9, 20: 0.8}, fail={10})
    )
    assert best == 20 and 10 not in scores


def test_depth_search_errors():
    d = describe("ResNet50")
    with pytest.raises(TransferError, match="every candidate"):
        search_unfreeze_depth("IMG_FTU", d, [10], None, None, trainer=_fake_trainer({}, fail={10}))
    with pytest.raises(TransferError, match="outside"):
        search_unfreeze_depth("IMG_FTU", d, [500], None, None)
    with pytest.raises(TransferError, match="empty"):
        search_unfreeze_depth("IMG_FTU", d, [], None, None)
