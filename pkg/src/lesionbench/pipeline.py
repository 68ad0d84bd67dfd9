"""Fan-out of a run configuration over (backbone, strategy, fold).

Each run trains in a hidden scratch directory and is renamed into place only
once every artifact is written. A failure leaves ``error.json`` and nothing
else, so a run directory is always either complete or an error record.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import keras
import numpy as np

from .augment import AugmentationSpec, AugmentedSet, build_paper_spec, expand
from .backbones import build_backbone, describe, preprocess_fn
from .config import RunConfig
from .data import (
    FoldPlan,
    Manifest,
    dedup,
    ingest_directory,
    load_manifest,
    make_run_splits,
    save_manifest,
    stratified_kfold,
)
from .metrics import PredictionSet, evaluate
from .report import fold_dir_name
from .transfer import (
    HeadSpec,
    TrainedModel,
    TransferConfig,
    attach_head,
    config_for_depth,
    load_rgb,
    manifest_batches,
    predict_scores,
    run_configuration,
    search_unfreeze_depth,
    augmented_batches,
)

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class ExperimentResult:
    root: Path
    completed: list[tuple[str, int]] = field(default_factory=list)
    failed: list[tuple[str, int]] = field(default_factory=list)
    skipped: list[tuple[str, int]] = field(default_factory=list)


def error_record(exc: BaseException, **context) -> dict:
    return {
        "error": type(exc).__name__,
        "message": str(exc),
        **context,
        "traceback": traceback.format_exception_only(type(exc), exc)[-1].strip(),
    }


def prepare_store(cfg: RunConfig, seed: int | None = None) -> tuple[Path, Manifest, FoldPlan]:
    """Create (or reopen) ``<output_dir>/<run_id>`` with its manifest and fold plan."""
    seed = cfg.seed if seed is None else seed
    root = Path(cfg.output_dir) / cfg.run_id(seed)
    root.mkdir(parents=True, exist_ok=True)
    stored = root / "config.cfg"
    if stored.exists() and stored.read_bytes() != cfg.source_bytes:
        raise PipelineError(f"{root} belongs to a different configuration")
    stored.write_bytes(cfg.source_bytes)

    if (root / "manifest.csv").exists():
        manifest = load_manifest(root / "manifest.csv")
    else:
        manifest = ingest_directory(cfg.dataset_root)
        if cfg.dedup_threshold >= 0:
            manifest = dedup(manifest, cfg.dedup_threshold)
        save_manifest(manifest, root / "manifest.csv")
    if (root / "foldplan.json").exists():
        plan = FoldPlan.load(root / "foldplan.json")
    else:
        plan = stratified_kfold(manifest, cfg.k, seed)
        plan.save(root / "foldplan.json")
    return root, manifest, plan


def intermediate_manifest(cfg: RunConfig, root: Path) -> Manifest | None:
    if cfg.intermediate_root is None or not any(s.needs_intermediate for s in cfg.strategies):
        return None
    path = root / "intermediate_manifest.csv"
    if path.exists():
        return load_manifest(path)
    m = ingest_directory(cfg.intermediate_root, class_names=None)
    save_manifest(m, path)
    return m


def augmented_fold(cfg: RunConfig, root: Path, manifest: Manifest, train_ids, fold: int, seed: int) -> AugmentedSet | None:
    """Augmented training images of one fold rotation, shared by every configuration."""
    if not cfg.augment:
        return None
    out = root / "augmented" / fold_dir_name(fold)
    lineage = out / "lineage.csv"
    if lineage.exists():
        aug = AugmentedSet.read_lineage(lineage, cfg.expansion_factor)
        if aug.source_ids() == set(train_ids) and len(aug) == len(train_ids) * cfg.expansion_factor:
            return aug
        shutil.rmtree(out)
    spec = AugmentationSpec(build_paper_spec().ops, cfg.expansion_factor)
    aug = expand(train_ids, manifest, spec, seed, out)
    aug.write_lineage(lineage)
    return aug


def resolve_configs(
    cfg: RunConfig, root: Path, manifest: Manifest, plan: FoldPlan, seed: int,
    intermediate: Manifest | None,
) -> list[TransferConfig]:
    """One TransferConfig per (backbone, strategy); U grids are searched on the
    first fold rotation's training and validation data."""
    out = []
    hp = cfg.hyperparams
    for b in cfg.backbones:
        desc = cfg.descriptor(b)
        for s in cfg.strategies:
            if not s.needs_u:
                out.append(TransferConfig(s, desc))
                continue
            grid = cfg.u_values(s, b)
            if len(grid) == 1:
                out.append(config_for_depth(s, desc, grid[0]))
                continue
            record = root / "u_search" / f"{b}-{s.value}.json"
            if record.exists():
                u = json.loads(record.read_text())["chosen_u"]
            else:
                splits = make_run_splits(plan, 0, manifest, cfg.val_fraction, seed)
                aug = augmented_fold(cfg, root, manifest, splits.train_ids, 0, seed)
                train = (augmented_batches(aug, manifest, desc, hp.batch_size, seed) if aug is not None
                         else manifest_batches(manifest, splits.train_ids, desc, hp.batch_size, True, seed))
                val = manifest_batches(manifest, splits.val_ids, desc, hp.batch_size)
                u, scores = search_unfreeze_depth(s, desc, grid, train, val, hp, seed, intermediate)
                record.parent.mkdir(parents=True, exist_ok=True)
                record.write_text(json.dumps(
                    {"backbone": b, "strategy": s.value, "grid": list(grid), "chosen_u": u,
                     "val_accuracy": {str(k): v for k, v in sorted(scores.items())}},
                    indent=2) + "\n")
            out.append(config_for_depth(s, desc, u))
    return out


def write_run_artifacts(run_dir: Path, tm: TrainedModel, preds: PredictionSet, split: dict) -> None:
    tm.save(run_dir)
    preds.write_csv(run_dir / "predictions.csv")
    report = evaluate(preds)
    (run_dir / "metrics.json").write_text(report.to_json())
    report.write_roc_csv(run_dir / "roc.csv")
    (run_dir / "split.json").write_text(json.dumps(split, indent=2) + "\n")


def train_one(
    tc: TransferConfig, fold: int, cfg: RunConfig, root: Path, manifest: Manifest, plan: FoldPlan,
    seed: int, intermediate: Manifest | None,
) -> bool:
    """Train and evaluate one (configuration, fold). Returns success."""
    final = root / "runs" / tc.name / fold_dir_name(fold)
    scratch = final.parent / f".{final.name}.partial"
    shutil.rmtree(scratch, ignore_errors=True)
    if final.exists():
        shutil.rmtree(final)
    try:
        splits = make_run_splits(plan, fold, manifest, cfg.val_fraction, seed)
        aug = augmented_fold(cfg, root, manifest, splits.train_ids, fold, seed)
        tm = run_configuration(tc, splits, aug, manifest, cfg.hyperparams, seed, intermediate, HeadSpec(cfg.dropout))
        test = manifest_batches(manifest, splits.test_ids, tc.backbone, cfg.hyperparams.batch_size)
        recs = manifest.by_id()
        preds = PredictionSet(
            list(splits.test_ids),
            [manifest.binary_label(recs[i]) for i in splits.test_ids],
            predict_scores(tm.model, test),
        )
        scratch.mkdir(parents=True)
        write_run_artifacts(scratch, tm, preds, splits.to_dict())
        os.replace(scratch, final)
        return True
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        logger.error("%s fold %d failed: %s", tc.name, fold, exc)
        shutil.rmtree(scratch, ignore_errors=True)
        final.mkdir(parents=True, exist_ok=True)
        rec = error_record(exc, config=tc.name, fold=fold)
        (final / "error.json").write_text(json.dumps(rec, indent=2) + "\n")
        return False
    finally:
        keras.backend.clear_session()


def run_experiment(cfg: RunConfig, seed: int | None = None, resume: bool = True) -> ExperimentResult:
    seed = cfg.seed if seed is None else seed
    root, manifest, plan = prepare_store(cfg, seed)
    intermediate = intermediate_manifest(cfg, root)
    result = ExperimentResult(root)
    try:
        configs = resolve_configs(cfg, root, manifest, plan, seed, intermediate)
    except Exception as exc:  # noqa: BLE001
        (root / "error.json").write_text(json.dumps(error_record(exc, stage="u-search"), indent=2) + "\n")
        raise
    for tc in configs:
        for fold in range(plan.k):
            done = root / "runs" / tc.name / fold_dir_name(fold) / "metrics.json"
            if resume and done.exists():
                result.skipped.append((tc.name, fold))
                continue
            ok = train_one(tc, fold, cfg, root, manifest, plan, seed, intermediate)
            (result.completed if ok else result.failed).append((tc.name, fold))
    return result


# --------------------------------------------------------------------------
# reloading trained runs


def load_trained(run_dir: str | os.PathLike) -> tuple[keras.Model, dict]:
    """Rebuild the classifier of a finished run and load its weights."""
    run_dir = Path(run_dir)
    phases = json.loads((run_dir / "phases.json").read_text())
    desc = describe(phases["backbone"], "none")
    shape = tuple(phases.get("input_shape") or desc.input_shape)
    desc = desc.with_input_size(shape[0])
    model = attach_head(build_backbone(desc))
    model.load_weights(run_dir / "model.weights.h5")
    return model, phases


def model_input(path: str | os.PathLike, backbone: str, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(resized uint8 image, preprocessed float input) as seen by the trained model."""
    rgb = load_rgb(path, size)
    return rgb, preprocess_fn(backbone)(rgb[None].astype(np.float32))[0]

