"""Dataset ingestion, perceptual-hash deduplication and stratified splits.

The persisted forms are a manifest CSV (``id,path,label,source,phash``) and a
fold plan JSON (``{"k", "seed", "folds"}``); every downstream step reads those.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

POSITIVE_CLASS = "EM"
NEGATIVE_CLASS = "Confuser"
DEFAULT_CLASSES = (POSITIVE_CLASS, NEGATIVE_CLASS)
MANIFEST_HEADER = ("id", "path", "label", "source", "phash")


class DataError(ValueError):
    """Raised for degenerate or inconsistent datasets and split requests."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: str
    source: str = ""
    phash: int = 0


@dataclass
class Manifest:
    records: list[ImageRecord]
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    skipped: list[str] = field(default_factory=list, compare=False)

    def __post_init__(self) -> None:
        self.class_names = tuple(self.class_names)
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DataError(f"duplicate record id {rec.id!r}")
            if rec.label not in self.class_names:
                raise DataError(f"record {rec.id!r} has undeclared label {rec.label!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def positive_class(self) -> str:
        return self.class_names[0]

    def class_counts(self) -> dict[str, int]:
        counts = Counter(r.label for r in self.records)
        return {c: counts.get(c, 0) for c in self.class_names}

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def binary_label(self, rec: ImageRecord) -> int:
        """1 for the positive (first declared) class, 0 otherwise."""
        return int(rec.label == self.class_names[0])

    def class_index(self, rec: ImageRecord) -> int:
        return self.class_names.index(rec.label)

    def subset(self, ids: Iterable[str]) -> "Manifest":
        wanted = set(ids)
        return Manifest([r for r in self.records if r.id in wanted], self.class_names)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[tuple[str, ...], ...]

    def to_json(self) -> str:
        payload = {"k": self.k, "seed": self.seed, "folds": [list(f) for f in self.folds]}
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        payload = json.loads(text)
        folds = tuple(tuple(f) for f in payload["folds"])
        if len(folds) != payload["k"]:
            raise DataError(f"fold plan declares k={payload['k']} but holds {len(folds)} folds")
        return cls(k=int(payload["k"]), seed=int(payload["seed"]), folds=folds)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())

    @property
    def all_ids(self) -> list[str]:
        return [i for fold in self.folds for i in fold]


@dataclass(frozen=True)
class SplitAssignment:
    test_fold: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    val_fraction: float = 0.10

    def to_dict(self) -> dict:
        return {
            "test_fold": self.test_fold,
            "val_fraction": self.val_fraction,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitAssignment":
        return cls(
            test_fold=int(d["test_fold"]),
            train_ids=tuple(d["train_ids"]),
            val_ids=tuple(d["val_ids"]),
            test_ids=tuple(d["test_ids"]),
            val_fraction=float(d["val_fraction"]),
        )


# --------------------------------------------------------------------------
# perceptual hashing


def dhash(image: Image.Image | np.ndarray, hash_size: int = 8) -> int:
    """64-bit difference hash: sign of horizontal gradients on a 9x8 grayscale thumbnail."""
    if isinstance(image, np.ndarray):
        image = Image.fromarray(np.asarray(image, dtype=np.uint8))
    small = image.convert("L").resize((hash_size + 1, hash_size), Image.Resampling.LANCZOS)
    px = np.asarray(small, dtype=np.int16)
    bits = (px[:, 1:] > px[:, :-1]).ravel()
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def _try_decode(path: Path) -> Image.Image | None:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError):
        return None


def ingest_directory(
    root: str | os.PathLike,
    labeling: Mapping[str, str] | None = None,
    class_names: Sequence[str] | None = DEFAULT_CLASSES,
    source: str = "",
) -> Manifest:
    """Build a manifest from ``root/<subdir>/**`` image files.

    ``labeling`` maps subdirectory names to class names. With ``class_names``
    set to ``None`` every subdirectory becomes its own class (multi-class
    intermediate datasets); otherwise exactly the declared classes must be
    present, the first one being the positive class.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a readable directory")

    subdirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if labeling is None:
        if class_names is None:
            labeling = {d: d for d in subdirs}
        else:
            labeling = {c: c for c in class_names}
    if class_names is None:
        class_names = tuple(sorted(set(labeling.values())))
    class_names = tuple(class_names)
    if len(class_names) < 2:
        raise DataError("need at least two classes")

    missing = [d for d in labeling if d not in subdirs]
    if missing:
        raise DataError(f"class subdirectories not found under {root}: {missing}")
    unused = [d for d in subdirs if d not in labeling]
    if unused:
        logger.warning("ignoring unlabeled subdirectories: %s", unused)

    records: list[ImageRecord] = []
    skipped: list[str] = []
    for subdir in sorted(labeling):
        label = labeling[subdir]
        if label not in class_names:
            raise DataError(f"subdirectory {subdir!r} maps to undeclared class {label!r}")
        for path in sorted(p for p in (root / subdir).rglob("*") if p.is_file()):
            img = _try_decode(path)
            if img is None:
                skipped.append(str(path))
                continue
            rel = path.relative_to(root).as_posix()
            records.append(ImageRecord(rel, str(path), label, source or subdir, dhash(img)))

    if skipped:
        logger.warning("skipped %d non-image file(s)", len(skipped))
    manifest = Manifest(records, class_names, skipped=skipped)
    for cls, n in manifest.class_counts().items():
        if n == 0:
            raise DataError(f"class {cls!r} has zero images")
    return manifest


def dedup(m: Manifest, threshold: int = 0) -> Manifest:
    """Drop near-duplicates, keeping the earliest record of each group in manifest order."""
    kept: list[ImageRecord] = []
    if threshold == 0:
        seen: set[int] = set()
        for rec in m.records:
            if rec.phash not in seen:
                seen.add(rec.phash)
                kept.append(rec)
    else:
        hashes: list[int] = []
        for rec in m.records:
            if all(hamming(rec.phash, h) > threshold for h in hashes):
                hashes.append(rec.phash)
                kept.append(rec)
    dropped = len(m.records) - len(kept)
    if dropped:
        logger.info("dedup removed %d record(s)", dropped)
    return Manifest(kept, m.class_names)


# --------------------------------------------------------------------------
# persisted manifest


def save_manifest(m: Manifest, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in m.records:
            w.writerow([r.id, r.path, r.label, r.source, f"{r.phash:016x}"])
    # class order is meaningful (positive first) and cannot be inferred from rows
    Path(str(path) + ".classes").write_text("\n".join(m.class_names) + "\n")


def load_manifest(path: str | os.PathLike, class_names: Sequence[str] | None = None) -> Manifest:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        records = [
            ImageRecord(row["id"], row["path"], row["label"], row["source"], int(row["phash"], 16))
            for row in reader
        ]
    if class_names is None:
        sidecar = Path(str(path) + ".classes")
        if sidecar.exists():
            class_names = tuple(sidecar.read_text().split())
        else:
            labels = sorted({r.label for r in records})
            class_names = DEFAULT_CLASSES if set(labels) <= set(DEFAULT_CLASSES) else tuple(labels)
    return Manifest(records, tuple(class_names))


# --------------------------------------------------------------------------
# splitting


def stratified_kfold(m: Manifest, k: int, seed: int) -> FoldPlan:
    """Per-class shuffle then round-robin dealing into ``k`` folds.

    The dealing position carries over from one class to the next so that
    whole folds stay within one record of each other as well.
    """
    if k < 2:
        raise DataError("k must be at least 2")
    by_class: dict[str, list[str]] = {c: [] for c in m.class_names}
    for r in m.records:
        by_class[r.label].append(r.id)
    for cls, ids in by_class.items():
        if len(ids) < k:
            raise DataError(f"class {cls!r} has {len(ids)} member(s), fewer than k={k}")

    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for cls in m.class_names:
        ids = by_class[cls]
        order = rng.permutation(len(ids))
        for j in order:
            folds[pos % k].append(ids[j])
            pos += 1
    return FoldPlan(k=k, seed=seed, folds=tuple(tuple(f) for f in folds))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_run_splits(
    plan: FoldPlan,
    test_fold: int,
    m: Manifest,
    val_fraction: float = 0.10,
    seed: int = 0,
) -> SplitAssignment:
    """Hold out fold ``test_fold`` for testing and a stratified validation slice of the rest."""
    if not 0 <= test_fold < plan.k:
        raise DataError(f"test_fold {test_fold} out of range [0, {plan.k})")
    if not 0.0 < val_fraction < 1.0:
        raise DataError("val_fraction must lie strictly between 0 and 1")

    labels = {r.id: r.label for r in m.records}
    test_ids = plan.folds[test_fold]
    pool = [i for f, fold in enumerate(plan.folds) if f != test_fold for i in fold]
    by_class: dict[str, list[str]] = {c: [] for c in m.class_names}
    for i in pool:
        by_class[labels[i]].append(i)

    n_val = _round_half_up(val_fraction * len(pool))
    # largest-remainder apportionment keeps each class within one of its exact share
    exact = {c: val_fraction * len(ids) for c, ids in by_class.items()}
    alloc = {c: int(math.floor(v)) for c, v in exact.items()}
    short = n_val - sum(alloc.values())
    for c in sorted(exact, key=lambda c: (-(exact[c] - alloc[c]), m.class_names.index(c)))[:max(short, 0)]:
        alloc[c] += 1
    empty = [c for c, n in alloc.items() if n < 1]
    if empty:
        raise DataError(f"val_fraction {val_fraction} leaves no validation sample for class(es) {empty}")

    rng = np.random.default_rng([plan.seed, seed, test_fold])
    val: set[str] = set()
    for c in m.class_names:
        ids = by_class[c]
        pick = rng.choice(len(ids), size=alloc[c], replace=False)
        val.update(ids[j] for j in pick)

    return SplitAssignment(
        test_fold=test_fold,
        train_ids=tuple(i for i in pool if i not in val),
        val_ids=tuple(i for i in pool if i in val),
        test_ids=tuple(test_ids),
        val_fraction=val_fraction,
    )


def stratified_holdout(m: Manifest, fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Split a (possibly multi-class) manifest into stratified train / holdout id lists."""
    if not 0.0 < fraction < 1.0:
        raise DataError("holdout fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    hold: set[str] = set()
    for c in m.class_names:
        ids = [r.id for r in m.records if r.label == c]
        if not ids:
            continue
        n = min(max(1, _round_half_up(fraction * len(ids))), len(ids) - 1) if len(ids) > 1 else 0
        hold.update(ids[j] for j in rng.choice(len(ids), size=n, replace=False))
    train = [r.id for r in m.records if r.id not in hold]
    return train, [r.id for r in m.records if r.id in hold]
