"""Binary diagnostic-test metrics, ROC/AUC, and cross-fold aggregation.

Conventions:
  * a score >= threshold is a positive prediction;
  * 0/0 ratios (e.g. sensitivity with no positives) evaluate to 0.0;
  * MCC with a zero denominator factor is 0 (the random-prediction value);
  * LR+ with specificity 1 and LR- with specificity 0 are undefined and
    stored as ``None`` (``null`` in JSON), never as infinities.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

METRIC_NAMES = (
    "accuracy",
    "sensitivity",
    "specificity",
    "precision",
    "npv",
    "mcc",
    "kappa",
    "lr_pos",
    "lr_neg",
    "f1",
    "auc",
)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricsError("confusion counts must be non-negative")
        if self.total == 0:
            raise MetricsError("confusion matrix is empty")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class PredictionSet:
    ids: list[str]
    labels: np.ndarray
    scores: np.ndarray
    threshold: float = 0.5

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.ids) == len(self.labels) == len(self.scores)):
            raise MetricsError("ids, labels and scores differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise MetricsError("prediction ids are not unique")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise MetricsError("labels must be 0 or 1")
        if np.any((self.scores < 0) | (self.scores > 1)) or np.any(np.isnan(self.scores)):
            raise MetricsError("scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_arrays(cls, labels: Sequence[int], scores: Sequence[float], threshold: float = 0.5) -> "PredictionSet":
        return cls([str(i) for i in range(len(labels))], labels, scores, threshold)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "true_label", "score"])
            for i, y, s in zip(self.ids, self.labels, self.scores):
                w.writerow([i, int(y), repr(float(s))])

    @classmethod
    def read_csv(cls, path: str | os.PathLike, threshold: float = 0.5) -> "PredictionSet":
        ids, labels, scores = [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                ids.append(row["image_id"])
                labels.append(int(row["true_label"]))
                scores.append(float(row["score"]))
        return cls(ids, labels, scores, threshold)


@dataclass
class MetricReport:
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    npv: float
    mcc: float
    kappa: float
    lr_pos: float | None
    lr_neg: float | None
    f1: float
    auc: float | None
    confusion: ConfusionMatrix
    p_o: float = 0.0
    p_e: float = 0.0
    roc: list[tuple[float, float, float]] = field(default_factory=list, repr=False)

    def scalars(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_json(self) -> str:
        payload = dict(self.scalars())
        payload["confusion"] = asdict(self.confusion)
        payload["kappa_terms"] = {"p_o": self.p_o, "p_e": self.p_e}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write_roc_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for fpr, tpr, thr in self.roc:
                w.writerow([repr(fpr), repr(tpr), "inf" if math.isinf(thr) else repr(thr)])


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_confusion(p: PredictionSet) -> ConfusionMatrix:
    if len(p) == 0:
        raise MetricsError("cannot build a confusion matrix from an empty prediction set")
    pred = p.scores >= p.threshold
    pos = p.labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def compute_metric_report(cm: ConfusionMatrix) -> MetricReport:
    """All threshold-based metrics; ``auc`` is left ``None``."""
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    n = cm.total
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    prec = _ratio(tp, tp + fp)
    npv = _ratio(tn, tn + fn)

    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0

    # raters: truth and prediction; n_c1 / n_c2 are their per-category counts
    p_o = (tp + tn) / n
    p_e = ((tp + fn) * (tp + fp) + (tn + fp) * (tn + fn)) / n**2
    kappa = (p_o - p_e) / (1 - p_e) if p_e != 1 else 0.0

    lr_pos = sens / (1 - spec) if spec != 1 else None
    lr_neg = (1 - sens) / spec if spec != 0 else None
    f1 = _ratio(2 * prec * sens, prec + sens)

    return MetricReport(
        accuracy=p_o,
        sensitivity=sens,
        specificity=spec,
        precision=prec,
        npv=npv,
        mcc=mcc,
        kappa=kappa,
        lr_pos=lr_pos,
        lr_neg=lr_neg,
        f1=f1,
        auc=None,
        confusion=cm,
        p_o=p_o,
        p_e=p_e,
    )


def compute_roc_auc(p: PredictionSet) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(fpr, tpr, threshold)`` and trapezoidal AUC.

    Equal scores share one threshold, so ties contribute a diagonal segment,
    i.e. half a pair each; the area is accumulated in integers and divided once.
    """
    y = p.labels
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC undefined: labels contain a single class")

    order = np.argsort(-p.scores, kind="mergesort")
    s = p.scores[order]
    ys = y[order]
    points = [(0.0, 0.0, math.inf)]
    twice_area = 0
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        dtp = int(ys[i:j].sum())
        dfp = (j - i) - dtp
        twice_area += dfp * (2 * tp + dtp)
        tp += dtp
        fp += dfp
        points.append((fp / n_neg, tp / n_pos, float(s[i])))
        i = j
    return points, twice_area / (2 * n_pos * n_neg)


def evaluate(p: PredictionSet) -> MetricReport:
    report = compute_metric_report(compute_confusion(p))
    if 0 < p.labels.sum() < len(p.labels):
        report.roc, report.auc = compute_roc_auc(p)
    return report


# --------------------------------------------------------------------------
# fold aggregation


@dataclass(frozen=True)
class Stat:
    mean: float | None
    std: float | None
    n: int

    def format(self, digits: int = 4) -> str:
        if self.mean is None:
            return "undefined"
        std = "nan" if self.std is None else f"{self.std:.{digits}f}"
        return f"{self.mean:.{digits}f} ± {std}"


@dataclass
class FoldAggregate:
    stats: dict[str, Stat]
    k: int

    def __getitem__(self, metric: str) -> Stat:
        return self.stats[metric]

    def to_dict(self) -> dict:
        return {m: {"mean": s.mean, "std": s.std} for m, s in self.stats.items()}

    @classmethod
    def from_dict(cls, d: Mapping, k: int = 0) -> "FoldAggregate":
        return cls({m: Stat(v["mean"], v["std"], k) for m, v in d.items()}, k)


def aggregate_folds(reports: Sequence[MetricReport] | Sequence[Mapping[str, float | None]], k: int | None = None) -> FoldAggregate:
    """Per-metric mean and sample (k-1) standard deviation across folds.

    Likelihood ratios are averaged as per-fold values; folds where a metric is
    undefined are left out of that metric's statistics.
    """
    rows = [r.scalars() if isinstance(r, MetricReport) else dict(r) for r in reports]
    k = len(rows) if k is None else k
    if k < 2 or len(rows) != k:
        raise MetricsError(f"aggregation needs k >= 2 reports, got {len(rows)} (k={k})")
    stats = {}
    for name in METRIC_NAMES:
        vals = np.array([r[name] for r in rows if r.get(name) is not None], dtype=np.float64)
        if len(vals) == 0:
            stats[name] = Stat(None, None, 0)
            continue
        std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
        stats[name] = Stat(float(np.mean(vals)), std, len(vals))
    return FoldAggregate(stats, k)
