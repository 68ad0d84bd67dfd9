"""Aggregation of finished runs into summaries, tables and figures.

Everything here reads the run directories and nothing else, so deleting the
generated files and calling :func:`regenerate` again reproduces them byte for
byte.

Result store layout (``<output_dir>/<run_id>/``)::

    config.cfg  manifest.csv  foldplan.json
    runs/<config>/fold<k>/   model.weights.h5 history.csv phases.json split.json
                             predictions.csv metrics.json roc.csv
                             (or error.json alone when the run failed)
    summary.json  summary_accuracy.csv  tables/  cd_diagram.svg  cd_result.json
    bubble_chart.svg (when a complexity.csv is supplied)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .complexity import COMPLEXITY_HEADER, ComplexityReport
from .data import FoldPlan, Manifest
from .metrics import METRIC_NAMES, FoldAggregate, MetricReport, PredictionSet, aggregate_folds, evaluate
from .stats import AccuracyMatrix, compare, render_cd_diagram
from .svg import SvgDoc

logger = logging.getLogger(__name__)

LOWER_IS_BETTER = frozenset({"lr_neg"})
RUN_ARTIFACTS = ("phases.json", "history.csv", "predictions.csv", "metrics.json", "roc.csv")
FOLDS_KEY = "_folds"


class ReportError(ValueError):
    pass


# --------------------------------------------------------------------------
# run store


@dataclass(frozen=True)
class RunRecord:
    config: str
    fold: int
    path: Path
    metrics: dict | None
    error: dict | None

    @property
    def complete(self) -> bool:
        return self.metrics is not None


def fold_dir_name(fold: int) -> str:
    return f"fold{fold}"


def scan_runs(root: str | os.PathLike) -> dict[str, dict[int, RunRecord]]:
    """Completed and failed runs under ``root/runs``, keyed by config then fold."""
    out: dict[str, dict[int, RunRecord]] = {}
    runs = Path(root) / "runs"
    if not runs.is_dir():
        return out
    for cdir in sorted(p for p in runs.iterdir() if p.is_dir()):
        for fdir in sorted(p for p in cdir.iterdir() if p.is_dir() and p.name.startswith("fold")):
            try:
                fold = int(fdir.name[4:])
            except ValueError:
                continue
            err = fdir / "error.json"
            if err.exists():
                rec = RunRecord(cdir.name, fold, fdir, None, json.loads(err.read_text()))
            elif all((fdir / a).exists() for a in RUN_ARTIFACTS):
                rec = RunRecord(cdir.name, fold, fdir, json.loads((fdir / "metrics.json").read_text()), None)
            else:
                rec = RunRecord(cdir.name, fold, fdir, None, {"error": "IncompleteRun", "message": "artifacts missing"})
            out.setdefault(cdir.name, {})[fold] = rec
    return out


def expected_folds(root: str | os.PathLike) -> int:
    plan = Path(root) / "foldplan.json"
    if not plan.exists():
        raise ReportError(f"{plan} not found; is this a result directory?")
    return FoldPlan.load(plan).k


def build_summary(root: str | os.PathLike) -> dict:
    """``{config: {metric: {mean, std}, "_folds": {completed, expected}}}``.

    Configurations with missing folds are aggregated over the folds that did
    finish (when at least two did) and carry their completion count.
    """
    k = expected_folds(root)
    summary = {}
    for config, folds in scan_runs(root).items():
        done = [folds[f].metrics for f in sorted(folds) if folds[f].complete]
        entry: dict = {}
        if len(done) >= 2:
            entry.update(aggregate_folds(done).to_dict())
        entry[FOLDS_KEY] = {"completed": len(done), "expected": k}
        summary[config] = entry
    return summary


def summary_to_json(summary: Mapping) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def is_complete(entry: Mapping) -> bool:
    f = entry.get(FOLDS_KEY, {})
    return f.get("completed") == f.get("expected")


def accuracy_rows(root: str | os.PathLike) -> list[tuple[str, int, float]]:
    """``(config, fold, accuracy)`` for every configuration whose folds all finished."""
    k = expected_folds(root)
    rows = []
    for config, folds in scan_runs(root).items():
        if sorted(f for f, r in folds.items() if r.complete) == list(range(k)):
            rows.extend((config, f, float(folds[f].metrics["accuracy"])) for f in range(k))
    return rows


def write_accuracy_csv(rows: Sequence[tuple[str, int, float]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "accuracy"])
        for model, fold, acc in rows:
            w.writerow([model, fold, repr(acc)])


# --------------------------------------------------------------------------
# tables


def _fmt_cell(mean, std, digits: int | None) -> str:
    if mean is None:
        return "undefined"
    if digits is None:
        m, s = repr(float(mean)), ("-" if std is None else repr(float(std)))
    else:
        m, s = f"{mean:.{digits}f}", ("-" if std is None else f"{std:.{digits}f}")
    return f"{m} ± {s}"


def parse_cell(cell: str) -> tuple[float | None, float | None]:
    cell = cell.strip().rstrip("*").strip()
    if cell == "undefined":
        return None, None
    m, s = (p.strip() for p in cell.split("±"))
    return float(m), (None if s == "-" else float(s))


def best_configs(summary: Mapping) -> dict[str, set[str]]:
    """Per metric, the configurations holding the best mean (ties all flagged)."""
    best: dict[str, set[str]] = {}
    for metric in METRIC_NAMES:
        vals = {c: e[metric]["mean"] for c, e in summary.items() if metric in e and e[metric]["mean"] is not None}
        if not vals:
            continue
        target = min(vals.values()) if metric in LOWER_IS_BETTER else max(vals.values())
        best[metric] = {c for c, v in vals.items() if v == target}
    return best


def _status(entry: Mapping) -> str:
    f = entry.get(FOLDS_KEY, {})
    if not f:
        return "ok"
    return "ok" if is_complete(entry) else f"INCOMPLETE {f['completed']}/{f['expected']}"


def metric_table_csv(summary: Mapping) -> str:
    """Configuration x metric grid of ``mean ± std`` cells; ``*`` marks the column best."""
    best = best_configs(summary)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "status", *METRIC_NAMES])
    for config in sorted(summary):
        e = summary[config]
        cells = []
        for metric in METRIC_NAMES:
            st = e.get(metric, {"mean": None, "std": None})
            cell = _fmt_cell(st["mean"], st["std"], None)
            cells.append(cell + " *" if config in best.get(metric, ()) else cell)
        w.writerow([config, _status(e), *cells])
    return buf.getvalue()


def parse_metric_table_csv(text: str) -> dict[str, dict[str, dict[str, float | None]]]:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out[row["config"]] = {}
        for metric in METRIC_NAMES:
            m, s = parse_cell(row[metric])
            out[row["config"]][metric] = {"mean": m, "std": s}
    return out


def _fixed_width(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths]), *(line(r) for r in rows)]) + "\n"


def metric_table_text(summary: Mapping, digits: int = 4) -> str:
    best = best_configs(summary)
    rows = []
    for config in sorted(summary):
        e = summary[config]
        cells = []
        for metric in METRIC_NAMES:
            st = e.get(metric, {"mean": None, "std": None})
            cell = _fmt_cell(st["mean"], st["std"], digits)
            cells.append(cell + "*" if config in best.get(metric, ()) else cell)
        rows.append([config, _status(e), *cells])
    return _fixed_width(["config", "status", *METRIC_NAMES], rows) + "* best value in column\n"


def complexity_table_csv(reports: Mapping[str, ComplexityReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPLEXITY_HEADER)
    for name in sorted(reports):
        w.writerow(reports[name].row())
    return buf.getvalue()


def complexity_table_text(reports: Mapping[str, ComplexityReport]) -> str:
    fmt = lambda v, d: "-" if v is None else f"{v:.{d}f}"
    rows = [
        [
            r.model,
            fmt(r.params_millions, 2),
            fmt(r.flops_giga, 3),
            fmt(r.train_sec_per_epoch, 1),
            fmt(r.disk_mb, 1),
            fmt(r.accel_mem_mb, 0),
            fmt(r.inference_sec, 4),
            "x".join(map(str, r.input_shape)),
        ]
        for r in (reports[n] for n in sorted(reports))
    ]
    return _fixed_width(list(COMPLEXITY_HEADER), rows)


def render_tables(summary: Mapping, complexity: Mapping[str, ComplexityReport] | None = None) -> dict[str, str]:
    """File name -> content for every table."""
    out = {"metrics.csv": metric_table_csv(summary), "metrics.txt": metric_table_text(summary)}
    if complexity:
        out["complexity.csv"] = complexity_table_csv(complexity)
        out["complexity.txt"] = complexity_table_text(complexity)
    return out


# --------------------------------------------------------------------------
# bubble chart


def _lookup(name: str, complexity: Mapping[str, ComplexityReport]) -> ComplexityReport | None:
    if name in complexity:
        return complexity[name]
    return complexity.get(name.split("-", 1)[0])


def render_bubble_chart(
    accuracy: Mapping[str, float],
    complexity: Mapping[str, ComplexityReport],
    title: str = "Accuracy vs FLOPs",
    max_radius: float = 28.0,
) -> str:
    """SVG bubble chart: log-FLOPs on x, accuracy on y, bubble area proportional to parameters.

    Models are matched to complexity rows by exact name, then by the backbone
    prefix of a configuration name. Models without a row are left out with a warning.
    """
    points = []
    for name in sorted(accuracy):
        c = _lookup(name, complexity)
        if c is None:
            logger.warning("no complexity entry for %s; omitted from the bubble chart", name)
            continue
        if c.flops_giga <= 0 or c.params_millions <= 0:
            logger.warning("non-positive FLOPs or parameters for %s; omitted from the bubble chart", name)
            continue
        points.append((name, float(c.flops_giga), float(accuracy[name]), float(c.params_millions)))
    if not points:
        raise ReportError("no model has both an accuracy and a complexity entry")

    width, height = 720.0, 480.0
    left, right, top, bottom = 70.0, 40.0, 40.0, 60.0
    lx = [math.log10(p[1]) for p in points]
    x_lo, x_hi = math.floor(min(lx)), math.ceil(max(lx))
    if x_hi == x_lo:
        x_hi += 1
    accs = [p[2] for p in points]
    y_lo = math.floor(min(accs) * 20 - 1) / 20
    y_hi = math.ceil(max(accs) * 20 + 1) / 20
    y_lo, y_hi = max(0.0, y_lo), min(1.0, y_hi)
    if y_hi <= y_lo:
        y_lo, y_hi = 0.0, 1.0
    px = lambda v: left + (math.log10(v) - x_lo) / (x_hi - x_lo) * (width - left - right)
    py = lambda v: height - bottom - (v - y_lo) / (y_hi - y_lo) * (height - top - bottom)
    p_max = max(p[3] for p in points)

    doc = SvgDoc(width, height, title)
    doc.metadata = {
        "columns": ["model", "flops_giga", "accuracy", "params_millions"],
        "rows": [[n, round(f, 10), round(a, 10), round(p, 10)] for n, f, a, p in points],
        "x_scale": "log10",
        "area": "proportional to params_millions",
    }
    doc.line(left, height - bottom, width - right, height - bottom)
    doc.line(left, top, left, height - bottom)
    for e in range(x_lo, x_hi + 1):
        x = px(10.0**e)
        doc.line(x, height - bottom, x, height - bottom + 5)
        doc.text(x, height - bottom + 18, f"{10.0 ** e:g}", 11.0, "middle")
    steps = int(round((y_hi - y_lo) / 0.05))
    for i in range(steps + 1):
        v = y_lo + 0.05 * i
        doc.line(left - 5, py(v), left, py(v))
        doc.text(left - 8, py(v) + 4, f"{v * 100:.0f}%", 11.0, "end")
    doc.text((left + width - right) / 2, height - 15, "FLOPs (G, log scale)", 12.0, "middle")
    doc.text(18, (top + height - bottom) / 2, "Accuracy", 12.0, "middle",
             transform=f"rotate(-90 18 {(top + height - bottom) / 2:.2f})")

    # large bubbles first so small ones stay visible
    for name, f, a, p in sorted(points, key=lambda t: (-t[3], t[0])):
        r = max_radius * math.sqrt(p / p_max)
        doc.circle(px(f), py(a), r, "#4c72b0", fill_opacity="0.45", stroke="#1f3b66", stroke_width="1")
    for name, f, a, p in points:
        doc.text(px(f), py(a) - 4, name, 10.0, "middle")
        doc.text(px(f), py(a) + 9, f"{f:.3g} G / {a * 100:.2f}% / {p:.2f} M", 9.0, "middle", fill="#333")
    return doc.render()


# --------------------------------------------------------------------------
# external evaluation


def _coverage(p: PredictionSet, manifest: Manifest) -> PredictionSet:
    """Align a prediction set with the manifest's ids and labels."""
    recs = manifest.by_id()
    pred = dict(zip(p.ids, range(len(p.ids))))
    missing = [i for i in recs if i not in pred]
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise ReportError(f"predictions miss {len(missing)} manifest id(s): {shown}")
    extra = [i for i in p.ids if i not in recs]
    if extra:
        raise ReportError(f"predictions contain ids absent from the manifest: {', '.join(extra[:20])}")
    ids = [r.id for r in manifest.records]
    labels = np.array([manifest.binary_label(recs[i]) for i in ids])
    given = np.array([p.labels[pred[i]] for i in ids])
    if np.any(given != labels):
        bad = [i for i, a, b in zip(ids, given, labels) if a != b]
        raise ReportError(f"prediction labels disagree with the manifest for: {', '.join(bad[:20])}")
    scores = np.array([p.scores[pred[i]] for i in ids])
    return PredictionSet(ids, labels, scores, p.threshold)


def evaluate_external(predictions: PredictionSet | str | os.PathLike, manifest: Manifest) -> MetricReport:
    """Metric report for an externally produced prediction file over a whole manifest."""
    p = predictions if isinstance(predictions, PredictionSet) else PredictionSet.read_csv(predictions)
    return evaluate(_coverage(p, manifest))


def evaluate_ensemble(
    predictions: Sequence[PredictionSet | str | os.PathLike], manifest: Manifest
) -> tuple[list[MetricReport], FoldAggregate]:
    """One report per sub-model plus their mean ± std aggregate."""
    reports = [evaluate_external(p, manifest) for p in predictions]
    return reports, aggregate_folds(reports)


# --------------------------------------------------------------------------
# regeneration


def regenerate(
    root: str | os.PathLike,
    complexity: Mapping[str, ComplexityReport] | None = None,
    alpha: float = 0.10,
) -> dict[str, Path]:
    """Rebuild every summary, table and figure of a result directory from its runs."""
    root = Path(root)
    written: dict[str, Path] = {}

    def put(rel: str, text: str) -> None:
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        written[rel] = path

    summary = build_summary(root)
    put("summary.json", summary_to_json(summary))
    rows = accuracy_rows(root)
    write_accuracy_csv(rows, root / "summary_accuracy.csv")
    written["summary_accuracy.csv"] = root / "summary_accuracy.csv"
    for name, text in render_tables(summary, complexity).items():
        put(f"tables/{name}", text)

    models = sorted({m for m, _, _ in rows})
    if len(models) >= 2:
        k = expected_folds(root)
        table = {(m, f): a for m, f, a in rows}
        acc = AccuracyMatrix(models, np.array([[table[m, f] for f in range(k)] for m in models]))
        ranks, cd = compare(acc, alpha)
        put("cd_result.json", cd.to_json())
        put("cd_diagram.svg", render_cd_diagram(ranks, cd))
    else:
        logger.info("fewer than two complete configurations; no critical-difference diagram")

    if complexity:
        means = {c: e["accuracy"]["mean"] for c, e in summary.items() if is_complete(e) and "accuracy" in e}
        try:
            put("bubble_chart.svg", render_bubble_chart(means, complexity))
        except ReportError as exc:
            logger.warning("bubble chart skipped: %s", exc)
    return written

