"""Friedman omnibus test, Nemenyi critical difference, and CD diagrams."""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as st

from .svg import SvgDoc

# Nemenyi critical values q_alpha = studentized range quantile (infinite df) / sqrt(2).
# m = 2..10: Demsar (2006), "Statistical Comparisons of Classifiers over Multiple
# Data Sets", JMLR 7, Table 5(a). m = 11..30: the same quantity evaluated with
# scipy.stats.studentized_range.ppf(1 - alpha, m, inf) / sqrt(2), rounded to 3 d.p.
NEMENYI_Q = {
    0.05: (
        1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
        3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
        3.569, 3.593, 3.616, 3.637, 3.658, 3.678, 3.696, 3.714, 3.732, 3.749,
    ),
    0.10: (
        1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
        2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319,
        3.346, 3.371, 3.394, 3.417, 3.439, 3.459, 3.479, 3.498, 3.516, 3.533,
    ),
}
MAX_MODELS = 30


class StatsError(ValueError):
    pass


def q_alpha(m: int, alpha: float) -> float:
    table = None
    for a, values in NEMENYI_Q.items():
        if abs(a - alpha) < 1e-12:
            table = values
    if table is None:
        raise StatsError(f"alpha={alpha} not tabulated; supported alphas: {sorted(NEMENYI_Q)}")
    if not 2 <= m <= MAX_MODELS:
        raise StatsError(f"q table covers 2..{MAX_MODELS} models, got {m}")
    return table[m - 2]


@dataclass
class AccuracyMatrix:
    models: list[str]
    values: np.ndarray  # models x folds

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.models):
            raise StatsError("values must be a models x folds table")
        m, n = self.values.shape
        if m < 2 or n < 2:
            raise StatsError(f"need at least 2 models and 2 folds, got {m}x{n}")
        if np.any(np.isnan(self.values)):
            raise StatsError("accuracy table has missing cells")
        if np.any((self.values < 0) | (self.values > 1)):
            raise StatsError("accuracies must lie in [0, 1]")

    @classmethod
    def from_long_csv(cls, path: str | os.PathLike) -> "AccuracyMatrix":
        """Read ``model,fold,accuracy`` rows; model order is first appearance."""
        cells: dict[str, dict[str, float]] = {}
        folds: list[str] = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                cells.setdefault(row["model"], {})[row["fold"]] = float(row["accuracy"])
                if row["fold"] not in folds:
                    folds.append(row["fold"])
        models = list(cells)
        missing = [(mdl, f) for mdl in models for f in folds if f not in cells[mdl]]
        if missing:
            raise StatsError(f"accuracy table has missing cells: {missing[:5]}")
        return cls(models, np.array([[cells[mdl][f] for f in folds] for mdl in models]))

    def write_long_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "fold", "accuracy"])
            for name, row in zip(self.models, self.values):
                for f, v in enumerate(row):
                    w.writerow([name, f, repr(float(v))])


@dataclass
class RankMatrix:
    models: list[str]
    ranks: np.ndarray  # models x folds, 1 = best
    avg_rank: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.ranks = np.asarray(self.ranks, dtype=np.float64)
        self.avg_rank = self.ranks.mean(axis=1)

    @property
    def m(self) -> int:
        return self.ranks.shape[0]

    @property
    def n_folds(self) -> int:
        return self.ranks.shape[1]


@dataclass
class CDResult:
    friedman_statistic: float
    friedman_p: float
    alpha: float
    critical_difference: float
    pairwise_not_different: set[tuple[str, str]]
    cliques: list[list[str]]

    def to_json(self) -> str:
        payload = {
            "friedman_statistic": self.friedman_statistic,
            "friedman_p": self.friedman_p,
            "alpha": self.alpha,
            "critical_difference": self.critical_difference,
            "pairwise_not_different": sorted(list(p) for p in self.pairwise_not_different),
            "cliques": self.cliques,
        }
        return json.dumps(payload, indent=2) + "\n"


def rank_models(a: AccuracyMatrix) -> RankMatrix:
    # rankdata ranks ascending; negate so the best accuracy gets rank 1
    ranks = st.rankdata(-a.values, method="average", axis=0)
    return RankMatrix(list(a.models), ranks)


def friedman_statistic(ranks: np.ndarray) -> float:
    """Tie-corrected Friedman chi-square from a models x folds rank table."""
    m, n = ranks.shape
    rank_sums = ranks.sum(axis=1)
    ties = 0.0
    for col in ranks.T:
        _, counts = np.unique(col, return_counts=True)
        ties += float(np.sum(counts**3 - counts))
    correction = 1.0 - ties / (n * (m**3 - m))
    if correction <= 0:
        return 0.0
    raw = 12.0 / (n * m * (m + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (m + 1)
    return max(raw, 0.0) / correction


EXACT_WORK_LIMIT = 50_000_000


def _exact_work(m: int, n_folds: int) -> int:
    # array cells touched: states x permutations per fold x folds
    return (2 * m * n_folds + 1) ** (m - 1) * math.factorial(m) * n_folds


def friedman_exact_p(ranks: np.ndarray) -> float:
    """Exact p-value under independent uniform relabelling within each fold.

    Dynamic programming over the joint distribution of (doubled) rank sums of
    the first m-1 models; the last sum is fixed by the per-fold rank total.
    Every fold keeps its own tie pattern, so the tie correction is constant
    and ordering by sum of squared rank sums is equivalent to the statistic.
    """
    m, n = ranks.shape
    doubled = np.rint(2 * ranks).astype(np.int64)
    size = 2 * m * n + 1
    dist = np.zeros((size,) * (m - 1))
    dist[(0,) * (m - 1)] = 1.0
    for j in range(n):
        perms = Counter(itertools.permutations(doubled[:, j].tolist()))
        total = sum(perms.values())
        nxt = np.zeros_like(dist)
        for perm, count in perms.items():
            off = perm[: m - 1]
            dst = tuple(slice(o, None) for o in off)
            src = tuple(slice(0, size - o) for o in off)
            nxt[dst] += (count / total) * dist[src]
        dist = nxt

    grand = int(doubled.sum())
    grids = np.meshgrid(*([np.arange(size)] * (m - 1)), indexing="ij", sparse=True)
    last = grand - sum(grids)
    score = sum(g.astype(np.float64) ** 2 for g in grids) + last.astype(np.float64) ** 2
    observed = float(np.sum(doubled.sum(axis=1).astype(np.float64) ** 2))
    p = float(dist[score >= observed - 1e-6].sum())
    return min(p, 1.0)


def friedman_test(r: RankMatrix, method: str = "auto") -> tuple[float, float]:
    """Tie-corrected Friedman statistic and its p-value.

    ``method="chi2"`` uses the chi-square(m-1) approximation; ``"exact"`` the
    within-fold permutation distribution. ``"auto"`` takes the exact route
    when the rank-sum state space is small enough (a few models and folds),
    where the chi-square approximation is visibly off.
    """
    if r.m < 2:
        raise StatsError("Friedman test needs at least 2 models")
    if method not in ("auto", "exact", "chi2"):
        raise StatsError(f"unknown p-value method {method!r}")
    stat = friedman_statistic(r.ranks)
    if stat <= 0:
        return 0.0, 1.0
    feasible = _exact_work(r.m, r.n_folds) <= EXACT_WORK_LIMIT
    if method == "exact" or (method == "auto" and feasible):
        if not feasible:
            raise StatsError(f"exact Friedman p-value infeasible for {r.m} models x {r.n_folds} folds")
        return stat, friedman_exact_p(r.ranks)
    return stat, float(st.chi2.sf(stat, r.m - 1))


def critical_difference(m: int, n_folds: int, alpha: float) -> float:
    return q_alpha(m, alpha) * float(np.sqrt(m * (m + 1) / (6.0 * n_folds)))


def cd_cliques(models: Sequence[str], avg_rank: Sequence[float], cd: float) -> list[list[str]]:
    """Maximal groups of mutually not-different models (size >= 2), best first.

    On the sorted rank axis a set is pairwise within ``cd`` iff its extremes
    are, so the maximal cliques are maximal runs of consecutive models.
    """
    order = sorted(range(len(models)), key=lambda i: (avg_rank[i], i))
    r = [avg_rank[i] for i in order]
    spans: list[tuple[int, int]] = []
    for lo in range(len(order)):
        hi = lo
        while hi + 1 < len(order) and r[hi + 1] - r[lo] < cd:
            hi += 1
        if hi > lo and not any(a <= lo and hi <= b for a, b in spans):
            spans.append((lo, hi))
    return [[models[order[i]] for i in range(a, b + 1)] for a, b in spans]


def nemenyi_cd(r: RankMatrix, alpha: float = 0.1, friedman: tuple[float, float] | None = None) -> CDResult:
    stat, p = friedman if friedman is not None else friedman_test(r)
    cd = critical_difference(r.m, r.n_folds, alpha)
    pairs = set()
    for i in range(r.m):
        for j in range(i + 1, r.m):
            if abs(r.avg_rank[i] - r.avg_rank[j]) < cd:
                pairs.add((r.models[i], r.models[j]))
    return CDResult(stat, p, alpha, cd, pairs, cd_cliques(r.models, list(r.avg_rank), cd))


def render_cd_diagram(r: RankMatrix, cd: CDResult, title: str = "") -> str:
    """Critical-difference diagram as SVG text, best average rank on the left."""
    m = r.m
    order = sorted(range(m), key=lambda i: (r.avg_rank[i], i))
    left_n = (m + 1) // 2
    width = 760.0
    margin = 170.0
    axis_y = 90.0
    row_h = 22.0
    lo, hi = 1, m
    x_of = lambda v: margin + (v - lo) / max(hi - lo, 1) * (width - 2 * margin)

    height = axis_y + 40.0 + row_h * (max(left_n, m - left_n) + 1) + 12.0 * len(cd.cliques)
    doc = SvgDoc(width, height, title or "Critical difference diagram")
    doc.metadata = {
        "models": list(r.models),
        "avg_rank": [round(float(v), 10) for v in r.avg_rank],
        "critical_difference": round(cd.critical_difference, 10),
        "alpha": cd.alpha,
        "friedman_statistic": round(cd.friedman_statistic, 10),
        "friedman_p": round(cd.friedman_p, 10),
        "cliques": cd.cliques,
    }

    # CD scale bar
    doc.line(x_of(1), 30.0, x_of(1 + cd.critical_difference), 30.0, width=2.0)
    doc.line(x_of(1), 25.0, x_of(1), 35.0)
    doc.line(x_of(1 + cd.critical_difference), 25.0, x_of(1 + cd.critical_difference), 35.0)
    doc.text((x_of(1) + x_of(1 + cd.critical_difference)) / 2, 20.0, f"CD = {cd.critical_difference:.3f}", 11.0, "middle")

    doc.line(x_of(lo), axis_y, x_of(hi), axis_y, width=1.5)
    for t in range(lo, hi + 1):
        doc.line(x_of(t), axis_y - 6, x_of(t), axis_y)
        doc.text(x_of(t), axis_y - 10, str(t), 11.0, "middle")

    clique_top = axis_y + 14.0
    for c, members in enumerate(cd.cliques):
        idx = [r.models.index(name) for name in members]
        xs = [x_of(r.avg_rank[i]) for i in idx]
        y = clique_top + 12.0 * c
        doc.line(min(xs) - 4, y, max(xs) + 4, y, width=4.0, stroke_linecap="round")

    label_top = clique_top + 12.0 * len(cd.cliques) + 16.0
    for pos, i in enumerate(order):
        x = x_of(r.avg_rank[i])
        label = f"{r.models[i]} ({r.avg_rank[i]:.2f})"
        if pos < left_n:
            y = label_top + row_h * pos
            doc.polyline([(x, axis_y), (x, y), (margin - 10, y)])
            doc.text(margin - 14, y + 4, label, 12.0, "end")
        else:
            y = label_top + row_h * (m - 1 - pos)
            doc.polyline([(x, axis_y), (x, y), (width - margin + 10, y)])
            doc.text(width - margin + 14, y + 4, label, 12.0, "start")
    return doc.render()


def compare(a: AccuracyMatrix, alpha: float = 0.1) -> tuple[RankMatrix, CDResult]:
    r = rank_models(a)
    return r, nemenyi_cd(r, alpha)

