import itertools
import json
import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs
from scipy import stats as st

from lesionbench.stats import (
    NEMENYI_Q,
    AccuracyMatrix,
    RankMatrix,
    StatsError,
    compare,
    critical_difference,
    friedman_test,
    nemenyi_cd,
    q_alpha,
    rank_models,
    render_cd_diagram,
)

from oracles import DEMSAR_Q, friedman_permutation_p

GOLDEN = Path(__file__).parent / "golden"

GOLDEN_CD_MODELS = ["ResNet50-141", "DenseNet121-IMG-FFT", "EfficientNetB0-IMG-WFT", "VGG16-NTL", "Xception-IMG-FFT"]
GOLDEN_CD_VALUES = [
    [0.8442, 0.8561, 0.8297, 0.8480, 0.8363],
    [0.8310, 0.8452, 0.8389, 0.8205, 0.8274],
    [0.8012, 0.7950, 0.8120, 0.7889, 0.8043],
    [0.7120, 0.7344, 0.7050, 0.7291, 0.7180],
    [0.8390, 0.8233, 0.8402, 0.8311, 0.8298],
]


def golden_cd_svg() -> str:
    r, cd = compare(AccuracyMatrix(GOLDEN_CD_MODELS, GOLDEN_CD_VALUES), 0.10)
    return render_cd_diagram(r, cd, "Five-model comparison")


def _ranks(vals):
    return rank_models(AccuracyMatrix([f"m{i}" for i in range(len(vals))], vals)).ranks


# ---------------------------------------------------------------- ranking


def test_rank_examples():
    assert _ranks([[0.9, 0.5], [0.8, 0.6], [0.7, 0.7]])[:, 0].tolist() == [1, 2, 3]
    assert _ranks([[0.9, 0.5], [0.9, 0.6], [0.7, 0.7]])[:, 0].tolist() == [1.5, 1.5, 3]


def test_rank_sum_identity_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = np.round(rng.uniform(0.5, 1, (5, 5)), 1)  # plenty of ties
        assert np.allclose(_ranks(v).sum(axis=0), 15)


@settings(max_examples=60, deadline=None)
@given(hs.integers(2, 8), hs.integers(2, 8), hs.integers(0, 2**31), hs.floats(0.1, 1.0))
def test_rank_properties(m, n, seed, scale):
    rng = np.random.default_rng(seed)
    v = np.round(rng.uniform(0.3, 0.9, (m, n)), 2)
    r = rank_models(AccuracyMatrix([str(i) for i in range(m)], v))
    assert np.allclose(r.ranks.sum(axis=0), m * (m + 1) / 2)
    # positive rescaling leaves ranks unchanged
    assert np.array_equal(rank_models(AccuracyMatrix(r.models, v * scale)).ranks, r.ranks)
    # improving one cell never worsens that model's average rank
    i, j = rng.integers(m), rng.integers(n)
    better = v.copy()
    better[i, j] = min(1.0, better[i, j] + 0.05)
    assert rank_models(AccuracyMatrix(r.models, better)).avg_rank[i] <= r.avg_rank[i] + 1e-12


def test_accuracy_matrix_validation():
    with pytest.raises(StatsError):
        AccuracyMatrix(["a"], [[0.5, 0.6]])
    with pytest.raises(StatsError):
        AccuracyMatrix(["a", "b"], [[0.5], [0.6]])
    with pytest.raises(StatsError):
        AccuracyMatrix(["a", "b"], [[0.5, 1.2], [0.6, 0.7]])


def test_long_csv_round_trip(tmp_path):
    a = AccuracyMatrix(GOLDEN_CD_MODELS, GOLDEN_CD_VALUES)
    a.write_long_csv(tmp_path / "acc.csv")
    assert (tmp_path / "acc.csv").read_text().startswith("model,fold,accuracy\n")
    b = AccuracyMatrix.from_long_csv(tmp_path / "acc.csv")
    assert b.models == a.models and np.array_equal(b.values, a.values)


def test_long_csv_missing_cell(tmp_path):
    (tmp_path / "acc.csv").write_text("model,fold,accuracy\na,0,0.5\na,1,0.6\nb,0,0.7\n")
    with pytest.raises(StatsError, match="missing"):
        AccuracyMatrix.from_long_csv(tmp_path / "acc.csv")


# ---------------------------------------------------------------- Friedman


def test_friedman_identical_models():
    v = np.tile([0.8, 0.7, 0.9], (4, 1))
    stat, p = friedman_test(rank_models(AccuracyMatrix(list("abcd"), v)))
    assert (stat, p) == (0.0, 1.0)


def test_friedman_statistic_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(30):
        v = np.round(rng.uniform(0.6, 0.9, (5, 7)), 2)
        stat, p = friedman_test(rank_models(AccuracyMatrix(list("abcde"), v)), method="chi2")
        ref = st.friedmanchisquare(*v)
        assert stat == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_friedman_exact_against_full_enumeration():
    # 3 models x 4 folds: all 6^4 within-fold relabellings enumerated
    v = np.array([[0.9, 0.8, 0.85, 0.7], [0.8, 0.8, 0.6, 0.75], [0.7, 0.6, 0.65, 0.6]])
    r = rank_models(AccuracyMatrix(list("abc"), v))
    stat, p = friedman_test(r, method="exact")
    obs = np.sum(r.ranks.sum(axis=1) ** 2)
    cols = [list(set(itertools.permutations(r.ranks[:, j]))) for j in range(4)]
    weights = [1 / len(c) for c in cols]
    hit = total = 0.0
    for combo in itertools.product(*cols):
        w = np.prod(weights)
        s = np.sum(np.sum(np.array(combo).T, axis=1) ** 2)
        total += w
        hit += w * (s >= obs - 1e-9)
    assert p == pytest.approx(hit / total, abs=1e-12)


def test_friedman_auto_falls_back_to_chi2():
    rng = np.random.default_rng(4)
    v = rng.uniform(0.5, 0.9, (23, 5))
    r = rank_models(AccuracyMatrix([f"m{i}" for i in range(23)], v))
    stat, p = friedman_test(r)
    assert p == pytest.approx(float(st.chi2.sf(stat, 22)))
    with pytest.raises(StatsError, match="infeasible"):
        friedman_test(r, method="exact")


# ---------------------------------------------------------------- Nemenyi


def test_q_table_matches_published_values():
    for alpha, row in DEMSAR_Q.items():
        for m, q in row.items():
            assert q_alpha(m, alpha) == q


def test_q_table_extension_matches_studentized_range():
    for alpha, row in NEMENYI_Q.items():
        for m in range(11, 31, 4):
            ref = st.studentized_range.ppf(1 - alpha, m, np.inf) / np.sqrt(2)
            assert row[m - 2] == pytest.approx(ref, abs=1.5e-3)


@pytest.mark.parametrize(
    "m,n,factor",
    [(2, 10, np.sqrt(6 / 60)), (5, 5, 1.0), (10, 5, np.sqrt(110 / 30))],
)
def test_cd_hand_substitution(m, n, factor):
    for alpha in (0.05, 0.10):
        assert critical_difference(m, n, alpha) == pytest.approx(DEMSAR_Q[alpha][m] * factor, abs=1e-12)


def test_cd_m2_n10_value():
    assert critical_difference(2, 10, 0.10) == pytest.approx(1.645 * 0.316227766, abs=1e-9)


def test_unsupported_alpha():
    with pytest.raises(StatsError, match="supported alphas"):
        critical_difference(4, 5, 0.01)


def test_identical_models_all_not_different():
    v = np.tile([0.8, 0.7, 0.9, 0.6], (4, 1))
    _, cd = compare(AccuracyMatrix(list("abcd"), v))
    assert len(cd.pairwise_not_different) == 6
    assert cd.cliques == [["a", "b", "c", "d"]]


def test_gap_beyond_cd_separates():
    v = np.array([[0.9] * 10, [0.5] * 10])
    r, cd = compare(AccuracyMatrix(["good", "bad"], v))
    assert r.avg_rank[1] - r.avg_rank[0] == 1.0 > cd.critical_difference
    assert cd.pairwise_not_different == set() and cd.cliques == []


def _clique_invariants(r: RankMatrix, cd):
    rank = dict(zip(r.models, r.avg_rank))
    for c in cd.cliques:
        assert len(c) >= 2
        for a, b in itertools.combinations(c, 2):
            assert abs(rank[a] - rank[b]) < cd.critical_difference
    sets = [set(c) for c in cd.cliques]
    for i, a in enumerate(sets):
        for j, b in enumerate(sets):
            assert i == j or not a <= b
    # every not-different pair lies in some clique; pairs beyond CD share none
    for a, b in itertools.combinations(r.models, 2):
        together = any(a in s and b in s for s in sets)
        close = abs(rank[a] - rank[b]) < cd.critical_difference
        assert together == close
        assert close == ((a, b) in cd.pairwise_not_different or (b, a) in cd.pairwise_not_different)


def test_clique_invariant_random():
    rng = np.random.default_rng(17)
    for _ in range(100):
        m, n = int(rng.integers(2, 12)), int(rng.integers(2, 9))
        v = np.round(rng.uniform(0.5, 0.95, (m, n)) + rng.uniform(0, 0.2, (m, 1)), 2).clip(0, 1)
        r, cd = compare(AccuracyMatrix([f"m{i}" for i in range(m)], v), alpha=[0.05, 0.10][int(rng.integers(2))])
        _clique_invariants(r, cd)


def test_cd_result_json():
    _, cd = compare(AccuracyMatrix(GOLDEN_CD_MODELS, GOLDEN_CD_VALUES))
    payload = json.loads(cd.to_json())
    assert set(payload) == {"friedman_statistic", "friedman_p", "alpha", "critical_difference",
                            "pairwise_not_different", "cliques"}
    assert payload["alpha"] == 0.1


# ---------------------------------------------------------------- diagram


def test_three_models_single_bar():
    v = np.array([[0.80, 0.81, 0.79], [0.81, 0.80, 0.80], [0.79, 0.80, 0.81]])
    r, cd = compare(AccuracyMatrix(list("abc"), v))
    svg = render_cd_diagram(r, cd)
    assert cd.cliques == [["a", "b", "c"]] or sorted(cd.cliques[0]) == ["a", "b", "c"]
    assert len(re.findall(r'stroke-width="4.00"', svg)) == 1


def test_two_models_no_bar():
    r, cd = compare(AccuracyMatrix(["x", "y"], [[0.9] * 10, [0.5] * 10]))
    assert 'stroke-width="4.00"' not in render_cd_diagram(r, cd)


def test_diagram_orders_best_left():
    svg = golden_cd_svg()
    r, _ = compare(AccuracyMatrix(GOLDEN_CD_MODELS, GOLDEN_CD_VALUES))
    assert "<metadata>" in svg and "CD = " in svg
    best = GOLDEN_CD_MODELS[int(np.argmin(r.avg_rank))]
    worst = GOLDEN_CD_MODELS[int(np.argmax(r.avg_rank))]
    assert best == "ResNet50-141" and worst == "VGG16-NTL"
    x_best = float(re.search(rf'x="([\d.]+)"[^>]*>{re.escape(best)} \(', svg).group(1))
    x_worst = float(re.search(rf'x="([\d.]+)"[^>]*>{re.escape(worst)} \(', svg).group(1))
    assert x_best < x_worst


def test_cd_diagram_golden():
    assert golden_cd_svg() == (GOLDEN / "cd_diagram.svg").read_text()
    assert golden_cd_svg() == golden_cd_svg()


def test_friedman_permutation_oracle_with_ties():
    rng = np.random.default_rng(8)
    for i in range(10):
        v = np.round(rng.uniform(0.7, 0.8, (4, 6)), 2)  # coarse grid -> within-fold ties
        r = rank_models(AccuracyMatrix(list("abcd"), v))
        stat, p = friedman_test(r)
        ref_stat, ref_p = friedman_permutation_p(v, 20000, seed=i)
        assert stat == pytest.approx(ref_stat, rel=1e-10)
        assert abs(p - ref_p) < 0.02
