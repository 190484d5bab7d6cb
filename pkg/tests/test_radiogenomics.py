import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import shapley_enumerated
from radiogenomic.data_io import DataError
from radiogenomic.radiogenomics import (
    CLASSES, FoldMetrics, FusedFeatureSet, GeneExpressionMatrix, SurvivalModel, average_row, class_index,
    class_metrics, classify_survival, confusion_matrix, evaluate_survival, fuse, load_gene_expression,
    rank_features_by_shap, read_survival_csv, rfe_select, shap_attribution, shap_exact, shap_sampling,
    write_gene_expression, write_metrics_csv, write_shap_csv, write_survival_csv,
)


def planted_rfe_problem(seed, n=100, p=20, k=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    w = rng.uniform(1.0, 2.0, size=k) * rng.choice([-1, 1], size=k)
    y = X[:, :k] @ w + rng.normal(scale=0.5, size=n)
    names = [f"f{i:02d}" for i in range(p)]
    return FusedFeatureSet([f"c{i}" for i in range(n)], names, ["radiomic"] * p, X), y, names[:k]


# ---------------------------------------------------------------- tables


def test_gene_csv_small(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("case_id,A,B,C,D\np1,1,2,3,4\np2,5,6,7,8\np3,9,10,11,12\n")
    gm = load_gene_expression(path)
    assert gm.values.shape == (3, 4)
    assert gm.patients == ["p1", "p2", "p3"] and gm.genes == ["A", "B", "C", "D"]


def test_gene_csv_rejections(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("case_id,A,B,A\np1,1,2,3\n")
    with pytest.raises(DataError, match="'A'"):
        load_gene_expression(path)
    path.write_text("case_id,A,B\np1,1\n")
    with pytest.raises(DataError, match="expected 3"):
        load_gene_expression(path)
    path.write_text("case_id,A,B\np1,1,x\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_gene_expression(path)
    path.write_text("case_id,A\np1,1\np1,2\n")
    with pytest.raises(DataError, match="duplicate"):
        load_gene_expression(path)


def test_gene_csv_round_trip_106_by_1740(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(106, 1740)) * rng.lognormal(size=1740)
    pats = [f"TCGA-{i:03d}" for i in range(106)]
    genes = [f"G{i}" for i in range(1740)]
    write_gene_expression(tmp_path / "g.csv", pats, genes, vals)
    gm = load_gene_expression(tmp_path / "g.csv")
    assert gm.patients == pats and gm.genes == genes
    assert np.array_equal(gm.values, vals)


def test_survival_csv_round_trip(tmp_path):
    write_survival_csv(tmp_path / "s.csv", [("a", 300, 51.5), ("b", 700, None)])
    rows = read_survival_csv(tmp_path / "s.csv")
    assert [(r.case_id, r.survival_days, r.age) for r in rows] == [("a", 300, 51.5), ("b", 700, None)]
    (tmp_path / "bad.csv").write_text("case_id,days,age\na,-3,\n")
    with pytest.raises(DataError):
        read_survival_csv(tmp_path / "bad.csv")


def test_survival_classes():
    assert classify_survival(200) == "short"
    assert classify_survival(400) == "medium"
    assert classify_survival(600) == "long"
    assert [classify_survival(d) for d in (304, 305, 456, 457)] == ["short", "medium", "medium", "long"]
    assert class_index([304, 305, 456, 457]).tolist() == [0, 1, 1, 2]
    assert classify_survival(100, (50, 150)) == "medium"
    with pytest.raises(ValueError):
        classify_survival(0)
    with pytest.raises(ValueError):
        classify_survival(10, (400, 300))


@settings(max_examples=200)
@given(st.integers(1, 5000))
def test_class_index_agrees_with_labels(days):
    assert CLASSES[int(class_index([days])[0])] == classify_survival(days)


# ---------------------------------------------------------------- fusion


def test_fuse_widths_and_provenance():
    ids = [f"c{i}" for i in range(5)]
    rad = (ids, [f"r{i}" for i in range(71)], np.zeros((5, 71)))
    gen = GeneExpressionMatrix(ids[::-1], [f"g{i}" for i in range(1740)], np.ones((5, 1740)))
    fs = fuse(rad, gen, {i: 50.0 for i in ids})
    assert fs.matrix.shape == (5, 1812)
    assert fs.provenance_counts() == {"radiomic": 71, "genomic": 1740, "clinical": 1}
    assert fs.case_ids == ids


def test_fuse_aligns_rows_and_drops_missing():
    rad = (["a", "b", "c"], ["r"], np.array([[1.0], [2.0], [3.0]]))
    gen = GeneExpressionMatrix(["c", "a"], ["g"], np.array([[30.0], [10.0]]))
    fs = fuse(rad, gen)
    assert fs.case_ids == ["a", "c"]
    assert fs.matrix.tolist() == [[1.0, 10.0], [3.0, 30.0]]
    assert fs.dropped == ["b"]


def test_fuse_disjoint_ids_rejected():
    rad = (["a"], ["r"], np.ones((1, 1)))
    gen = GeneExpressionMatrix(["b"], ["g"], np.ones((1, 1)))
    with pytest.raises(DataError, match="share no"):
        fuse(rad, gen)


# ---------------------------------------------------------------- RFE


def test_rfe_identity_when_target_is_everything():
    fs, y, _ = planted_rfe_problem(0)
    assert rfe_select(fs, y, len(fs.columns)).selected == fs.columns


def test_rfe_recovers_planted_columns():
    hits = 0
    for seed in range(40):
        fs, y, informative = planted_rfe_problem(seed)
        hits += sorted(rfe_select(fs, y, 3, seed=seed).selected) == informative
    assert hits >= 38


def test_rfe_per_provenance_union():
    rng = np.random.default_rng(0)
    n = 30
    cols = [f"r{i}" for i in range(71)] + [f"g{i}" for i in range(300)] + ["age"]
    prov = ["radiomic"] * 71 + ["genomic"] * 300 + ["clinical"]
    fs = FusedFeatureSet([str(i) for i in range(n)], cols, prov, rng.normal(size=(n, len(cols))))
    res = rfe_select(fs, rng.normal(size=n), {"radiomic": 8, "genomic": 43})
    assert len(res.selected) == 51 == res.target
    assert sum(c.startswith("r") for c in res.selected) == 8
    with pytest.raises(ValueError):
        rfe_select(fs, rng.normal(size=n), 400)


# ---------------------------------------------------------------- models


def test_svr_fits_linear_target():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 5))
    y = X @ np.array([1, 2, -1, 0.5, 3]) * 50 + 400
    model = SurvivalModel("SVR", C=10.0).fit(X, y)
    assert np.mean((model.predict(X) - y) ** 2) < 0.01 * y.var()


def test_ann_interpolates_single_sample():
    X = np.array([[0.3, -1.2, 2.0]])
    model = SurvivalModel("ANN").fit(X, [283.0])
    assert model.predict(X)[0] == pytest.approx(283.0, abs=1e-9)


@pytest.mark.parametrize("kind", ["SVR", "SVC", "ANN"])
def test_models_are_deterministic(kind):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 4))
    days = np.clip(400 + 150 * X[:, 0] + rng.normal(0, 20, 40), 30, None)
    a = SurvivalModel(kind, seed=3, ann={"epochs": 300}).fit(X, days).predict(X)
    b = SurvivalModel(kind, seed=3, ann={"epochs": 300}).fit(X, days).predict(X)
    assert np.array_equal(a, b)


def test_svc_needs_two_classes():
    with pytest.raises(ValueError):
        SurvivalModel("SVC").fit(np.ones((4, 2)), [500, 600, 700, 800])
    with pytest.raises(ValueError):
        SurvivalModel("GBM")


# ---------------------------------------------------------------- metrics


def test_perfect_predictor_metrics():
    truth = np.array([0, 1, 2, 0, 1, 2])
    acc, sens, spec = class_metrics(truth, truth)
    assert acc == 100.0
    assert all(v == 100.0 for v in sens.values()) and all(v == 100.0 for v in spec.values())


def test_confusion_oracle_13_cases():
    truth = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2])
    pred = np.array([0, 0, 1, 2, 1, 1, 1, 0, 2, 2, 2, 1, 2])
    cm = confusion_matrix(truth, pred)
    assert cm.tolist() == [[2, 1, 1], [1, 3, 1], [0, 1, 3]]
    acc, sens, spec = class_metrics(truth, pred)
    assert acc == pytest.approx(100 * 8 / 13)
    # per-class 2x2 tables written out by hand
    assert sens["short"] == pytest.approx(100 * 2 / 4) and spec["short"] == pytest.approx(100 * 8 / 9)
    assert sens["medium"] == pytest.approx(100 * 3 / 5) and spec["medium"] == pytest.approx(100 * 6 / 8)
    assert sens["long"] == pytest.approx(100 * 3 / 4) and spec["long"] == pytest.approx(100 * 7 / 9)


def test_absent_class_sensitivity_is_nan():
    acc, sens, spec = class_metrics([1, 1, 2], [1, 2, 2])
    assert math.isnan(sens["short"])
    assert spec["short"] == 100.0


def test_average_row_is_mean_of_folds():
    mk = lambda f, m, a: FoldMetrics(f, m, a, {c: a for c in CLASSES}, {c: m / 100 for c in CLASSES}, "x", 2)  # noqa: E731
    rows = [mk("1", 100.0, 50.0), mk("2", 300.0, 70.0), mk("3", 200.0, 90.0)]
    avg = average_row(rows)
    assert avg.mse == 200.0 and avg.accuracy == 70.0
    assert avg.specificity["short"] == 2.0
    assert avg.fold == "average" and avg.n_cases == 6


def test_evaluate_survival_layout(tmp_path):
    rng = np.random.default_rng(2)
    n = 40
    X = rng.normal(size=(n, 6))
    days = np.clip(np.round(400 + 150 * X[:, 0] + rng.normal(0, 20, n)), 30, None)
    fs = FusedFeatureSet([str(i) for i in range(n)], [f"x{i}" for i in range(6)], ["radiomic"] * 6, X)
    rows = evaluate_survival("SVR", fs, days, k=4, seed=0, rfe_targets={"radiomic": 3})
    assert [r.fold for r in rows] == ["1", "2", "3", "4", "average"]
    assert sum(r.n_cases for r in rows[:4]) == n
    assert rows[-1].mse == pytest.approx(np.mean([r.mse for r in rows[:4]]))
    svc = evaluate_survival("SVC", fs, days, k=4, seed=0)
    assert all(math.isnan(r.mse) for r in svc) and svc[0].source == "classifier"
    write_metrics_csv(tmp_path / "m.csv", rows, [("feature_set", "fused")])
    head = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert head.startswith("feature_set,fold,mse,accuracy,sens_S")
    again = evaluate_survival("SVR", fs, days, k=4, seed=0, rfe_targets={"radiomic": 3})
    assert [[str(v) for v in r.row()] for r in again] == [[str(v) for v in r.row()] for r in rows]


# ---------------------------------------------------------------- SHAP


def test_shap_linear_closed_form():
    rng = np.random.default_rng(0)
    for M in (1, 4, 9):
        w = rng.normal(size=M)
        bg = rng.normal(size=(15, M))
        x = rng.normal(size=M)
        res = shap_exact(lambda X: X @ w + 3.0, x, bg)
        np.testing.assert_allclose(res.values, w * (x - bg.mean(axis=0)), atol=1e-8, rtol=0)


def test_shap_exact_matches_coalition_loop():
    rng = np.random.default_rng(1)
    f = lambda X: np.sin(X[:, 0]) * X[:, 1] + X[:, 2] ** 2 - X[:, 0] * X[:, 3]  # noqa: E731
    bg = rng.normal(size=(6, 4))
    x = rng.normal(size=4)
    np.testing.assert_allclose(shap_exact(f, x, bg).values, shapley_enumerated(f, x, bg), atol=1e-12)


def test_shap_symmetry_and_dummy():
    w = np.array([1.0, -2.0, 0.0, 0.5])
    bg = np.random.default_rng(2).normal(size=(10, 4))
    res = shap_exact(lambda X: X @ w, bg.mean(axis=0), bg)
    np.testing.assert_allclose(res.values, 0.0, atol=1e-12)
    f = lambda X: np.tanh(X[:, 0] * X[:, 1]) + X[:, 3]  # noqa: E731
    res = shap_exact(f, np.array([1.0, 2.0, 3.0, -1.0]), bg)
    assert res.values[2] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12))
def test_shap_exact_efficiency(seed, M):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(M, 3))
    f = lambda X: np.tanh(X @ W).sum(axis=1)  # noqa: E731
    bg = rng.normal(size=(5, M))
    x = rng.normal(size=M)
    res = shap_exact(f, x, bg)
    assert abs(res.values.sum() - (f(x[None])[0] - f(bg).mean())) <= 1e-6


def test_shap_sampling_efficiency_and_accuracy():
    rng = np.random.default_rng(3)
    M = 10
    W = rng.normal(size=(M, 4))
    f = lambda X: np.tanh(X @ W).sum(axis=1)  # noqa: E731
    bg = rng.normal(size=(8, M))
    x = rng.normal(size=M)
    approx = shap_sampling(f, x, bg, budget=4096, seed=0)
    exact = shap_exact(f, x, bg)
    assert approx.values.sum() == pytest.approx(exact.values.sum(), abs=1e-9)
    assert np.abs(approx.values - exact.values).max() < 0.1
    linear = shap_sampling(lambda X: X @ W[:, 0], x, bg, budget=64)
    np.testing.assert_allclose(linear.values, W[:, 0] * (x - bg.mean(axis=0)), atol=1e-9)


def test_shap_dispatch_and_errors():
    bg = np.zeros((3, 20))
    res = shap_attribution(lambda X: X.sum(axis=1), np.ones(20), bg, budget=42)
    assert not res.exact
    assert shap_attribution(lambda X: X.sum(axis=1), np.ones(3), np.zeros((2, 3))).exact
    with pytest.raises(ValueError, match="empty"):
        shap_attribution(lambda X: X.sum(axis=1), np.ones(3), np.zeros((0, 3)))


def test_rank_single_case_and_order_invariance(tmp_path):
    phi = np.array([[0.1, -3.0, 2.0]])
    names = ["a", "b", "c"]
    assert [r.feature for r in rank_features_by_shap(phi, names)] == ["b", "c", "a"]
    rng = np.random.default_rng(0)
    many = rng.normal(size=(20, 5))
    cols = list("vwxyz")
    base = rank_features_by_shap(many, cols, top_k=3)
    perm = rank_features_by_shap(many[rng.permutation(20)], cols, top_k=3)
    assert [(r.feature, r.mean_abs_shap) for r in base] == [(r.feature, r.mean_abs_shap) for r in perm]
    write_shap_csv(tmp_path / "s.csv", base)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "feature,mean_abs_shap,provenance"


def test_planted_dominant_feature_ranked_first():
    wins = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 6))
        days = 420 + 120 * X[:, 2] + 25 * X[:, 0] - 20 * X[:, 4] + rng.normal(0, 10, 60)
        model = SurvivalModel("SVR", seed=seed).fit(X, days)
        phi = np.stack([shap_attribution(model.predict, x, X[:16]).values for x in X[:20]])
        wins += rank_features_by_shap(phi, [f"x{i}" for i in range(6)])[0].feature == "x2"
    assert wins >= 38
