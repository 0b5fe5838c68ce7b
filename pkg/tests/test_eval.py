import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bombus import evaluation as ev
from bombus.dataset import ClassCatalog
from bombus.evaluation import ConfusionMatrix, EvalError
from bombus.probabilities import ProbabilityMatrix

CAT3 = ClassCatalog(("A", "B", "C"))


def matrix_from_rows(rows, ids=None, catalog=CAT3):
    rows = np.asarray(rows, dtype=np.float64)
    if ids is None:
        ids = tuple(f"i{k}" for k in range(rows.shape[0]))
    return ProbabilityMatrix(tuple(ids), catalog, rows)


# independent brute-force oracles, deliberately dumb

def oracle_rank(row, true_idx):
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return order.index(true_idx)


def oracle_top_k_accuracy(ids, rows, truth, catalog, k):
    hits = 0
    for img_id, row in zip(ids, rows):
        if oracle_rank(row, catalog.index_of(truth[img_id])) < k:
            hits += 1
    return hits / len(ids)


def oracle_confusion(ids, rows, truth, catalog):
    c = len(catalog)
    counts = [[0] * c for _ in range(c)]
    for img_id, row in zip(ids, rows):
        pred = sorted(range(c), key=lambda j: (-row[j], j))[0]
        counts[catalog.index_of(truth[img_id])][pred] += 1
    return counts


class TestTopKAccuracy:
    def test_perfect_predictions(self):
        m = matrix_from_rows(np.eye(3))
        truth = {"i0": "A", "i1": "B", "i2": "C"}
        for k in (1, 2, 3):
            assert ev.top_k_accuracy(m, truth, k) == 1.0

    def test_hand_enumerated_ranks(self):
        cat = ClassCatalog(("a", "b", "c", "d"))
        rows = [
            [0.7, 0.1, 0.1, 0.1],   # truth a: rank 1
            [0.4, 0.3, 0.2, 0.1],   # truth b: rank 2
            [0.4, 0.3, 0.2, 0.1],   # truth d: rank 4
        ]
        m = matrix_from_rows(rows, catalog=cat)
        truth = {"i0": "a", "i1": "b", "i2": "d"}
        assert ev.top_k_accuracy(m, truth, 1) == pytest.approx(1 / 3)
        assert ev.top_k_accuracy(m, truth, 3) == pytest.approx(2 / 3)

    def test_uniform_random_expectation(self):
        rng = np.random.default_rng(0)
        c, n, k = 30, 10_000, 3
        cat = ClassCatalog(tuple(f"s{i}" for i in range(c)))
        raw = rng.random((n, c)) + 1e-9
        rows = raw / raw.sum(axis=1, keepdims=True)
        ids = tuple(f"i{j}" for j in range(n))
        m = ProbabilityMatrix(ids, cat, rows)
        truth = {img_id: cat.labels[int(rng.integers(0, c))] for img_id in ids}
        acc = ev.top_k_accuracy(m, truth, k)
        assert abs(acc - k / c) < 0.01

    def test_missing_truth(self):
        m = matrix_from_rows(np.eye(3))
        with pytest.raises(EvalError, match="truth"):
            ev.top_k_accuracy(m, {"i0": "A"}, 1)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        raw = rng.random((50, 3)) + 1e-9
        m = matrix_from_rows(raw / raw.sum(axis=1, keepdims=True))
        truth = {f"i{j}": CAT3.labels[j % 3] for j in range(50)}
        accs = [ev.top_k_accuracy(m, truth, k) for k in (1, 2, 3)]
        assert accs == sorted(accs)
        assert accs[-1] == 1.0


class TestConfusion:
    def test_identity(self):
        preds = {"x": "A", "y": "B"}
        cm = ev.confusion(preds, preds, CAT3)
        assert np.array_equal(np.diag(cm.counts), [1, 1, 0])
        assert cm.total == 2

    def test_hand_count(self):
        preds = {"1": "A", "2": "B", "3": "B"}
        truth = {"1": "A", "2": "A", "3": "B"}
        cm = ev.confusion(preds, truth, CAT3)
        assert cm.counts[0, 0] == 1 and cm.counts[0, 1] == 1
        assert cm.counts[1, 1] == 1

    def test_empty(self):
        cm = ev.confusion({}, {}, CAT3)
        assert cm.total == 0

    def test_id_mismatch(self):
        with pytest.raises(EvalError):
            ev.confusion({"x": "A"}, {"y": "A"}, CAT3)


class TestPrecisionRecall:
    def test_identity_matrix(self):
        cm = ConfusionMatrix(CAT3, np.eye(3, dtype=int) * 4)
        pr = ev.precision_recall(cm)
        for stats in pr.values():
            assert stats["precision"] == 1.0 and stats["recall"] == 1.0

    def test_zero_row_flagged_undefined(self):
        counts = np.array([[2, 0, 0], [0, 0, 0], [1, 0, 3]])
        pr = ev.precision_recall(ConfusionMatrix(CAT3, counts))
        assert pr["B"]["recall"] == 0.0
        assert not pr["B"]["recall_defined"]
        assert not pr["B"]["precision_defined"]

    def test_brute_force_formula(self):
        counts = np.array([[5, 1, 0], [2, 3, 0], [0, 0, 4]])
        pr = ev.precision_recall(ConfusionMatrix(CAT3, counts))
        assert pr["A"]["recall"] == pytest.approx(5 / 6)
        assert pr["A"]["precision"] == pytest.approx(5 / 7)
        assert pr["B"]["recall"] == pytest.approx(3 / 5)
        assert pr["B"]["precision"] == pytest.approx(3 / 4)
        assert pr["C"]["recall"] == 1.0 and pr["C"]["precision"] == 1.0


class TestLeakage:
    CAT = ClassCatalog(("A", "B", "HB"), negative_label="HB")

    def test_zero_column(self):
        counts = np.array([[3, 1, 0], [0, 4, 0], [0, 0, 2]])
        out = ev.leakage(ConfusionMatrix(self.CAT, counts), "HB")
        assert out == {"count": 0, "fraction": 0.0}

    def test_hand_count(self):
        counts = np.array([[3, 0, 1], [0, 4, 1], [0, 0, 2]])
        out = ev.leakage(ConfusionMatrix(self.CAT, counts), "HB")
        assert out["count"] == 2
        assert out["fraction"] == pytest.approx(2 / 9)

    def test_negative_row_excluded_from_denominator(self):
        counts = np.array([[5, 0, 0], [0, 5, 0], [0, 0, 90]])
        out = ev.leakage(ConfusionMatrix(self.CAT, counts), "HB")
        assert out["fraction"] == 0.0

    def test_missing_negative_label(self):
        cm = ConfusionMatrix(CAT3, np.zeros((3, 3), dtype=int))
        with pytest.raises(EvalError):
            ev.leakage(cm, "HoneyBee")


class TestCountCorrelation:
    COUNTS = {"A": 200, "B": 100, "C": 40}

    def test_diagonal_no_false_positives(self):
        cm = ConfusionMatrix(CAT3, np.eye(3, dtype=int) * 5)
        series = ev.count_correlation_series(cm, self.COUNTS)
        assert all(fp == 0 for _, _, fp in series["false_positives"])

    def test_column_sum_oracle(self):
        counts = np.array([[2, 3, 0], [4, 1, 0], [0, 0, 5]])
        series = ev.count_correlation_series(
            ConfusionMatrix(CAT3, counts), self.COUNTS)
        fp = {label: v for label, _, v in series["false_positives"]}
        assert fp == {"A": 4, "B": 3, "C": 0}
        assert series["false_positives"][0][1] == 200

    def test_threshold_buckets(self):
        cm = ConfusionMatrix(CAT3, np.eye(3, dtype=int))
        series = ev.count_correlation_series(cm, self.COUNTS, threshold=150)
        summary = series["threshold_summary"]
        assert summary["below"]["classes"] == ["B", "C"]
        assert summary["above"]["classes"] == ["A"]

    def test_all_above_threshold_empty_bucket(self):
        cm = ConfusionMatrix(CAT3, np.eye(3, dtype=int))
        series = ev.count_correlation_series(
            cm, {"A": 200, "B": 200, "C": 200}, threshold=150)
        assert series["threshold_summary"]["below"]["classes"] == []

    def test_missing_count(self):
        cm = ConfusionMatrix(CAT3, np.eye(3, dtype=int))
        with pytest.raises(EvalError, match="missing train count"):
            ev.count_correlation_series(cm, {"A": 10, "B": 10})


class TestOracleEquivalence:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 11))
        n = int(rng.integers(1, 201))
        catalog = ClassCatalog(tuple(f"c{i}" for i in range(c)),
                               negative_label=f"c{c - 1}")
        raw = rng.random((n, c)) + 1e-9
        rows = raw / raw.sum(axis=1, keepdims=True)
        ids = tuple(f"i{j}" for j in range(n))
        m = ProbabilityMatrix(ids, catalog, rows)
        truth = {i: catalog.labels[int(rng.integers(0, c))] for i in ids}
        k = int(rng.integers(1, c + 1))
        assert ev.top_k_accuracy(m, truth, k) == pytest.approx(
            oracle_top_k_accuracy(ids, rows, truth, catalog, k), abs=1e-12)
        report = ev.compute_report(m, truth, k_values=(1,))
        assert report.confusion.counts.tolist() == oracle_confusion(
            ids, rows, truth, catalog)

    def test_micro_consistency(self):
        rng = np.random.default_rng(9)
        raw = rng.random((120, 3)) + 1e-9
        m = matrix_from_rows(raw / raw.sum(axis=1, keepdims=True),
                             ids=tuple(f"i{j}" for j in range(120)))
        truth = {f"i{j}": CAT3.labels[j % 3] for j in range(120)}
        report = ev.compute_report(m, truth, k_values=(1,))
        diag = int(np.diag(report.confusion.counts).sum())
        assert diag / 120 == pytest.approx(report.top1_accuracy)


def fixture_report():
    cat = ClassCatalog(("Affinis", "Bifarius", "HoneyBee"),
                       negative_label="HoneyBee")
    rows = np.array([
        [0.8, 0.1, 0.1],
        [0.2, 0.7, 0.1],
        [0.3, 0.5, 0.2],
        [0.1, 0.1, 0.8],
        [0.0, 0.0, 1.0],
    ])
    ids = tuple(f"i{j}" for j in range(5))
    m = ProbabilityMatrix(ids, cat, rows)
    truth = {"i0": "Affinis", "i1": "Bifarius", "i2": "Affinis",
             "i3": "Bifarius", "i4": "HoneyBee"}
    return ev.compute_report(
        m, truth, k_values=(1, 3),
        train_counts={"Affinis": 59, "Bifarius": 351, "HoneyBee": 200},
        provenance={"model": "fixture"},
    )


class TestRendering:
    def test_json_round_trip(self):
        report = fixture_report()
        parsed = ev.report_from_json(ev.report_to_json(report))
        assert parsed.top_k_accuracy == report.top_k_accuracy
        assert parsed.per_class == report.per_class
        assert np.array_equal(parsed.confusion.counts, report.confusion.counts)

    def test_golden_markdown(self, request):
        golden = request.path.parent / "data" / "golden_report.md"
        rendered = ev.render_report(fixture_report(), "markdown")
        assert rendered == golden.read_text()

    def test_undefined_rendering(self):
        cat = ClassCatalog(("A", "B"))
        cm = ConfusionMatrix(cat, np.array([[2, 0], [1, 0]]))
        report = ev.MetricsReport({1: 0.5}, ev.precision_recall(cm), None, cm)
        text = ev.render_report(report, "markdown")
        assert "0.0% (undefined)" in text

    def test_unknown_format(self):
        with pytest.raises(EvalError):
            ev.render_report(fixture_report(), "xml")

    def test_series_csvs(self, tmp_path):
        report = fixture_report()
        counts = {lbl: v["train_count"] for lbl, v in report.per_class.items()}
        paths = ev.write_series_csvs(report, counts, str(tmp_path))
        names = sorted(p.split("/")[-1] for p in paths)
        assert names == ["fp_vs_count.csv", "precision_vs_count.csv",
                         "recall_vs_count.csv"]
        text = (tmp_path / "fp_vs_count.csv").read_text()
        assert text.splitlines()[0] == "label,train_count,value"
