import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgbdsal import metrics as M
from rgbdsal.errors import DataError, UsageError

from oracles import evaluate_naive


def test_binarize_examples():
    m = np.array([0.0, 0.5, 1.0])
    np.testing.assert_array_equal(M.binarize(m, 0), [False, True, True])
    np.testing.assert_array_equal(M.binarize(m, 255), [False, False, False])
    np.testing.assert_array_equal(M.binarize(np.array([127.5 / 255]), 127), [True])  # rounds half up


@pytest.mark.parametrize("t", [-1, 256, 1.5, "3"])
def test_binarize_rejects_bad_threshold(t):
    with pytest.raises(UsageError):
        M.binarize(np.zeros(3), t)


def test_precision_recall_conventions():
    assert M.precision_recall(np.zeros(4, bool), np.zeros(4, bool)) == (1.0, 1.0)
    assert M.precision_recall(np.zeros(4, bool), np.array([1, 0, 0, 0])) == (0.0, 0.0)
    assert M.precision_recall(np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0])) == (0.5, 1.0)


def test_precision_recall_rejects_non_binary():
    with pytest.raises(UsageError):
        M.precision_recall(np.array([0.5, 1.0]), np.array([0, 1]))


def test_f_measure_edge_cases():
    assert M.f_measure(0.0, 0.0) == 0.0
    assert M.f_measure(1.0, 1.0) == pytest.approx(1.0)
    np.testing.assert_allclose(M.f_measure(np.array([0.9, 0.0]), np.array([0.6, 0.0])), [0.806896551724138, 0.0])


def test_perfect_prediction():
    g = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(np.uint8)
    rep = M.evaluate([g.astype(float)], [g])
    assert rep.max_f == pytest.approx(1.0)
    assert rep.mae == 0.0


def test_constant_half_map_mae():
    g = (np.random.default_rng(1).random((8, 8)) > 0.3).astype(np.uint8)
    assert M.evaluate([np.full((8, 8), 0.5)], [g]).mae == 0.5


def test_evaluate_matches_brute_force():
    rng = np.random.default_rng(2)
    maps = [rng.random((10, 10)) for _ in range(4)] + [np.full((10, 10), 0.3)]
    gts = [(rng.random((10, 10)) > 0.6).astype(np.uint8) for _ in range(4)] + [np.zeros((10, 10), np.uint8)]
    rep = M.evaluate(maps, gts)
    max_f, mae, prec, rec = evaluate_naive(maps, gts)
    assert abs(rep.max_f - max_f) < 1e-12
    assert abs(rep.mae - mae) < 1e-12
    np.testing.assert_allclose(rep.precision, prec, atol=1e-12)
    np.testing.assert_allclose(rep.recall, rec, atol=1e-12)


def test_orphan_ids_are_listed():
    g = np.zeros((2, 2), np.uint8)
    with pytest.raises(DataError, match="b"):
        M.evaluate({"a": g * 1.0, "b": g * 1.0}, {"a": g})


def test_report_files(tmp_path):
    rng = np.random.default_rng(3)
    maps = {"x": rng.random((4, 4)), "y": rng.random((4, 4))}
    gts = {k: (rng.random((4, 4)) > 0.5).astype(np.uint8) for k in maps}
    rep = M.evaluate(maps, gts)
    rep.write(tmp_path / "r.jsonl", tmp_path / "pr.tsv")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert [json.loads(l).get("id") for l in lines[:2]] == ["x", "y"]
    assert json.loads(lines[-1])["summary"]["max_f"] == pytest.approx(rep.max_f)
    rows = (tmp_path / "pr.tsv").read_text().splitlines()
    assert rows[0] == "recall\tprecision" and len(rows) == 257


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), arrays(np.uint8, (5, 5), elements=st.integers(0, 1)))
def test_scores_in_unit_interval_and_recall_monotone(m, g):
    s = M.score_image("i", m, g)
    assert 0 <= s.max_f <= 1 and 0 <= s.mae <= 1
    assert np.all((s.precision >= 0) & (s.precision <= 1))
    assert np.all(np.diff(s.recall) <= 1e-15)
    assert s.mean_f <= s.max_f + 1e-15
