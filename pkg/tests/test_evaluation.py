import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from uedanomaly import evaluation, ricemix
from uedanomaly.errors import EvalError
from uedanomaly.scoring import ScoreRow, ScoreTable

REFERENCE = ricemix.RiceMixtureParams(w=0.6, normal=ricemix.RiceParams(0.0, 1.82, 0.17),
                                  anomal=ricemix.RiceParams(2.94, 0.0, 0.25))


def _table(scores, labels):
    return ScoreTable(rows=[ScoreRow(f"i{k}", float(s), 1, lab) for k, (s, lab) in enumerate(zip(scores, labels))])


def test_perfect_separation():
    curve = evaluation.roc(_table([1, 2, 3, 7, 8], ["normal"] * 3 + ["anomalous"] * 2))
    assert curve.auc == 1.0


def test_random_labels_give_half():
    rng = np.random.default_rng(0)
    scores = rng.random(10_000)
    positive = rng.random(10_000) < 0.4
    assert evaluation.roc_from_scores(scores, positive).auc == pytest.approx(0.5, abs=0.02)


def test_curve_shape_and_ties():
    curve = evaluation.roc(_table([1, 2, 2, 3], ["normal", "normal", "anomalous", "anomalous"]))
    th = curve.thresholds
    assert th[0] == -np.inf and th[-1] == np.inf
    assert list(th[1:-1]) == [1.0, 2.0, 3.0]
    assert (curve.tpr[0], curve.fpr[0]) == (1.0, 1.0)
    assert (curve.tpr[-1], curve.fpr[-1]) == (0.0, 0.0)
    assert np.all(np.diff(curve.tpr) <= 0) and np.all(np.diff(curve.fpr) <= 0)
    assert curve.auc == pytest.approx(0.875)


def test_single_class_rejected():
    with pytest.raises(EvalError):
        evaluation.roc(_table([1, 2], ["normal", "normal"]))
    with pytest.raises(EvalError):
        evaluation.roc(_table([1, 2], ["unlabeled", "anomalous"]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.int64, 30, elements=st.integers(-40, 40)),
       hnp.arrays(np.bool_, 30), st.floats(0.1, 3), st.floats(-10, 10))
def test_auc_invariant_under_increasing_transforms(steps, positive, a, b):
    # a coarse grid keeps every transform strictly increasing in floating point
    scores = steps / 8.0
    positive[0], positive[1] = True, False
    auc = evaluation.roc_from_scores(scores, positive).auc
    assert 0.0 <= auc <= 1.0
    for transform in (lambda s: a * s + b, np.exp, lambda s: np.arctan(s) + s ** 3):
        assert evaluation.roc_from_scores(transform(scores), positive).auc == pytest.approx(auc, abs=1e-12)


def test_operating_point_extremes():
    curve = evaluation.roc(_table([1, 2, 3, 4], ["normal", "normal", "anomalous", "anomalous"]))
    assert evaluation.operating_point(curve, 0.0) == (1.0, 1.0)
    assert evaluation.operating_point(curve, 10.0) == (0.0, 0.0)
    assert evaluation.operating_point(curve, 2.5) == (1.0, 0.0)
    # a score equal to e_t is not flagged
    assert evaluation.operating_point(curve, 3.0) == (0.5, 0.0)


OVERLAPPING = ricemix.RiceMixtureParams(w=0.5, normal=ricemix.RiceParams(0.0, 1.0, 0.2),
                                        anomal=ricemix.RiceParams(0.0, 1.6, 0.2), e_range=(0.0, 3.0))


def test_classify_flags_and_review():
    e_t = ricemix.solve_threshold(OVERLAPPING)
    scores = [0.5, 1.0, e_t - 0.02, e_t + 0.02, 2.5]
    table = _table(scores, ["normal"] * 3 + ["anomalous"] * 2)
    result = evaluation.classify(table, e_t, OVERLAPPING)
    assert result.flagged == [False, False, False, True, True]
    post = ricemix.posterior_normal(np.array(scores), OVERLAPPING)
    expected = [f"i{k}" for k in range(5) if abs(post[k] - 0.5) < 0.2]
    assert [r.image_id for r in result.review] == expected and "i2" in expected and "i3" in expected
    for row, flag in zip(result.table.rows, result.flagged):
        assert flag == (row.posterior_normal < 0.5)


def test_classify_reference_threshold_edge():
    e_t = ricemix.solve_threshold(REFERENCE)
    result = evaluation.classify(_table([1.8, e_t - 0.01, e_t + 0.01, 3.5], ["normal"] * 2 + ["anomalous"] * 2),
                                 e_t, REFERENCE)
    assert result.flagged == [False, False, True, True]


def test_posterior_threshold_consistency_on_grid():
    e_t = ricemix.solve_threshold(REFERENCE)
    grid = np.linspace(1.0, 5.0, 2001)
    post = ricemix.posterior_normal(grid, REFERENCE)
    sep = grid > 1.5
    assert np.all((grid[sep] > e_t) == (post[sep] < 0.5))


def _artifacts(labels=True):
    rng = np.random.default_rng(1)
    e, is_normal = ricemix.sample(REFERENCE, 60, rng)
    labs = ["normal" if n else "anomalous" for n in is_normal] if labels else ["unlabeled"] * 60
    table = _table(e, labs)
    e_t = ricemix.solve_threshold(REFERENCE)
    curve = evaluation.roc(table) if labels else None
    return table, e_t, curve, evaluation.classify(table, e_t, REFERENCE)


def test_report_sections():
    table, e_t, curve, cls = _artifacts()
    text = evaluation.report(table, REFERENCE, e_t, curve, cls)
    for name in evaluation.SECTIONS:
        assert f"## {name}" in text
    assert "AUC = " in text and "```csv" in text
    assert text == evaluation.report(table, REFERENCE, e_t, curve, cls)


def test_report_without_labels():
    table, e_t, _, cls = _artifacts(labels=False)
    text = evaluation.report(table, REFERENCE, e_t, None, cls)
    assert "Labels unavailable" in text and "AUC" not in text


@pytest.mark.parametrize("missing", ["scores", "fit", "threshold", "classification"])
def test_report_names_missing_artifact(missing):
    table, e_t, curve, cls = _artifacts()
    kwargs = dict(table=table, params=REFERENCE, e_t=e_t, curve=curve, classification=cls)
    key = {"scores": "table", "fit": "params", "threshold": "e_t", "classification": "classification"}[missing]
    kwargs[key] = None
    with pytest.raises(EvalError, match=missing):
        evaluation.report(**kwargs)


def test_save_roc(tmp_path):
    curve = evaluation.roc(_table([1, 2], ["normal", "anomalous"]))
    evaluation.save_roc(curve, tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,tpr,fpr" and lines[1] == "-inf,1.0,1.0"
