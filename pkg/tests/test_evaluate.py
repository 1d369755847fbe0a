import itertools
import json

import numpy as np
import pandas as pd
import pytest
import torch

from cardioforge import evaluate
from cardioforge.errors import AggregationError, EvaluationError
from cardioforge.evaluate import ConfusionCounts, MetricsReport, RocCurve
from cardioforge.state import Fragment, Label


class ConstantModel(torch.nn.Module):
    def __init__(self, value: float):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.zeros(1))
        self.value = value

    def predict_proba(self, batch: torch.Tensor) -> np.ndarray:
        return np.full(batch.shape[0], self.value)


def _report(acc: float, run_id: str, fold_id=None, level: str = "subject") -> MetricsReport:
    return MetricsReport(acc=acc, uar=acc, tpr=acc, tnr=acc, fpr=0.0, fpr_conventional=0.0, f1=acc, mcc=acc,
                         counts=ConfusionCounts(), level=level, run_id=run_id, fold_id=fold_id)


def _fragments(probs_by_subject: dict[str, tuple[Label, int]]) -> list[Fragment]:
    return [Fragment(samples=np.zeros(8), fs=1000.0, subject_id=subject, label=label, offset=i * 8)
            for subject, (label, count) in probs_by_subject.items() for i in range(count)]


def test_metrics_oracle():
    report = evaluate.metrics(ConfusionCounts(tp=40, tn=30, fp=10, fn=20), level="subject", run_id="r1")
    assert report.acc == pytest.approx(0.7)
    assert report.tpr == pytest.approx(2 / 3)
    assert report.tnr == pytest.approx(0.75)
    assert report.uar == pytest.approx((2 / 3 + 0.75) / 2)
    assert report.fpr == pytest.approx(0.2)
    assert report.fpr_conventional == pytest.approx(0.25)
    assert report.f1 == pytest.approx(80 / 110)
    assert report.mcc == pytest.approx(1000 / np.sqrt(50 * 60 * 40 * 50))
    assert report.degenerate == []
    assert report.as_dict()["run"] == "r1"


def _reference(tp: int, tn: int, fp: int, fn: int) -> dict[str, float]:
    def ratio(num, den):
        return num / den if den else 0.0

    tpr, tnr = ratio(tp, tp + fn), ratio(tn, tn + fp)
    return {"acc": ratio(tp + tn, tp + tn + fp + fn), "uar": (tpr + tnr) / 2, "tpr": tpr, "tnr": tnr,
            "fpr": ratio(fp, tp + fp), "fpr_conventional": ratio(fp, fp + tn), "f1": ratio(2 * tp, 2 * tp + fp + fn),
            "mcc": ratio(tp * tn - fp * fn, np.sqrt(float((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))))}


def test_metrics_match_closed_forms_on_every_small_matrix():
    cases = 0
    for tp, tn, fp, fn in itertools.product(range(6), repeat=4):
        report = evaluate.metrics(ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn))
        for name, expected in _reference(tp, tn, fp, fn).items():
            assert getattr(report, name) == pytest.approx(expected, abs=1e-12), (name, tp, tn, fp, fn)
        cases += 1
    assert cases == 1296


def test_mcc_symmetry_and_inversion():
    for tp, tn, fp, fn in itertools.product(range(1, 5), repeat=4):
        mcc = evaluate.metrics(ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)).mcc
        swapped = evaluate.metrics(ConfusionCounts(tp=tn, tn=tp, fp=fn, fn=fp)).mcc
        inverted = evaluate.metrics(ConfusionCounts(tp=fn, tn=fp, fp=tn, fn=tp)).mcc
        assert swapped == pytest.approx(mcc, abs=1e-12)
        assert inverted == pytest.approx(-mcc, abs=1e-12)


def test_accuracy_equals_uar_on_balanced_classes(rng):
    for _ in range(50):
        positives = int(rng.integers(1, 40))
        tp, tn = int(rng.integers(0, positives + 1)), int(rng.integers(0, positives + 1))
        report = evaluate.metrics(ConfusionCounts(tp=tp, fn=positives - tp, tn=tn, fp=positives - tn))
        assert report.acc == pytest.approx(report.uar, abs=1e-12)


def test_perfect_and_inverted_classifiers():
    perfect = evaluate.metrics(ConfusionCounts(tp=10, tn=10))
    assert (perfect.acc, perfect.mcc, perfect.f1) == (1.0, 1.0, 1.0)
    inverted = evaluate.metrics(ConfusionCounts(fp=10, fn=10))
    assert inverted.mcc == pytest.approx(-1.0)
    assert inverted.acc == 0.0


def test_degenerate_rates_are_zero_and_flagged():
    report = evaluate.metrics(ConfusionCounts(tp=5))
    assert report.degenerate == ["tnr", "fpr_conventional", "mcc"]
    assert report.tnr == 0.0 and report.mcc == 0.0
    assert report.tpr == 1.0

    empty = evaluate.metrics(ConfusionCounts())
    assert set(empty.degenerate) == {"tpr", "tnr", "fpr", "fpr_conventional", "acc", "f1", "mcc"}


def test_confusion_counts():
    counts = evaluate.confusion_counts([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert counts == ConfusionCounts(tp=2, tn=1, fp=1, fn=1)
    assert counts + counts == ConfusionCounts(tp=4, tn=2, fp=2, fn=2)
    with pytest.raises(EvaluationError):
        evaluate.confusion_counts([1, 0], [1])
    with pytest.raises(EvaluationError):
        ConfusionCounts(tp=-1)


def test_subject_aggregation_threshold_is_inclusive():
    table = pd.DataFrame({"subject_id": ["a", "a", "b", "b", "b"], "label": [1, 1, 0, 0, 0],
                          "prob": [0.4, 0.6, 0.2, 0.3, 0.1]})
    subjects = evaluate.aggregate_subject(table)
    assert subjects["subject_id"].tolist() == ["a", "b"]
    assert subjects["score"].tolist() == pytest.approx([0.5, 0.2])
    assert subjects["n_fragments"].tolist() == [2, 3]
    assert subjects["pred"].tolist() == [1, 0]
    assert evaluate.aggregate_subject(table, threshold=0.55)["pred"].tolist() == [0, 0]


def test_subject_aggregation_errors():
    with pytest.raises(AggregationError):
        evaluate.aggregate_subject(pd.DataFrame(columns=["subject_id", "label", "prob"]))
    table = pd.DataFrame({"subject_id": ["a", "b"], "label": [1, 0], "prob": [0.9, np.nan]})
    with pytest.raises(AggregationError) as excinfo:
        evaluate.aggregate_subject(table)
    assert excinfo.value.context["subjects"] == ["b"]


def test_predictions_and_evaluation():
    fragments = _fragments({"n1": (Label.NORMAL, 2), "a1": (Label.ABNORMAL, 3)})
    probs = evaluate.predict_fragments(ConstantModel(0.7), fragments, batch_size=2)
    assert probs.tolist() == [0.7] * 5
    assert evaluate.predict_fragments(ConstantModel(0.7), []).size == 0

    table = evaluate.predictions_table(fragments, [0.1, 0.2, 0.9, 0.4, 0.8])
    assert list(table.columns) == ["subject_id", "offset", "source", "label", "prob", "pred"]
    assert table["pred"].tolist() == [0, 0, 1, 0, 1]

    fragment_report, subject_report, subjects = evaluate.evaluate_predictions(table, run_id="r", fold_id=2)
    assert fragment_report.counts == ConfusionCounts(tp=2, tn=2, fp=0, fn=1)
    assert subject_report.counts == ConfusionCounts(tp=1, tn=1)
    assert (subject_report.level, subject_report.fold_id) == ("subject", 2)
    assert len(subjects) == 2

    with pytest.raises(EvaluationError):
        evaluate.predictions_table(fragments, [0.5])


def test_roc_auc():
    labels = [0, 0, 1, 1]
    assert evaluate.roc([0.1, 0.2, 0.8, 0.9], labels).auc == pytest.approx(1.0)
    assert evaluate.roc([0.9, 0.8, 0.2, 0.1], labels).auc == pytest.approx(0.0)
    assert evaluate.roc([0.1, 0.6, 0.4, 0.9], labels).auc == pytest.approx(0.75)
    with pytest.raises(EvaluationError):
        evaluate.roc([0.1, 0.2], [1, 1])


def test_random_scores_have_chance_auc(rng):
    scores = rng.random(10_000)
    labels = rng.integers(0, 2, size=10_000)
    assert evaluate.roc(scores, labels).auc == pytest.approx(0.5, abs=0.02)


def test_subject_constant_scores_give_matching_rates():
    fragments = _fragments({"n1": (Label.NORMAL, 3), "n2": (Label.NORMAL, 3), "n3": (Label.NORMAL, 3),
                            "a1": (Label.ABNORMAL, 3), "a2": (Label.ABNORMAL, 3)})
    per_subject = {"n1": 0.1, "n2": 0.7, "n3": 0.2, "a1": 0.9, "a2": 0.4}
    table = evaluate.predictions_table(fragments, [per_subject[frag.subject_id] for frag in fragments])
    fragment_report, subject_report, _ = evaluate.evaluate_predictions(table)
    assert (fragment_report.tpr, fragment_report.tnr) == pytest.approx((subject_report.tpr, subject_report.tnr))
    assert (subject_report.tpr, subject_report.tnr) == pytest.approx((0.5, 2 / 3))


def test_roc_bands_with_two_runs_span_min_and_max():
    diagonal = RocCurve(fpr=np.array([0.0, 1.0]), tpr=np.array([0.0, 1.0]), thresholds=np.array([2.0, 0.0]), auc=0.5)
    perfect = RocCurve(fpr=np.array([0.0, 0.0, 1.0]), tpr=np.array([0.0, 1.0, 1.0]),
                       thresholds=np.array([2.0, 0.5, 0.0]), auc=1.0)
    bands = evaluate.roc_bands([diagonal, perfect])
    assert bands.grid.size == 101
    np.testing.assert_allclose(bands.lo, bands.grid)
    np.testing.assert_allclose(bands.hi, np.ones(101))
    np.testing.assert_allclose(bands.mean, (bands.grid + 1) / 2)
    assert bands.mean_auc == pytest.approx(0.75)
    with pytest.raises(EvaluationError):
        evaluate.roc_bands([perfect])


def test_summarize_averages_folds_then_runs():
    reports = [_report(0.6, "a", 0), _report(0.8, "a", 1), _report(0.9, "b")]
    summary = evaluate.summarize(reports)
    acc = summary[(summary["level"] == "subject") & (summary["metric"] == "acc")].iloc[0]
    assert acc["mean"] == pytest.approx(0.8)
    assert acc["std"] == pytest.approx(np.std([0.7, 0.9], ddof=1))
    assert acc["n_runs"] == 2
    assert list(summary.columns) == ["level", "metric", "mean", "std", "n_runs"]


def test_summarize_single_run_and_empty():
    summary = evaluate.summarize([_report(0.6, "a")])
    assert (summary["std"] == 0.0).all()
    assert len(summary) == len(evaluate.METRIC_NAMES)
    with pytest.raises(EvaluationError):
        evaluate.summarize([])


def test_report_writes_artifacts(tmp_path):
    reports = [_report(0.6, "a"), _report(0.8, "b"), _report(0.5, "a", level="fragment")]
    curves = {"subject": [evaluate.roc([0.1, 0.9, 0.4, 0.8], [0, 1, 0, 1]),
                          evaluate.roc([0.3, 0.6, 0.7, 0.8], [0, 1, 0, 1])],
              "fragment": [evaluate.roc([0.1, 0.9], [0, 1])]}
    written = evaluate.report(reports, tmp_path, roc_curves=curves)
    assert {"summary_csv", "summary_json", "metrics_jsonl", "roc_subject_csv", "roc_subject_png"} <= set(written)
    assert "roc_fragment_csv" not in written
    assert all(path.is_file() for path in written.values())

    nested = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert nested["subject"]["acc"]["mean"] == pytest.approx(0.7)
    lines = (tmp_path / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    assert [evaluate.report_from_dict(json.loads(line)) for line in lines] == reports
    assert len(pd.read_csv(tmp_path / "roc_subject.csv")) == 101


def test_roc_frame_keeps_numeric_thresholds():
    curve = evaluate.roc([0.1, 0.6, 0.4, 0.9], [0, 0, 1, 1])
    frame = evaluate.roc_to_frame(curve)
    assert np.isfinite(frame["threshold"]).all()
    assert frame["threshold"].iloc[0] > frame["threshold"].iloc[1]
    assert evaluate.roc_from_frame(frame).auc == pytest.approx(curve.auc)
