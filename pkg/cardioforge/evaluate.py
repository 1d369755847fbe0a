"""Confusion-matrix metrics, subject aggregation, ROC bands and run reports."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
from sklearn.metrics import auc as trapezoid_auc  # noqa: E402
from sklearn.metrics import roc_curve  # noqa: E402

from cardioforge.errors import AggregationError, EvaluationError  # noqa: E402
from cardioforge.state import Fragment, Label  # noqa: E402

logger = logging.getLogger(__name__)

METRIC_NAMES = ("acc", "uar", "tpr", "tnr", "fpr", "fpr_conventional", "f1", "mcc")
ROC_GRID = np.linspace(0.0, 1.0, 101)
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise EvaluationError(f"Confusion counts must be non-negative, got {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    """
    Rates for one confusion matrix.

    ``fpr`` is FP / (TP + FP), the exported headline rate (a false
    discovery rate); ``fpr_conventional`` is FP / (FP + TN), the ROC axis.
    Rates with a zero denominator are 0 and named in ``degenerate``.
    """

    acc: float
    uar: float
    tpr: float
    tnr: float
    fpr: float
    fpr_conventional: float
    f1: float
    mcc: float
    counts: ConfusionCounts
    level: str = "fragment"
    run_id: Optional[str] = None
    fold_id: Optional[int] = None
    degenerate: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, Any]:
        """The metrics JSON layout: level, metrics, counts, run, fold."""
        return {
            "level": self.level,
            "metrics": {name: getattr(self, name) for name in METRIC_NAMES},
            "counts": asdict(self.counts),
            "run": self.run_id,
            "fold": self.fold_id,
            "degenerate": list(self.degenerate),
        }


def _ratio(numerator: float, denominator: float, name: str, degenerate: list[str]) -> float:
    if denominator == 0:
        degenerate.append(name)
        return 0.0
    return numerator / denominator


def metrics(c: ConfusionCounts, level: str = "fragment", run_id: Optional[str] = None,
            fold_id: Optional[int] = None) -> MetricsReport:
    """
    Accuracy, UAR, TPR, TNR, FPR, F1 and MCC of a confusion matrix.

    Args:
        c: Confusion counts with Abnormal as the positive class.
        level: ``fragment`` or ``subject``.
        run_id: Run tag carried into the report.
        fold_id: Fold index carried into the report.

    Returns:
        MetricsReport: Metrics with degenerate rates reported as 0 and flagged.
    """
    degenerate: list[str] = []
    tp, tn, fp, fn = c.tp, c.tn, c.fp, c.fn
    tpr = _ratio(tp, tp + fn, "tpr", degenerate)
    tnr = _ratio(tn, tn + fp, "tnr", degenerate)
    fpr = _ratio(fp, tp + fp, "fpr", degenerate)
    fpr_conventional = _ratio(fp, fp + tn, "fpr_conventional", degenerate)
    acc = _ratio(tp + tn, c.total, "acc", degenerate)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", degenerate)
    marginals = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = _ratio(tp * tn - fp * fn, math.sqrt(marginals), "mcc", degenerate)
    return MetricsReport(acc=acc, uar=(tpr + tnr) / 2, tpr=tpr, tnr=tnr, fpr=fpr,
                         fpr_conventional=fpr_conventional, f1=f1, mcc=mcc, counts=c, level=level,
                         run_id=run_id, fold_id=fold_id, degenerate=degenerate)


def confusion_counts(y_true: Sequence[int], y_pred: Sequence[int]) -> ConfusionCounts:
    """Counts for binary labels with 1 (Abnormal) as positive."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise EvaluationError(f"Label and prediction shapes differ: {y_true.shape} vs {y_pred.shape}")
    return ConfusionCounts(
        tp=int(np.sum((y_true == 1) & (y_pred == 1))),
        tn=int(np.sum((y_true == 0) & (y_pred == 0))),
        fp=int(np.sum((y_true == 0) & (y_pred == 1))),
        fn=int(np.sum((y_true == 1) & (y_pred == 0))),
    )


def aggregate_subject(fragment_table: pd.DataFrame, threshold: float = DEFAULT_THRESHOLD) -> pd.DataFrame:
    """
    Average fragment probabilities per subject and threshold the mean.

    Args:
        fragment_table: Columns ``subject_id``, ``label`` and ``prob`` (abnormal-class probability).
        threshold: Subject is predicted abnormal iff its mean score >= threshold.

    Returns:
        pd.DataFrame: One row per subject with ``subject_id``, ``label``, ``score``, ``n_fragments``, ``pred``.
    """
    if fragment_table.empty:
        raise AggregationError("No fragment probabilities to aggregate")
    missing = fragment_table["prob"].isna()
    if missing.any():
        subjects = sorted(fragment_table.loc[missing, "subject_id"].unique())
        raise AggregationError(f"Subjects without fragment probabilities: {subjects}", subjects=subjects)
    grouped = fragment_table.groupby("subject_id", sort=True)
    subjects = grouped.agg(label=("label", "first"), score=("prob", "mean"),
                           n_fragments=("prob", "size")).reset_index()
    subjects["pred"] = (subjects["score"] >= threshold).astype(int)
    return subjects


@torch.no_grad()
def predict_fragments(model: torch.nn.Module, fragments: Sequence[Fragment], batch_size: int = 32) -> np.ndarray:
    """Abnormal-class probability for each fragment, in order."""
    if not fragments:
        return np.zeros(0)
    dtype = next(model.parameters()).dtype
    probs = []
    for start in range(0, len(fragments), batch_size):
        batch = torch.as_tensor(np.stack([frag.samples for frag in fragments[start:start + batch_size]]),
                                dtype=dtype)
        probs.append(model.predict_proba(batch))
    return np.concatenate(probs)


def predictions_table(fragments: Sequence[Fragment], probs: Sequence[float],
                      threshold: float = DEFAULT_THRESHOLD) -> pd.DataFrame:
    """Fragment-level predictions: subject, offset, label index, probability and thresholded prediction."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size != len(fragments):
        raise EvaluationError(f"{len(fragments)} fragments but {probs.size} probabilities")
    table = pd.DataFrame({
        "subject_id": [frag.subject_id for frag in fragments],
        "offset": [frag.offset for frag in fragments],
        "source": [frag.source for frag in fragments],
        "label": [Label(frag.label).index for frag in fragments],
        "prob": probs,
    })
    table["pred"] = (table["prob"] >= threshold).astype(int)
    return table


def evaluate_predictions(table: pd.DataFrame, threshold: float = DEFAULT_THRESHOLD, run_id: Optional[str] = None,
                         fold_id: Optional[int] = None) -> tuple[MetricsReport, MetricsReport, pd.DataFrame]:
    """Fragment-level report, subject-level report and the subject table."""
    fragment_report = metrics(confusion_counts(table["label"], table["pred"]), "fragment", run_id, fold_id)
    subjects = aggregate_subject(table, threshold)
    subject_report = metrics(confusion_counts(subjects["label"], subjects["pred"]), "subject", run_id, fold_id)
    return fragment_report, subject_report, subjects


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """
    ROC over every unique score threshold with a trapezoidal AUC.

    The FPR axis is the conventional FP / (FP + TN).
    """
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if np.unique(labels).size < 2:
        raise EvaluationError("ROC needs both classes in the labels")
    fpr, tpr, thresholds = roc_curve(labels, scores, pos_label=1, drop_intermediate=False)
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=float(trapezoid_auc(fpr, tpr)))


@dataclass
class RocBands:
    grid: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    mean_auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fpr": self.grid, "tpr_mean": self.mean, "tpr_lo": self.lo, "tpr_hi": self.hi})


def _interp_curve(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    # For repeated FPR values take the highest TPR reached at that FPR
    fpr, index = np.unique(curve.fpr, return_index=True)
    tpr = np.maximum.reduceat(curve.tpr, index)
    return np.interp(grid, fpr, tpr)


def roc_bands(curves: Sequence[RocCurve], lower: float = 2.5, upper: float = 97.5) -> RocBands:
    """
    Vertical averaging of ROC curves on a 101-point FPR grid.

    Band edges are per-grid-point empirical percentiles (inverted CDF), so
    with two runs they are the pointwise min and max.
    """
    if len(curves) < 2:
        raise EvaluationError(f"ROC bands need at least 2 runs, got {len(curves)}")
    stacked = np.stack([_interp_curve(curve, ROC_GRID) for curve in curves])
    return RocBands(
        grid=ROC_GRID.copy(),
        mean=stacked.mean(axis=0),
        lo=np.percentile(stacked, lower, axis=0, method="inverted_cdf"),
        hi=np.percentile(stacked, upper, axis=0, method="inverted_cdf"),
        mean_auc=float(np.mean([curve.auc for curve in curves])),
    )


def plot_roc_bands(bands: RocBands, path: Union[str, Path], title: str = "ROC") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.fill_between(bands.grid, bands.lo, bands.hi, alpha=0.3, label="2.5%-97.5%")
    ax.plot(bands.grid, bands.mean, label=f"mean (AUC {bands.mean_auc:.3f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def _sample_std(values: pd.Series) -> float:
    return float(values.std(ddof=1)) if len(values) > 1 else 0.0


def summarize(reports: Iterable[MetricsReport]) -> pd.DataFrame:
    """
    Mean and sample standard deviation per (level, metric).

    Reports carrying fold ids are first averaged over folds within each run,
    then summarised over runs.
    """
    rows = [{"level": r.level, "run": r.run_id or "0", "fold": r.fold_id,
             **{name: getattr(r, name) for name in METRIC_NAMES}} for r in reports]
    if not rows:
        raise EvaluationError("No reports to summarise")
    table = pd.DataFrame(rows)
    per_run = table.groupby(["level", "run"], sort=True)[list(METRIC_NAMES)].mean().reset_index()
    summary_rows = []
    for level, group in per_run.groupby("level", sort=True):
        for name in METRIC_NAMES:
            summary_rows.append({"level": level, "metric": name, "mean": float(group[name].mean()),
                                 "std": _sample_std(group[name]), "n_runs": len(group)})
    return pd.DataFrame(summary_rows)


def report(reports: Sequence[MetricsReport], out_dir: Union[str, Path],
           roc_curves: Optional[dict[str, Sequence[RocCurve]]] = None) -> dict[str, Path]:
    """
    Write summary JSON/CSV, the per-run metrics table and, when at least two
    runs are given per level, ROC band CSV and PNG.

    Returns:
        dict[str, Path]: Written artifacts by name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(reports)
    written = {}

    written["summary_csv"] = out_dir / "summary.csv"
    summary.to_csv(written["summary_csv"], index=False, float_format="%.6f")

    nested: dict[str, dict[str, dict[str, float]]] = {}
    for row in summary.itertuples(index=False):
        nested.setdefault(row.level, {})[row.metric] = {"mean": row.mean, "std": row.std}
    written["summary_json"] = out_dir / "summary.json"
    written["summary_json"].write_text(json.dumps(nested, indent=2, sort_keys=True), encoding="utf-8")

    written["metrics_jsonl"] = out_dir / "metrics.jsonl"
    written["metrics_jsonl"].write_text(
        "".join(json.dumps(r.as_dict(), sort_keys=True) + "\n" for r in reports), encoding="utf-8")

    for level, curves in (roc_curves or {}).items():
        if len(curves) < 2:
            logger.info(f"Skipping ROC bands for {level}: {len(curves)} run(s)")
            continue
        bands = roc_bands(curves)
        written[f"roc_{level}_csv"] = out_dir / f"roc_{level}.csv"
        bands.to_frame().to_csv(written[f"roc_{level}_csv"], index=False, float_format="%.6f")
        written[f"roc_{level}_png"] = plot_roc_bands(bands, out_dir / f"roc_{level}.png", title=f"ROC ({level})")
    logger.info(f"Report written to {out_dir} ({len(reports)} metric reports)")
    return written


def report_from_dict(payload: dict[str, Any]) -> MetricsReport:
    """Inverse of ``MetricsReport.as_dict``."""
    return MetricsReport(**payload["metrics"], counts=ConfusionCounts(**payload["counts"]), level=payload["level"],
                         run_id=payload.get("run"), fold_id=payload.get("fold"),
                         degenerate=list(payload.get("degenerate", [])))


def roc_to_frame(curve: RocCurve) -> pd.DataFrame:
    # sklearn puts +inf as the first threshold; keep the CSV numeric
    thresholds = np.where(np.isfinite(curve.thresholds), curve.thresholds, 1.0 + np.max(curve.thresholds[1:], initial=0.0))
    return pd.DataFrame({"fpr": curve.fpr, "tpr": curve.tpr, "threshold": thresholds})


def roc_from_frame(frame: pd.DataFrame) -> RocCurve:
    fpr = frame["fpr"].to_numpy(dtype=np.float64)
    tpr = frame["tpr"].to_numpy(dtype=np.float64)
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=frame["threshold"].to_numpy(dtype=np.float64),
                    auc=float(trapezoid_auc(fpr, tpr)))
