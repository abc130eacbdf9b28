"""Detection quality metrics: ROC curves and AUC, overall and per anomaly
class, plus the report structure the CLI serializes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

ANY_ANOMALY = "any-anomaly"
NORMAL_LABEL = "normal"


@dataclass(frozen=True)
class LabeledScore:
    frame_id: str
    score: float
    label: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise NumericError(f"score for {self.frame_id!r} is not finite")


@dataclass
class EvaluationReport:
    """Overall and per-class AUC plus the ROC points behind the overall one."""

    overall_auc: float
    per_class: dict[str, float]
    roc_points: list[tuple[float, float]]
    counts: dict[str, int]
    config: dict = field(default_factory=dict)

    def to_json_dict(self, roc_csv_path: str | None = None) -> dict:
        doc = {
            "config": self.config,
            "overall_auc": self.overall_auc,
            "per_class": dict(self.per_class),
            "counts": dict(self.counts),
        }
        if roc_csv_path is not None:
            doc["roc_csv_path"] = roc_csv_path
        return doc


def _split_by_class(scores: list[LabeledScore], positive_class: str):
    """Positive/negative score arrays; other anomaly classes are dropped."""
    negatives = [s.score for s in scores if s.label == NORMAL_LABEL]
    if positive_class == ANY_ANOMALY:
        positives = [s.score for s in scores if s.label != NORMAL_LABEL]
    else:
        positives = [s.score for s in scores if s.label == positive_class]
    if not positives or not negatives:
        raise DataError(
            f"AUC for {positive_class!r} needs both positive and negative examples, "
            f"got {len(positives)} positive / {len(negatives)} negative")
    return np.asarray(positives, np.float64), np.asarray(negatives, np.float64)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0
    return avg[inverse]


def auc(scores: list[LabeledScore], positive_class: str = ANY_ANOMALY) -> float:
    """Probability that a random positive outscores a random negative,
    counting ties as one half (rank form of the pairwise statistic)."""
    pos, neg = _split_by_class(scores, positive_class)
    combined = np.concatenate([pos, neg])
    ranks = _average_ranks(combined)
    rank_sum = ranks[:len(pos)].sum()
    u = rank_sum - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def roc_curve(scores: list[LabeledScore],
              positive_class: str = ANY_ANOMALY) -> list[tuple[float, float]]:
    """(fpr, tpr) points from sweeping the threshold over distinct scores,
    highest first; starts at (0,0) and ends at (1,1)."""
    pos, neg = _split_by_class(scores, positive_class)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    points = [(0.0, 0.0)]
    for t in thresholds:
        tpr = float(np.count_nonzero(pos >= t)) / len(pos)
        fpr = float(np.count_nonzero(neg >= t)) / len(neg)
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def trapezoid_area(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def anomaly_classes(scores: list[LabeledScore]) -> list[str]:
    return sorted({s.label for s in scores if s.label != NORMAL_LABEL})


def report_from_scores(scores: list[LabeledScore], config: dict | None = None) -> EvaluationReport:
    """Assemble the full report: overall AUC, per-class AUC (each class
    against normal frames only), ROC points, and class counts."""
    overall = auc(scores, ANY_ANOMALY)
    per_class = {name: auc(scores, name) for name in anomaly_classes(scores)}
    counts: dict[str, int] = {}
    for s in scores:
        counts[s.label] = counts.get(s.label, 0) + 1
    return EvaluationReport(
        overall_auc=overall,
        per_class=per_class,
        roc_points=roc_curve(scores, ANY_ANOMALY),
        counts=counts,
        config=dict(config or {}),
    )


def evaluate(model, detector_config, frames, config: dict | None = None) -> EvaluationReport:
    """Score labeled frames with the detector and report AUCs.

    Frames may be any iterable (consumed once, one frame resident at a
    time); every frame must carry a label, and both normal and anomalous
    frames must be present.
    """
    from .detector import frame_score  # local import to avoid a cycle

    scores = []
    for frame in frames:
        if frame.label is None:
            raise DataError(f"evaluate: frame {frame.source_id!r} has no label")
        scores.append(LabeledScore(frame.source_id, frame_score(model, frame, detector_config),
                                   frame.label))
    if not scores:
        raise DataError("evaluate: no frames")
    meta = dict(config or {})
    meta.setdefault("detector", detector_config.to_dict())
    return report_from_scores(scores, meta)
