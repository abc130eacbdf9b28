"""Frame-level anomaly scoring: sample patches from the prepared frame,
score each with the autoencoder, aggregate into one scalar. Also the
streaming threshold alarm over ordered frame sequences.

Patch coordinates for a frame are seeded by (detector seed, digest of the
frame pixels), so scores depend only on pixel content and configuration,
never on labels, file names, or evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import preprocessing as pp
from . import rng
from .autoencoder import AutoencoderModel
from .errors import ConfigError, DataError, ShapeError
from .preprocessing import SCALES

DEFAULT_SUB8_PATCHES = 250
SCORE_CHUNK = 256


def parse_aggregation(method: str) -> tuple[str, float]:
    """'mean' or 'quantile:<q>' with q in (0,1]."""
    if method == "mean":
        return "mean", 0.0
    if method.startswith("quantile:"):
        try:
            q = float(method.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad quantile in aggregation {method!r}") from exc
        if not 0.0 < q <= 1.0:
            raise ConfigError(f"quantile must be in (0,1], got {q}")
        return "quantile", q
    raise ConfigError(f"unknown aggregation {method!r}, expected 'mean' or 'quantile:<q>'")


def aggregate(scores, method: str = "mean") -> float:
    """Reduce patch scores to a frame score; quantiles interpolate linearly
    between order statistics."""
    values = np.asarray(scores, np.float64)
    if values.size == 0:
        raise DataError("aggregate: empty score list")
    kind, q = parse_aggregation(method)
    if kind == "mean":
        return float(values.mean())
    return float(np.quantile(values, q, method="linear"))


@dataclass(frozen=True)
class DetectorConfig:
    scale: int = 8
    n_patches: int | None = None  # resolved: 1 at scale 8, else 250
    aggregation: str = "mean"
    rng_seed: int = 0

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.n_patches is None:
            resolved = 1 if self.scale == 8 else DEFAULT_SUB8_PATCHES
            object.__setattr__(self, "n_patches", resolved)
        if self.n_patches < 1:
            raise ConfigError(f"n_patches must be positive, got {self.n_patches}")
        if self.scale == 8 and self.n_patches != 1:
            raise ConfigError("scale 8 admits exactly one distinct patch, use n_patches=1")
        parse_aggregation(self.aggregation)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "n_patches": self.n_patches,
                "aggregation": self.aggregation, "rng_seed": self.rng_seed}


@dataclass(frozen=True)
class StreamConfig:
    threshold: float
    detector: DetectorConfig

    def __post_init__(self):
        if self.threshold < 0:
            raise ConfigError(f"threshold must be non-negative, got {self.threshold}")


@dataclass(frozen=True)
class StreamRecord:
    index: int
    score: float
    alarm: bool

    def line(self) -> str:
        return f"{self.index},{self.score:.6f},{int(self.alarm)}"


def _check_model_frame(model: AutoencoderModel, frame: pp.Frame) -> None:
    if frame.channels != model.config.input_channels:
        raise ShapeError(f"frame {frame.source_id!r} has {frame.channels} channels, "
                         f"model expects {model.config.input_channels}")


def _frame_seed(config: DetectorConfig, frame: pp.Frame) -> int:
    return rng.derive_seed(config.rng_seed, "detector", frame.pixels.tobytes())


def patch_scores_for_frame(model: AutoencoderModel, frame: pp.Frame,
                           config: DetectorConfig) -> np.ndarray:
    """Anomaly scores of the frame's sampled patches, in draw order."""
    _check_model_frame(model, frame)
    prepared = pp.prepare(frame, config.scale)
    coords = pp.sample_patch_coords(prepared.shape[1], prepared.shape[2],
                                    config.n_patches, _frame_seed(config, frame))
    scores = np.empty(len(coords), np.float64)
    for start in range(0, len(coords), SCORE_CHUNK):
        chunk = coords[start:start + SCORE_CHUNK]
        batch = np.stack([pp.extract_patch(prepared, c) for c in chunk])
        scores[start:start + len(chunk)] = model.score_patch_batch(batch)
    return scores


def frame_score(model: AutoencoderModel, frame: pp.Frame, config: DetectorConfig) -> float:
    """The aggregated frame-level anomaly score."""
    return aggregate(patch_scores_for_frame(model, frame, config), config.aggregation)


def score_frames(model: AutoencoderModel, frames, config: DetectorConfig,
                 return_patch_scores: bool = False):
    """Score an iterable of frames; per-frame patch scores optionally kept.

    Each frame is scored independently (patches of one frame share a
    forward batch), so results match frame_score exactly and do not depend
    on how frames are grouped.
    """
    frame_scores: list[float] = []
    patch_scores: list[np.ndarray] = []
    for frame in frames:
        per_patch = patch_scores_for_frame(model, frame, config)
        frame_scores.append(aggregate(per_patch, config.aggregation))
        if return_patch_scores:
            patch_scores.append(per_patch)
    if return_patch_scores:
        return frame_scores, patch_scores
    return frame_scores


def calibrate_threshold(model: AutoencoderModel, validation_frames,
                        config: DetectorConfig, percentile: float) -> float:
    """Threshold at the given percentile of validation frame scores."""
    if not 0.0 <= percentile <= 100.0:
        raise ConfigError(f"percentile must be in [0,100], got {percentile}")
    scores = score_frames(model, validation_frames, config)
    if not scores:
        raise DataError("calibrate_threshold: empty validation set")
    return float(np.percentile(scores, percentile, method="linear"))


def stream_detect(model: AutoencoderModel, frames, config: StreamConfig) -> list[StreamRecord]:
    """Score an ordered frame sequence; alarm wherever score > threshold."""
    records = []
    for index, frame in enumerate(frames):
        score = frame_score(model, frame, config.detector)
        records.append(StreamRecord(index, score, score > config.threshold))
    return records


def alarm_intervals(records: list[StreamRecord]) -> list[tuple[int, int]]:
    """Contiguous alarm runs as half-open (start, end) index intervals."""
    intervals = []
    start = None
    for rec in records:
        if rec.alarm and start is None:
            start = rec.index
        elif not rec.alarm and start is not None:
            intervals.append((start, rec.index))
            start = None
    if start is not None:
        intervals.append((start, records[-1].index + 1))
    return intervals


def interval_iou(predicted: list[tuple[int, int]], truth: list[tuple[int, int]]) -> float:
    """Frame-set intersection over union of two interval collections."""
    pred = set()
    for a, b in predicted:
        pred.update(range(a, b))
    true = set()
    for a, b in truth:
        true.update(range(a, b))
    union = pred | true
    if not union:
        return 1.0
    return len(pred & true) / len(union)
