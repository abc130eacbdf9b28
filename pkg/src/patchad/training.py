"""Training loop: online patch sampling against a fixed total-sample
budget, Adam with plateau-driven learning-rate reduction, and selection of
the best-validation-loss epoch.

An "epoch" is a accounting convention under online sampling: by default
20,000 patch presentations, so the standard 2M budget spans 100 epochs.
Validation always uses the same seeded patch set, making epoch losses
comparable. Training loss is mean squared error; the anomaly score used at
detection time is mean absolute error. Keep the two apart.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as en
from . import preprocessing as pp
from . import rng
from .autoencoder import AutoencoderConfig, AutoencoderModel
from .dataset import DatasetManifest, ManifestEntry, load_frame
from .errors import ConfigError, DataError, LabelError, NumericError

logger = logging.getLogger(__name__)

PREPARED_CACHE_BYTES = 700 * 1024 * 1024
TRAIN_BATCH_CAP = 512


@dataclass(frozen=True)
class TrainingConfig:
    scale: int = 8
    total_samples: int = 2_000_000
    batch_size: int = 128
    samples_per_epoch: int = 20_000
    initial_lr: float = 0.001
    plateau_patience: int = 8
    plateau_factor: float = 10.0
    plateau_rel_improvement: float = 1e-3
    val_patches_per_frame: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.scale not in pp.SCALES:
            raise ConfigError(f"scale must be one of {pp.SCALES}, got {self.scale}")
        if self.total_samples < 1:
            raise ConfigError("total_samples must be positive")
        if not 1 <= self.batch_size <= min(self.samples_per_epoch, TRAIN_BATCH_CAP):
            raise ConfigError(f"batch_size must be in [1, {min(self.samples_per_epoch, TRAIN_BATCH_CAP)}]")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.plateau_factor <= 1:
            raise ConfigError("plateau_factor must be > 1")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")

    @property
    def epochs(self) -> int:
        return -(-self.total_samples // self.samples_per_epoch)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float
    seconds: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        losses = [r.val_loss for r in self.records]
        return int(np.argmin(losses))

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch].val_loss

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                                 repr(r.learning_rate), f"{r.seconds:.3f}"])


def plateau_schedule(history: TrainingHistory, patience: int, factor: float,
                     rel_improvement: float = 1e-3) -> float:
    """Next learning rate given the epoch history.

    The rate drops by `factor` once the best validation loss has not
    improved (by more than the relative epsilon) for strictly more than
    `patience` epochs since the last improvement or reduction.
    """
    if patience < 1 or factor <= 1:
        raise ConfigError("plateau_schedule: need patience >= 1 and factor > 1")
    records = history.records
    if not records:
        raise DataError("plateau_schedule: empty history")
    best = records[0].val_loss
    last_event = 0
    for i, rec in enumerate(records):
        if i > 0 and rec.learning_rate != records[i - 1].learning_rate:
            last_event = i
        if rec.val_loss < best * (1.0 - rel_improvement):
            best = rec.val_loss
            last_event = i
    current = records[-1].learning_rate
    stagnant = len(records) - 1 - last_event
    if stagnant > patience:
        return current / factor
    return current


# ---------------------------------------------------------------------------
# frame access


class FrameSource:
    """Uniform access to training/validation frames with a bounded cache of
    prepared (downsampled, standardized) images.

    Accepts either in-memory Frame objects or manifest entries loaded from
    disk on demand; raw pixels are kept as compact uint8 where possible.
    """

    def __init__(self, frames=None, manifest: DatasetManifest | None = None,
                 entries: list[ManifestEntry] | None = None,
                 cache_bytes: int = PREPARED_CACHE_BYTES):
        if (frames is None) == (manifest is None):
            raise ConfigError("FrameSource: pass either frames or manifest+entries")
        self._frames = list(frames) if frames is not None else None
        self._manifest = manifest
        self._entries = entries
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        self._cache_bytes = cache_bytes
        self._cache_used = 0
        if self._frames is not None:
            self.labels = [f.label for f in self._frames]
        else:
            self.labels = [e.label for e in entries]

    def __len__(self) -> int:
        return len(self._frames) if self._frames is not None else len(self._entries)

    def frame(self, index: int) -> pp.Frame:
        if self._frames is not None:
            return self._frames[index]
        return load_frame(self._manifest, self._entries[index])

    def prepared(self, index: int, scale: int) -> np.ndarray:
        key = (index, scale)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        out = pp.prepare(self.frame(index), scale)
        if self._cache_used + out.nbytes <= self._cache_bytes:
            self._cache[key] = out
            self._cache_used += out.nbytes
        return out


def _as_source(frames) -> FrameSource:
    return frames if isinstance(frames, FrameSource) else FrameSource(frames=list(frames))


# ---------------------------------------------------------------------------
# validation


def validate(model: AutoencoderModel, validation_frames, scale: int, seed: int,
             patches_per_frame: int = 4) -> float:
    """Mean squared reconstruction error over a fixed seeded patch set."""
    source = _as_source(validation_frames)
    if len(source) == 0:
        raise DataError("validate: empty validation set")
    per_frame = 1 if scale == 8 else patches_per_frame
    total_sse = 0.0
    total_elems = 0
    batch: list[np.ndarray] = []

    def flush():
        nonlocal total_sse, total_elems
        if not batch:
            return
        x = np.stack(batch)
        with en.no_grad():
            recon = model.forward(en.Tensor(x))
        diff = recon.data.astype(np.float64) - x
        total_sse += float(np.sum(diff * diff))
        total_elems += diff.size
        batch.clear()

    for index in range(len(source)):
        prepared = source.prepared(index, scale)
        coords = pp.sample_patch_coords(prepared.shape[1], prepared.shape[2], per_frame,
                                        rng.derive_seed(seed, "val-patch", index))
        for c in coords:
            batch.append(pp.extract_patch(prepared, c))
            if len(batch) >= TRAIN_BATCH_CAP:
                flush()
    flush()
    return total_sse / total_elems


# ---------------------------------------------------------------------------
# training


def _epoch_draws(config: TrainingConfig, n_frames: int, epoch: int,
                 n_samples: int) -> list[tuple[int, pp.PatchCoords]]:
    """The deterministic (frame, coords) stream for one epoch.

    Draws come in small per-frame groups so the preprocessing of a frame is
    amortized over several patches; the stream is a pure function of
    (seed, epoch), never of prior epochs or iteration timing.
    """
    group = 1 if config.scale == 8 else 8
    n_groups = -(-n_samples // group)
    frame_ids = rng.stream(config.seed, "epoch-frames", epoch).integers(0, n_frames, n_groups)
    draws: list[tuple[int, pp.PatchCoords]] = []
    extent = pp.FRAME_EXTENT // config.scale
    for g, frame_id in enumerate(frame_ids):
        count = min(group, n_samples - len(draws))
        coords = pp.sample_patch_coords(extent, extent, count,
                                        rng.derive_seed(config.seed, "epoch-coords", epoch, g))
        draws.extend((int(frame_id), c) for c in coords)
        if len(draws) >= n_samples:
            break
    return draws


def train(config: TrainingConfig, model_config: AutoencoderConfig,
          train_frames, validation_frames) -> tuple[AutoencoderModel, TrainingHistory]:
    """Train a fresh autoencoder; returns the best-validation-epoch model.

    Consumes exactly config.total_samples patch presentations. Aborts with
    NumericError if the loss stops being finite.
    """
    source = _as_source(train_frames)
    val_source = _as_source(validation_frames)
    if len(source) == 0:
        raise DataError("train: empty training set")
    if len(val_source) == 0:
        raise DataError("train: empty validation set")
    bad = [source.labels[i] for i in range(len(source))
           if source.labels[i] not in (None, "normal")]
    if bad:
        raise LabelError(f"train: training frames must be normal, found {sorted(set(bad))}")

    model = AutoencoderModel.build(model_config)
    states = {name: en.AdamState.initial(tensor, learning_rate=config.initial_lr)
              for name, tensor in model.params.items()}
    history = TrainingHistory()
    lr = config.initial_lr
    best_snapshot = None
    best_val = np.inf
    samples_done = 0
    started = time.monotonic()

    for epoch in range(config.epochs):
        n_epoch = min(config.samples_per_epoch, config.total_samples - samples_done)
        draws = _epoch_draws(config, len(source), epoch, n_epoch)
        loss_sum = 0.0
        for start in range(0, len(draws), config.batch_size):
            chunk = draws[start:start + config.batch_size]
            patches = np.empty((len(chunk), model_config.input_channels,
                                pp.PATCH_EXTENT, pp.PATCH_EXTENT), np.float32)
            for row, (frame_id, coords) in enumerate(chunk):
                patches[row] = pp.extract_patch(source.prepared(frame_id, config.scale), coords)
            x = en.Tensor(patches)
            loss = en.mse_loss(model.forward(x), x)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"train: non-finite loss at epoch {epoch}, "
                                   f"sample offset {samples_done + start}")
            grads = en.gradients(loss, model.params.values())
            for name in model.params:
                tensor = model.params[name]
                model.params[name], states[name] = en.adam_step(tensor, grads[tensor], states[name])
            loss_sum += value * len(chunk)
        samples_done += len(draws)

        val_loss = validate(model, val_source, config.scale, config.seed,
                            config.val_patches_per_frame)
        history.records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(draws),
            val_loss=val_loss,
            learning_rate=lr,
            seconds=time.monotonic() - started,
        ))
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = model.copy_parameters()
        new_lr = plateau_schedule(history, config.plateau_patience, config.plateau_factor,
                                  config.plateau_rel_improvement)
        if new_lr != lr:
            logger.info("epoch %d: validation plateau, lr %.2e -> %.2e", epoch, lr, new_lr)
            lr = new_lr
            states = {name: state.with_learning_rate(lr) for name, state in states.items()}

    if best_snapshot is not None:
        model.restore_parameters(best_snapshot)
    model.meta.epochs_seen = config.epochs
    model.meta.samples_seen = samples_done
    model.meta.final_validation_loss = float(best_val)
    return model, history
