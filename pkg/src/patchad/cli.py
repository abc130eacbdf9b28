"""Command-line pipeline: gen / train / score / eval / sweep / stream.

Configuration precedence is flags > config file (JSON) > defaults, and
every run writes its fully resolved configuration to run_config.json in
the output directory, so any artifact can be regenerated from its record.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure,
5 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import autoencoder as ae
from . import detector as det
from . import evaluation as ev
from . import synthetic as syn
from . import training as tr
from .dataset import load_frame, load_manifest
from .errors import (ConfigError, DataError, NumericError, PatchadError, StorageError)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

WORKERS_ENV = "PATCHAD_WORKERS"


def _default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _resolve(defaults: dict, file_config: dict, flags: dict) -> dict:
    """defaults < file < flags; unknown file keys are configuration errors."""
    unknown = set(file_config) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved = dict(defaults)
    resolved.update(file_config)
    resolved.update({k: v for k, v in flags.items() if v is not None})
    return resolved


def _write_run_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config": resolved}
    (out_dir / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _detector_config(resolved: dict) -> det.DetectorConfig:
    return det.DetectorConfig(
        scale=resolved["scale"],
        n_patches=resolved["n_patches"],
        aggregation=resolved["aggregation"],
        rng_seed=resolved["seed"],
    )


def _frames(manifest, entries):
    for entry in entries:
        yield load_frame(manifest, entry)


# ---------------------------------------------------------------------------
# gen


GEN_DEFAULTS = {
    "seed": 0,
    "train_frames": 2000,
    "validation_frames": 200,
    "test_frames": 1000,
    "anomalous_fraction": 0.4,
    "anomaly_classes": list(syn.ANOMALY_CLASSES),
    "qualitative_sequences": 2,
    "sequence_frames": 300,
    "noise_octaves": 4,
    "texture_amplitude": 0.45,
    "illumination_falloff": 0.40,
}


def cmd_gen(args) -> int:
    resolved = _resolve(GEN_DEFAULTS, _load_config_file(args.config), {
        "seed": args.seed,
        "train_frames": args.train_frames,
        "validation_frames": args.validation_frames,
        "test_frames": args.test_frames,
        "sequence_frames": args.sequence_frames,
    })
    out = Path(args.out)
    config = syn.SynthConfig(**{**resolved, "anomaly_classes": tuple(resolved["anomaly_classes"])})
    _write_run_config(out, "gen", resolved)
    workers = args.workers or _default_workers()
    manifest = syn.generate_synthetic(config, out, workers=workers)
    print(f"gen: wrote {len(manifest.entries)} frames under {out}")
    return 0


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "scale": 8,
    "first_layer_size": 128,
    "bottleneck_size": 16,
    "total_samples": 2_000_000,
    "batch_size": 128,
    "samples_per_epoch": 20_000,
    "initial_lr": 0.001,
    "plateau_patience": 8,
    "plateau_factor": 10.0,
    "val_patches_per_frame": 4,
    "seed": 0,
}


def cmd_train(args) -> int:
    resolved = _resolve(TRAIN_DEFAULTS, _load_config_file(args.config), {
        "scale": args.scale,
        "first_layer_size": args.first_layer_size,
        "bottleneck_size": args.bottleneck_size,
        "total_samples": args.total_samples,
        "batch_size": args.batch_size,
        "samples_per_epoch": args.samples_per_epoch,
        "seed": args.seed,
    })
    manifest = load_manifest(args.data)
    out = Path(args.out)
    _write_run_config(out, "train", {**resolved, "data": str(args.data)})

    model_config = ae.AutoencoderConfig(
        first_layer_size=resolved["first_layer_size"],
        bottleneck_size=resolved["bottleneck_size"],
        input_channels=manifest.channels,
        seed=resolved["seed"],
    )
    train_config = tr.TrainingConfig(
        scale=resolved["scale"],
        total_samples=resolved["total_samples"],
        batch_size=resolved["batch_size"],
        samples_per_epoch=resolved["samples_per_epoch"],
        initial_lr=resolved["initial_lr"],
        plateau_patience=resolved["plateau_patience"],
        plateau_factor=resolved["plateau_factor"],
        val_patches_per_frame=resolved["val_patches_per_frame"],
        seed=resolved["seed"],
    )
    train_source = tr.FrameSource(manifest=manifest, entries=manifest.split("train"))
    val_source = tr.FrameSource(manifest=manifest, entries=manifest.split("validation"))
    model, history = tr.train(train_config, model_config, train_source, val_source)
    ae.save(model, out / "model.ckpt")
    history.save_csv(out / "history.csv")
    print(f"train: best val loss {history.best_val_loss:.6f} at epoch {history.best_epoch}; "
          f"checkpoint {out / 'model.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# score


SCORE_DEFAULTS = {
    "scale": None,
    "n_patches": None,
    "aggregation": "mean",
    "seed": 0,
    "split": "test",
}


def cmd_score(args) -> int:
    resolved = _resolve(SCORE_DEFAULTS, _load_config_file(args.config), {
        "scale": args.scale,
        "n_patches": args.n_patches,
        "aggregation": args.aggregation,
        "seed": args.seed,
        "split": args.split,
    })
    if resolved["scale"] is None:
        raise ConfigError("score: --scale is required (or set it in the config file)")
    model = ae.load(args.checkpoint)
    manifest = load_manifest(args.data)
    entries = manifest.split(resolved["split"])
    if not entries:
        raise DataError(f"score: split {resolved['split']!r} is empty")
    config = _detector_config(resolved)
    out = Path(args.out)
    _write_run_config(out.parent if out.suffix else out, "score",
                      {**resolved, "checkpoint": str(args.checkpoint), "data": str(args.data),
                       "patch_scores": bool(args.patch_scores)})
    csv_path = out if out.suffix else out / "scores.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["path", "score"]
        if args.patch_scores:
            header.append("patch_scores")
        writer.writerow(header)
        for entry in entries:
            frame = load_frame(manifest, entry)
            per_patch = det.patch_scores_for_frame(model, frame, config)
            row = [entry.path, repr(det.aggregate(per_patch, config.aggregation))]
            if args.patch_scores:
                row.append(";".join(repr(float(s)) for s in per_patch))
            writer.writerow(row)
    print(f"score: wrote {len(entries)} scores to {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _read_scores_csv(path: Path, manifest) -> list[ev.LabeledScore]:
    labels = {e.path: e.label for e in manifest.entries}
    scores = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            label = labels.get(row["path"])
            if label is None:
                raise DataError(f"eval: {row['path']} not present in the manifest")
            scores.append(ev.LabeledScore(row["path"], float(row["score"]), label))
    return scores


def _write_report(report: ev.EvaluationReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    roc_path = out / "roc.csv"
    with open(roc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in report.roc_points:
            writer.writerow([repr(fpr), repr(tpr)])
    (out / "report.json").write_text(
        json.dumps(report.to_json_dict(roc_csv_path=roc_path.name), indent=2, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    resolved = _resolve(SCORE_DEFAULTS, _load_config_file(args.config), {
        "scale": args.scale,
        "n_patches": args.n_patches,
        "aggregation": args.aggregation,
        "seed": args.seed,
        "split": args.split,
    })
    manifest = load_manifest(args.data)
    out = Path(args.out)
    if args.scores:
        scores = _read_scores_csv(Path(args.scores), manifest)
        report = ev.report_from_scores(scores, {"scores_csv": str(args.scores)})
        run_record = {"scores": str(args.scores), "data": str(args.data)}
    else:
        if not args.checkpoint:
            raise ConfigError("eval: pass --scores or --checkpoint")
        if resolved["scale"] is None:
            raise ConfigError("eval: --scale is required with --checkpoint")
        model = ae.load(args.checkpoint)
        config = _detector_config(resolved)
        entries = manifest.split(resolved["split"])
        report = ev.evaluate(model, config, _frames(manifest, entries))
        run_record = {**resolved, "checkpoint": str(args.checkpoint), "data": str(args.data)}
    _write_run_config(out, "eval", run_record)
    _write_report(report, out)
    per_class = ", ".join(f"{k}={v:.3f}" for k, v in sorted(report.per_class.items()))
    print(f"eval: overall AUC {report.overall_auc:.4f} ({per_class})")
    return 0


# ---------------------------------------------------------------------------
# sweep


SWEEP_DEFAULTS = {
    "scales": [8],
    "first_layer_sizes": [128],
    "bottleneck_sizes": [16],
    "n_patches": None,          # null -> per-scale default (1 at s=8 else 250)
    "aggregations": ["mean"],
    "total_samples": 2_000_000,
    "batch_size": 128,
    "samples_per_epoch": 20_000,
    "seed": 0,
    "split": "test",
}


def cmd_sweep(args) -> int:
    resolved = _resolve(SWEEP_DEFAULTS, _load_config_file(args.config), {
        "total_samples": args.total_samples,
        "samples_per_epoch": args.samples_per_epoch,
        "seed": args.seed,
    })
    manifest = load_manifest(args.data)
    out = Path(args.out)
    _write_run_config(out, "sweep", {**resolved, "data": str(args.data)})
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)

    train_source = tr.FrameSource(manifest=manifest, entries=manifest.split("train"))
    val_source = tr.FrameSource(manifest=manifest, entries=manifest.split("validation"))
    rows = []
    class_names: set[str] = set()
    for first_layer in resolved["first_layer_sizes"]:
        for bottleneck in resolved["bottleneck_sizes"]:
            for scale in resolved["scales"]:
                model_key = f"F{first_layer}_B{bottleneck}_s{scale}"
                ckpt = out / "models" / f"{model_key}.ckpt"
                model_config = ae.AutoencoderConfig(
                    first_layer_size=first_layer, bottleneck_size=bottleneck,
                    input_channels=manifest.channels, seed=resolved["seed"])
                train_config = tr.TrainingConfig(
                    scale=scale, total_samples=resolved["total_samples"],
                    batch_size=resolved["batch_size"],
                    samples_per_epoch=resolved["samples_per_epoch"], seed=resolved["seed"])
                model, history = tr.train(train_config, model_config, train_source, val_source)
                ae.save(model, ckpt)
                history.save_csv(out / "models" / f"{model_key}_history.csv")
                patch_counts = resolved["n_patches"] or [None]
                for n_patches in patch_counts:
                    for aggregation in resolved["aggregations"]:
                        config = det.DetectorConfig(
                            scale=scale,
                            n_patches=(1 if scale == 8 else n_patches),
                            aggregation=aggregation, rng_seed=resolved["seed"])
                        report = ev.evaluate(
                            model, config,
                            _frames(manifest, manifest.split(resolved["split"])))
                        key = f"{model_key}_n{config.n_patches}_{aggregation.replace(':', '')}"
                        _write_report(report, out / "reports" / key)
                        class_names.update(report.per_class)
                        rows.append({
                            "first_layer_size": first_layer, "bottleneck_size": bottleneck,
                            "scale": scale, "n_patches": config.n_patches,
                            "aggregation": aggregation, "overall_auc": report.overall_auc,
                            **{f"auc_{k}": v for k, v in report.per_class.items()},
                        })
                        print(f"sweep: {key} overall AUC {report.overall_auc:.4f}")
    columns = ["first_layer_size", "bottleneck_size", "scale", "n_patches",
               "aggregation", "overall_auc"] + [f"auc_{c}" for c in sorted(class_names)]
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep: {len(rows)} evaluations, summary at {out / 'summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# stream


STREAM_DEFAULTS = {
    "scale": 8,
    "n_patches": None,
    "aggregation": "mean",
    "seed": 0,
    "sequence": None,
    "threshold": None,
    "calibrate_percentile": 99.0,
}


def cmd_stream(args) -> int:
    resolved = _resolve(STREAM_DEFAULTS, _load_config_file(args.config), {
        "scale": args.scale,
        "n_patches": args.n_patches,
        "aggregation": args.aggregation,
        "seed": args.seed,
        "sequence": args.sequence,
        "threshold": args.threshold,
        "calibrate_percentile": args.calibrate_percentile,
    })
    model = ae.load(args.checkpoint)
    manifest = load_manifest(args.data)
    sequences = manifest.sequences()
    if not sequences:
        raise DataError("stream: dataset has no qualitative sequences")
    seq_id = resolved["sequence"] or sorted(sequences)[0]
    if seq_id not in sequences:
        raise DataError(f"stream: unknown sequence {seq_id!r}, have {sorted(sequences)}")
    config = _detector_config(resolved)
    threshold = resolved["threshold"]
    if threshold is None:
        threshold = det.calibrate_threshold(
            model, _frames(manifest, manifest.split("validation")), config,
            resolved["calibrate_percentile"])
    stream_config = det.StreamConfig(threshold=float(threshold), detector=config)
    records = det.stream_detect(model, _frames(manifest, sequences[seq_id]), stream_config)
    out = Path(args.out)
    _write_run_config(out, "stream", {**resolved, "sequence": seq_id,
                                      "resolved_threshold": float(threshold),
                                      "checkpoint": str(args.checkpoint),
                                      "data": str(args.data)})
    with open(out / "stream.txt", "w") as fh:
        for rec in records:
            fh.write(rec.line() + "\n")
            print(rec.line())
    alarms = sum(r.alarm for r in records)
    print(f"stream: {alarms}/{len(records)} frames over threshold {threshold:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchad",
                                     description="Patch-autoencoder visual anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate the synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--train-frames", type=int, dest="train_frames")
    gen.add_argument("--validation-frames", type=int, dest="validation_frames")
    gen.add_argument("--test-frames", type=int, dest="test_frames")
    gen.add_argument("--sequence-frames", type=int, dest="sequence_frames")
    gen.add_argument("--workers", type=int)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train an autoencoder on the train split")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--config")
    train.add_argument("--scale", type=int)
    train.add_argument("--first-layer-size", type=int, dest="first_layer_size")
    train.add_argument("--bottleneck-size", type=int, dest="bottleneck_size")
    train.add_argument("--total-samples", type=int, dest="total_samples")
    train.add_argument("--batch-size", type=int, dest="batch_size")
    train.add_argument("--samples-per-epoch", type=int, dest="samples_per_epoch")
    train.add_argument("--seed", type=int)
    train.set_defaults(func=cmd_train)

    score = sub.add_parser("score", help="write per-frame scores for a split")
    score.add_argument("--checkpoint", required=True)
    score.add_argument("--data", required=True)
    score.add_argument("--out", required=True)
    score.add_argument("--config")
    score.add_argument("--split")
    score.add_argument("--scale", type=int)
    score.add_argument("--n-patches", type=int, dest="n_patches")
    score.add_argument("--aggregation")
    score.add_argument("--seed", type=int)
    score.add_argument("--patch-scores", action="store_true", dest="patch_scores",
                       help="include per-patch scores in the CSV")
    score.set_defaults(func=cmd_score)

    eval_p = sub.add_parser("eval", help="evaluate scores or a checkpoint on a labeled split")
    eval_p.add_argument("--data", required=True)
    eval_p.add_argument("--out", required=True)
    eval_p.add_argument("--scores", help="existing score CSV (skips model scoring)")
    eval_p.add_argument("--checkpoint")
    eval_p.add_argument("--config")
    eval_p.add_argument("--split")
    eval_p.add_argument("--scale", type=int)
    eval_p.add_argument("--n-patches", type=int, dest="n_patches")
    eval_p.add_argument("--aggregation")
    eval_p.add_argument("--seed", type=int)
    eval_p.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep", help="train/evaluate over a declared config grid")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--total-samples", type=int, dest="total_samples")
    sweep.add_argument("--samples-per-epoch", type=int, dest="samples_per_epoch")
    sweep.add_argument("--seed", type=int)
    sweep.set_defaults(func=cmd_sweep)

    stream = sub.add_parser("stream", help="threshold alarm over a qualitative sequence")
    stream.add_argument("--checkpoint", required=True)
    stream.add_argument("--data", required=True)
    stream.add_argument("--out", required=True)
    stream.add_argument("--config")
    stream.add_argument("--sequence")
    stream.add_argument("--scale", type=int)
    stream.add_argument("--n-patches", type=int, dest="n_patches")
    stream.add_argument("--aggregation")
    stream.add_argument("--seed", type=int)
    stream.add_argument("--threshold", type=float)
    stream.add_argument("--calibrate-percentile", type=float, dest="calibrate_percentile")
    stream.set_defaults(func=cmd_stream)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StorageError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except PatchadError as exc:  # anything package-specific not mapped above
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
