"""Deterministic procedural testbed: tunnel-like grayscale scenes with
small-scale and large-scale anomalies.

Normal frames are layered value noise (wall texture) under a radial
spotlight with a row of periodic ceiling light fixtures; frame-to-frame
variation comes from the texture realization, spotlight jitter, and
fixture phase. Anomaly classes:

  spot-small    a few high-contrast blobs, well under 1% of the pixels
  line-hanging  a thin dark wavy vertical curve from the ceiling
  haze-global   scene mixed toward a bright airlight, strongest around a
                wide core, compressing contrast over the whole frame
  tilt-defect   a large scene rotation with dark out-of-view corners

Every frame is reproducible from (config seed, split, index): rendering
draws from a counter-based stream and never mutates shared state, so
generation order is irrelevant.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .dataset import (DatasetManifest, ManifestEntry, save_manifest, write_image)
from .errors import ConfigError

FRAME_SIZE = 512
ANOMALY_CLASSES = ("spot-small", "line-hanging", "haze-global", "tilt-defect")
QUALITATIVE_INTERVALS = ((0.20, 0.40), (0.60, 0.80))  # fractions of a sequence


@dataclass(frozen=True)
class SynthConfig:
    train_frames: int = 2000
    validation_frames: int = 200
    test_frames: int = 1000
    anomalous_fraction: float = 0.4
    anomaly_classes: tuple[str, ...] = ANOMALY_CLASSES
    qualitative_sequences: int = 2
    sequence_frames: int = 300
    noise_octaves: int = 4
    texture_amplitude: float = 0.45
    grain_amplitude: float = 0.35
    illumination_falloff: float = 0.40
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.anomaly_classes) - set(ANOMALY_CLASSES)
        if unknown:
            raise ConfigError(f"unknown anomaly classes {sorted(unknown)}")
        if not self.anomaly_classes:
            raise ConfigError("need at least one anomaly class")
        if not 0.0 < self.anomalous_fraction < 1.0:
            raise ConfigError("anomalous_fraction must be in (0,1)")
        if min(self.train_frames, self.validation_frames, self.test_frames) < 1:
            raise ConfigError("all split sizes must be positive")
        if self.noise_octaves < 1:
            raise ConfigError("noise_octaves must be >= 1")

    def class_mix(self) -> dict[str, float]:
        """Per-class share of the test split; sums to anomalous_fraction."""
        share = self.anomalous_fraction / len(self.anomaly_classes)
        return {name: share for name in self.anomaly_classes}

    def to_dict(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        doc["anomaly_classes"] = list(self.anomaly_classes)
        return doc


# ---------------------------------------------------------------------------
# scene rendering


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    cells = grid.shape[0] - 1
    coords = np.arange(size, dtype=np.float64) * (cells / size)
    i0 = coords.astype(np.int64)
    frac = (coords - i0).astype(np.float32)
    i1 = np.minimum(i0 + 1, cells)
    g00 = grid[np.ix_(i0, i0)]
    g01 = grid[np.ix_(i0, i1)]
    g10 = grid[np.ix_(i1, i0)]
    g11 = grid[np.ix_(i1, i1)]
    fy, fx = frac[:, None], frac[None, :]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _value_noise(stream: np.random.Generator, octaves: int, size: int = FRAME_SIZE) -> np.ndarray:
    """Zero-mean layered noise; octave k doubles the grid resolution."""
    total = np.zeros((size, size), np.float32)
    weight = 0.0
    amplitude = 1.0
    for octave in range(octaves):
        res = 4 * 2 ** octave
        grid = stream.random((res + 1, res + 1), dtype=np.float32) - 0.5
        total += amplitude * _upsample_bilinear(grid, size)
        weight += amplitude
        amplitude *= 0.55
    return total / weight


_YY, _XX = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float32)


def render_normal(frame_seed: int, config: SynthConfig) -> np.ndarray:
    """One clean tunnel frame in [0,1], shape (1,512,512) float32.

    The fine grain layer (4 px cells) matters only at full resolution: an
    8x block average erases it, so the scale-8 view of a frame is carried
    entirely by the coarse texture, spotlight, and fixtures.
    """
    stream = rng.stream(frame_seed, "scene")
    texture = _value_noise(stream, config.noise_octaves)

    cx = 256.0 + (stream.random() - 0.5) * 90.0
    cy = 200.0 + (stream.random() - 0.5) * 70.0
    sigma = FRAME_SIZE * (config.illumination_falloff + (stream.random() - 0.5) * 0.08)
    d2 = (_XX - cx) ** 2 + (_YY - cy) ** 2
    illumination = 0.12 + 0.88 * np.exp(-d2 / sigma ** 2)

    fixtures = np.zeros((FRAME_SIZE, FRAME_SIZE), np.float32)
    spacing = 110.0 + stream.random() * 40.0
    phase = stream.random() * spacing
    fixture_y = 38.0 + (stream.random() - 0.5) * 16.0
    x = phase
    while x < FRAME_SIZE:
        amp = 0.45 + stream.random() * 0.25
        fixtures += amp * np.exp(-(((_XX - x) / 24.0) ** 2 + ((_YY - fixture_y) / 11.0) ** 2))
        x += spacing

    grain_grid = stream.random((129, 129), dtype=np.float32) - 0.5
    grain = _upsample_bilinear(grain_grid, FRAME_SIZE)

    img = illumination * (0.50 + config.texture_amplitude * texture
                          + config.grain_amplitude * grain) + fixtures

    # faint ambient dust/fog of varying strength: normal scenes span a weak
    # version of the fog direction, so only heavy fog is out of distribution
    fog_strength = stream.random() * 0.18
    fog_wisps = _value_noise(stream, octaves=2)
    fog_weight = np.clip(fog_strength * (1.0 + 1.6 * fog_wisps), 0.0, 0.35)
    img = (1.0 - fog_weight) * img + fog_weight * 0.85
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def _soft_disk(cx: float, cy: float, radius: float) -> np.ndarray:
    d2 = ((_XX - cx) / radius) ** 2 + ((_YY - cy) / radius) ** 2
    return np.exp(-d2 ** 2)  # sharp-edged blob profile


def apply_spot_small(pixels: np.ndarray, stream: np.random.Generator):
    out = pixels[0].copy()
    n_spots = int(stream.integers(3, 6))
    for _ in range(n_spots):
        cx = 40.0 + stream.random() * (FRAME_SIZE - 80)
        cy = 40.0 + stream.random() * (FRAME_SIZE - 80)
        radius = 5.0 + stream.random() * 4.0
        magnitude = 0.60 + stream.random() * 0.25
        # contrast against the local level so clipping never eats the spot
        level = float(out[int(cy), int(cx)])
        delta = -magnitude if level > 0.45 else magnitude
        out += delta * _soft_disk(cx, cy, radius)
    out = np.clip(out, 0.0, 1.0)
    mask = np.abs(out - pixels[0]) > (0.5 / 255.0)
    return out[None], mask


def apply_line_hanging(pixels: np.ndarray, stream: np.random.Generator):
    out = pixels[0].copy()
    x0 = 60.0 + stream.random() * (FRAME_SIZE - 120)
    length = int(180 + stream.random() * 200)
    wobble = 6.0 + stream.random() * 8.0
    period = 90.0 + stream.random() * 120.0
    phi = stream.random() * 2 * np.pi
    width = 1 + int(stream.random() * 2)
    delta = -(0.35 + stream.random() * 0.2)
    ys = np.arange(min(length, FRAME_SIZE))
    xs = (x0 + wobble * np.sin(2 * np.pi * ys / period + phi)).astype(np.int64)
    for off in range(-width, width + 1):
        cols = np.clip(xs + off, 0, FRAME_SIZE - 1)
        out[ys, cols] = np.clip(out[ys, cols] + delta, 0.0, 1.0)
    mask = np.abs(out - pixels[0]) > (0.5 / 255.0)
    return out[None], mask


def apply_haze_global(pixels: np.ndarray, stream: np.random.Generator):
    # Backscatter dome around the spotlight plus very coarse fog wisps, over
    # a scattering-blurred scene. The wisp structure is novel after 8x
    # downsampling, while full-resolution patches only see gentle gradients
    # where sharp grain used to be.
    from scipy import ndimage

    cx = 256.0 + (stream.random() - 0.5) * 60.0
    cy = 230.0 + (stream.random() - 0.5) * 60.0
    sigma = 260.0 + stream.random() * 60.0
    airlight = 0.82 + stream.random() * 0.08
    # per-frame fog density: mild episodes sit just past the faint ambient
    # fog normal frames carry, heavy ones wash the scene out entirely
    strength = stream.random()
    wisps = _value_noise(stream, octaves=2)
    d2 = (_XX - cx) ** 2 + (_YY - cy) ** 2
    dome = np.exp(-d2 / (2 * sigma ** 2))
    base = 0.35 + 0.35 * strength
    weight = np.clip(base + (0.18 + 0.10 * strength) * dome
                     + (0.45 + 0.20 * strength) * wisps, 0.8 * base, 0.95)
    blurred = ndimage.gaussian_filter(pixels[0], sigma=1.2 + 1.0 * strength, mode="nearest")
    out = (1.0 - weight) * blurred + weight * airlight
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    mask = np.abs(out - pixels[0]) > (0.5 / 255.0)
    return out[None], mask


def apply_tilt_defect(pixels: np.ndarray, stream: np.random.Generator):
    from scipy import ndimage

    angle = (18.0 + stream.random() * 17.0) * (1.0 if stream.random() < 0.5 else -1.0)
    out = ndimage.rotate(pixels[0], angle, reshape=False, order=1,
                         mode="constant", cval=0.0).astype(np.float32)
    out = np.clip(out, 0.0, 1.0)
    mask = np.abs(out - pixels[0]) > (0.5 / 255.0)
    return out[None], mask


_APPLIERS = {
    "spot-small": apply_spot_small,
    "line-hanging": apply_line_hanging,
    "haze-global": apply_haze_global,
    "tilt-defect": apply_tilt_defect,
}


def render_frame(frame_seed: int, label: str, config: SynthConfig):
    """Render a frame for the given label; returns (pixels, anomaly mask).

    The anomalous variant of a seed shares its base scene with the normal
    variant of the same seed, so paired comparisons are meaningful.
    """
    base = render_normal(frame_seed, config)
    if label == "normal":
        return base, np.zeros((FRAME_SIZE, FRAME_SIZE), bool)
    if label not in _APPLIERS:
        raise ConfigError(f"unknown anomaly class {label!r}")
    stream = rng.stream(frame_seed, "anomaly", label)
    return _APPLIERS[label](base, stream)


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset assembly


def _test_labels(config: SynthConfig) -> list[str]:
    """Label sequence for the test split, matching the class mix within one
    frame per class (largest-remainder rounding), deterministically shuffled."""
    mix = config.class_mix()
    exact = {name: config.test_frames * share for name, share in mix.items()}
    counts = {name: int(np.floor(v)) for name, v in exact.items()}
    target_total = int(round(config.test_frames * config.anomalous_fraction))
    remainders = sorted(exact, key=lambda n: exact[n] - counts[n], reverse=True)
    i = 0
    while sum(counts.values()) < target_total:
        counts[remainders[i % len(remainders)]] += 1
        i += 1
    labels = ["normal"] * (config.test_frames - sum(counts.values()))
    for name, count in counts.items():
        labels += [name] * count
    order = rng.stream(config.seed, "test-order").permutation(len(labels))
    return [labels[i] for i in order]


def _sequence_labels(config: SynthConfig, seq: int) -> list[str]:
    """Two contiguous anomalous intervals per sequence, large-scale classes
    preferred so the whole-frame detector has something to alarm on."""
    preferred = [c for c in ("haze-global", "tilt-defect") if c in config.anomaly_classes]
    if not preferred:
        preferred = list(config.anomaly_classes)
    n = config.sequence_frames
    labels = ["normal"] * n
    for k, (lo, hi) in enumerate(QUALITATIVE_INTERVALS):
        name = preferred[k % len(preferred)]
        for i in range(int(lo * n), int(hi * n)):
            labels[i] = name
    return labels


def generate_synthetic(config: SynthConfig, output_dir, workers: int = 1) -> DatasetManifest:
    """Write the full dataset (frames + manifest) under output_dir.

    Frames render independently from per-entry seeds, so worker count and
    completion order never change the bytes on disk; the manifest is
    written last, after every frame is flushed.
    """
    root = Path(output_dir)
    entries: list[ManifestEntry] = []
    plan: list[tuple[ManifestEntry, int]] = []  # entry, frame seed

    def register(split, subdir, index, label, seq_id=None, seq_index=None):
        path = f"{subdir}/frame_{index:06d}.pgm"
        entry = ManifestEntry(path, split, label, seq_id, seq_index)
        entries.append(entry)
        plan.append((entry, rng.derive_seed(config.seed, split, seq_id or "", index)))

    for i in range(config.train_frames):
        register("train", "train", i, "normal")
    for i in range(config.validation_frames):
        register("validation", "val", i, "normal")
    for i, label in enumerate(_test_labels(config)):
        register("test", "test", i, label)
    for seq in range(config.qualitative_sequences):
        seq_id = f"seq-{seq:03d}"
        for i, label in enumerate(_sequence_labels(config, seq)):
            register("qualitative", f"qual/{seq_id}", i, label, seq_id, i)

    for subdir in {str(Path(e.path).parent) for e in entries}:
        (root / subdir).mkdir(parents=True, exist_ok=True)

    def emit(item):
        entry, frame_seed = item
        pixels, mask = render_frame(frame_seed, entry.label, config)
        assert (entry.label != "normal") == bool(mask.any()), entry.path
        write_image(root / entry.path, quantize(pixels))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(emit, plan))
    else:
        for item in plan:
            emit(item)

    manifest = DatasetManifest(
        root=root,
        channels=1,
        resolution=(FRAME_SIZE, FRAME_SIZE),
        classes=sorted(config.anomaly_classes),
        entries=entries,
        generator={"synth": config.to_dict(), "seed": config.seed},
    )
    save_manifest(manifest)
    return manifest
