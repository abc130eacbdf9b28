"""Dataset manifest contract and dependency-free image IO.

A dataset is a directory of 8-bit PGM (grayscale) or PPM (color) frames
plus one `manifest.csv`. The manifest starts with `#`-prefixed JSON header
lines (channels, resolution, classes, generator config), followed by a CSV
table with columns path, split, label, sequence_id, sequence_index. Splits
are train / validation / test / qualitative; train and validation frames
must be labeled normal, and qualitative frames carry their sequence order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FrameFormatError, LabelError, ManifestError
from .preprocessing import Frame

MANIFEST_NAME = "manifest.csv"
SPLITS = ("train", "validation", "test", "qualitative")
NORMAL_LABEL = "normal"
CSV_COLUMNS = ("path", "split", "label", "sequence_id", "sequence_index")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    label: str
    sequence_id: str | None = None
    sequence_index: int | None = None


@dataclass
class DatasetManifest:
    root: Path
    channels: int
    resolution: tuple[int, int]
    classes: list[str]
    entries: list[ManifestEntry]
    generator: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def sequences(self) -> dict[str, list[ManifestEntry]]:
        """Qualitative entries grouped by sequence id, in sequence order."""
        groups: dict[str, list[ManifestEntry]] = {}
        for e in self.split("qualitative"):
            groups.setdefault(e.sequence_id, []).append(e)
        for seq in groups.values():
            seq.sort(key=lambda e: e.sequence_index)
        return groups

    def known_labels(self) -> set[str]:
        return {NORMAL_LABEL, *self.classes}


def _validate(manifest: DatasetManifest, check_files: bool = True) -> None:
    seen: set[str] = set()
    known = manifest.known_labels()
    for e in manifest.entries:
        if e.split not in SPLITS:
            raise ManifestError(f"{e.path}: unknown split {e.split!r}")
        if e.path in seen:
            raise ManifestError(f"{e.path}: appears in more than one split entry")
        seen.add(e.path)
        if e.label not in known:
            raise LabelError(f"{e.path}: unknown label {e.label!r}")
        if e.split in ("train", "validation") and e.label != NORMAL_LABEL:
            raise LabelError(f"{e.path}: split {e.split} only allows normal frames, got {e.label!r}")
        if e.split == "qualitative" and (e.sequence_id is None or e.sequence_index is None):
            raise ManifestError(f"{e.path}: qualitative entries need sequence id and index")
        if check_files and not (manifest.root / e.path).is_file():
            raise ManifestError(f"{e.path}: referenced file missing under {manifest.root}")


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else manifest.root / MANIFEST_NAME
    _validate(manifest, check_files=False)
    header = {
        "version": 1,
        "channels": manifest.channels,
        "resolution": list(manifest.resolution),
        "classes": list(manifest.classes),
        "generator": manifest.generator,
    }
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for e in manifest.entries:
        writer.writerow([e.path, e.split, e.label,
                         e.sequence_id or "",
                         "" if e.sequence_index is None else e.sequence_index])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    """Parse and fully validate a manifest; all referenced frames must exist."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    header_lines: list[str] = []
    csv_lines: list[str] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        (header_lines if line.startswith("#") else csv_lines).append(line)
    try:
        header = json.loads("".join(h.lstrip("#") for h in header_lines) or "{}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON header: {exc}") from exc
    for key in ("channels", "resolution"):
        if key not in header:
            raise ManifestError(f"{path}: header missing {key!r}")
    reader = csv.DictReader(csv_lines)
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ManifestError(f"{path}: CSV header missing columns {sorted(missing)}")
    entries = []
    for row in reader:
        entries.append(ManifestEntry(
            path=row["path"],
            split=row["split"],
            label=row["label"],
            sequence_id=row["sequence_id"] or None,
            sequence_index=int(row["sequence_index"]) if row["sequence_index"] else None,
        ))
    manifest = DatasetManifest(
        root=path.parent,
        channels=int(header["channels"]),
        resolution=tuple(header["resolution"]),
        classes=list(header.get("classes", [])),
        entries=entries,
        generator=header.get("generator", {}),
    )
    _validate(manifest)
    return manifest


# ---------------------------------------------------------------------------
# PGM / PPM


def write_image(path, pixels: np.ndarray) -> None:
    """8-bit binary PGM for (1,H,W) or PPM for (3,H,W) uint8 arrays."""
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise FrameFormatError(f"write_image expects uint8 (1|3,H,W), got "
                               f"{pixels.dtype} {pixels.shape}")
    c, h, w = pixels.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = pixels[0] if c == 1 else np.ascontiguousarray(pixels.transpose(1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(payload.tobytes())


def read_image(path) -> np.ndarray:
    """Decode a binary PGM/PPM into a uint8 (C,H,W) array."""
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        channels = 1
    elif data[:2] == b"P6":
        channels = 3
    else:
        raise FrameFormatError(f"{path}: not a binary PGM/PPM file")
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise FrameFormatError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise FrameFormatError(f"{path}: unterminated comment")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        try:
            tokens.append(int(data[pos:end]))
        except ValueError as exc:
            raise FrameFormatError(f"{path}: bad header token {data[pos:end]!r}") from exc
        pos = end
    w, h, maxval = tokens
    if maxval != 255:
        raise FrameFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = w * h * channels
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise FrameFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(1, h, w).copy()
    return np.ascontiguousarray(arr.reshape(h, w, 3).transpose(2, 0, 1))


def load_frame(manifest: DatasetManifest, entry: ManifestEntry) -> Frame:
    """Decode one frame, enforce the manifest contract, scale to [0,1]."""
    pixels = read_image(manifest.root / entry.path)
    if pixels.shape[0] != manifest.channels:
        raise FrameFormatError(f"{entry.path}: {pixels.shape[0]} channels, "
                               f"manifest requires {manifest.channels}")
    if pixels.shape[1:] != manifest.resolution:
        raise FrameFormatError(f"{entry.path}: resolution {pixels.shape[1:]} differs from "
                               f"manifest {manifest.resolution}; refusing to resize")
    scaled = pixels.astype(np.float32) / np.float32(255.0)
    return Frame(scaled, source_id=entry.path, label=entry.label)


def load_frames(manifest: DatasetManifest, entries) -> list[Frame]:
    return [load_frame(manifest, e) for e in entries]
