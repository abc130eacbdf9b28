"""The 64x64 patch autoencoder: construction, forward pass, anomaly score,
and a versioned binary checkpoint format.

Encoder: four stride-2 3x3 convolutions with channel counts F, 2F, 4F, 8F
(64 -> 32 -> 16 -> 8 -> 4), flattened into a dense bottleneck of size B.
Decoder mirrors the encoder with transposed convolutions back to 64x64;
every layer is followed by LeakyReLU except the final one, which stays
linear so reconstructions can cover the full input range.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import engine as en
from . import rng
from .errors import (CheckpointFormatError, CheckpointIntegrityError,
                     CheckpointVersionError, ConfigError, ShapeError)

PATCH_EXTENT = 64
NEGATIVE_SLOPE = 0.01
ENCODER_DEPTH = 4
BOTTLENECK_GRID = PATCH_EXTENT // 2 ** ENCODER_DEPTH  # 4x4 after four halvings

CHECKPOINT_MAGIC = b"PADCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AutoencoderConfig:
    first_layer_size: int = 128
    bottleneck_size: int = 16
    input_channels: int = 1
    input_extent: int = PATCH_EXTENT
    seed: int = 0

    def __post_init__(self):
        if self.input_extent != PATCH_EXTENT:
            raise ConfigError(f"input_extent must be {PATCH_EXTENT}, got {self.input_extent}")
        if self.first_layer_size < 1 or self.bottleneck_size < 1:
            raise ConfigError("first_layer_size and bottleneck_size must be >= 1")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")

    @property
    def encoder_filters(self) -> tuple[int, ...]:
        return tuple(self.first_layer_size * 2 ** i for i in range(ENCODER_DEPTH))

    @property
    def flat_size(self) -> int:
        return BOTTLENECK_GRID * BOTTLENECK_GRID * self.encoder_filters[-1]


@dataclass
class TrainingMeta:
    epochs_seen: int = 0
    samples_seen: int = 0
    final_validation_loss: float | None = None


class AutoencoderModel:
    """Parameter container plus forward/score; immutable once trained."""

    def __init__(self, config: AutoencoderConfig, params: dict[str, en.Tensor],
                 meta: TrainingMeta | None = None):
        self.config = config
        self.params = params
        self.meta = meta or TrainingMeta()

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: AutoencoderConfig) -> "AutoencoderModel":
        """Fresh model with fan-in-scaled uniform init, deterministic in
        config.seed. Weight bounds are sqrt(3/fan_in) so the untrained
        decoder output starts near zero; biases start at zero."""
        params: dict[str, en.Tensor] = {}

        def uniform(name: str, shape: tuple[int, ...], fan_in: int):
            bound = np.sqrt(3.0 / fan_in)
            draws = rng.stream(config.seed, "init", name).random(shape, dtype=np.float64)
            data = ((draws * 2.0 - 1.0) * bound).astype(np.float32)
            params[name] = en.Tensor(data, requires_grad=True, name=name)

        def zeros(name: str, size: int):
            params[name] = en.Tensor(np.zeros(size, np.float32), requires_grad=True, name=name)

        channels = (config.input_channels,) + config.encoder_filters
        for layer in range(ENCODER_DEPTH):
            c_in, c_out = channels[layer], channels[layer + 1]
            uniform(f"enc{layer + 1}.kernels", (c_out, c_in, 3, 3), fan_in=c_in * 9)
            zeros(f"enc{layer + 1}.bias", c_out)
        flat = config.flat_size
        uniform("bottleneck.weights", (config.bottleneck_size, flat), fan_in=flat)
        zeros("bottleneck.bias", config.bottleneck_size)
        uniform("expand.weights", (flat, config.bottleneck_size), fan_in=config.bottleneck_size)
        zeros("expand.bias", flat)
        for layer in range(ENCODER_DEPTH, 0, -1):
            c_in, c_out = channels[layer], channels[layer - 1]
            uniform(f"dec{layer}.kernels", (c_in, c_out, 3, 3), fan_in=c_in * 9)
            zeros(f"dec{layer}.bias", c_out)
        return cls(config, params)

    # -- forward ------------------------------------------------------------

    def _check_input(self, patch_data: np.ndarray) -> bool:
        shape = patch_data.shape
        want = (self.config.input_channels, PATCH_EXTENT, PATCH_EXTENT)
        if shape[-3:] != want or patch_data.ndim not in (3, 4):
            raise ShapeError(f"autoencoder expects (...,{want[0]},{want[1]},{want[2]}), got {shape}")
        return patch_data.ndim == 4

    def forward(self, patch: "en.Tensor | np.ndarray") -> en.Tensor:
        """Reconstruct a patch (or batch of patches); output shape == input."""
        x = patch if isinstance(patch, en.Tensor) else en.Tensor(patch)
        batched = self._check_input(x.data)
        n = x.data.shape[0] if batched else 1
        p = self.params
        h = x
        for layer in range(1, ENCODER_DEPTH + 1):
            h = en.conv2d(h, p[f"enc{layer}.kernels"], p[f"enc{layer}.bias"], stride=2, padding=1)
            h = en.leaky_relu(h, NEGATIVE_SLOPE)
        flat = self.config.flat_size
        h = en.reshape(h, (n, flat) if batched else (flat,))
        h = en.leaky_relu(en.dense(h, p["bottleneck.weights"], p["bottleneck.bias"]), NEGATIVE_SLOPE)
        h = en.leaky_relu(en.dense(h, p["expand.weights"], p["expand.bias"]), NEGATIVE_SLOPE)
        top = self.config.encoder_filters[-1]
        h = en.reshape(h, (n, top, BOTTLENECK_GRID, BOTTLENECK_GRID) if batched
                       else (top, BOTTLENECK_GRID, BOTTLENECK_GRID))
        for layer in range(ENCODER_DEPTH, 0, -1):
            h = en.conv2d_transpose(h, p[f"dec{layer}.kernels"], p[f"dec{layer}.bias"],
                                    stride=2, padding=1)
            if layer > 1:
                h = en.leaky_relu(h, NEGATIVE_SLOPE)
        return h

    def score_patch(self, patch: "en.Tensor | np.ndarray") -> float:
        """Mean absolute reconstruction error: the patch anomaly score."""
        x = patch if isinstance(patch, en.Tensor) else en.Tensor(patch)
        with en.no_grad():
            return en.mae(self.forward(x), x).item()

    def score_patch_batch(self, patches: np.ndarray) -> np.ndarray:
        """Per-patch anomaly scores for a (N,C,64,64) batch."""
        x = en.Tensor(patches)
        if not self._check_input(x.data):
            raise ShapeError(f"score_patch_batch expects a batch, got {x.data.shape}")
        with en.no_grad():
            recon = self.forward(x)
        return np.mean(np.abs(recon.data - x.data), axis=(1, 2, 3))

    # -- bookkeeping ---------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore_parameters(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, data in snapshot.items():
            self.params[name] = en.Tensor(data.copy(), requires_grad=True, name=name)


def expected_parameter_count(config: AutoencoderConfig) -> int:
    """Closed-form total: 756 F^2 + 18 F c + 256 F B + 150 F + B + c."""
    f, b, c = config.first_layer_size, config.bottleneck_size, config.input_channels
    return 756 * f * f + 18 * f * c + 256 * f * b + 150 * f + b + c


def build(config: AutoencoderConfig) -> AutoencoderModel:
    return AutoencoderModel.build(config)


def forward(model: AutoencoderModel, patch) -> en.Tensor:
    return model.forward(patch)


def score_patch(model: AutoencoderModel, patch) -> float:
    return model.score_patch(patch)


# ---------------------------------------------------------------------------
# checkpoint format (version 1)
#
#   magic "PADCKPT\n" | u32 version | u32 header_len | header JSON (config,
#   metadata) | u32 param count | per param: u16 name_len, name, u8 ndim,
#   u32 dims..., float32 LE data | u32 crc32 of everything before it


def save(model: AutoencoderModel, path) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    header = json.dumps({"config": asdict(model.config), "metadata": asdict(model.meta)},
                        sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(header))
    blob += header
    blob += struct.pack("<I", len(model.params))
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", tensor.ndim)
        blob += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        blob += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointIntegrityError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path) -> AutoencoderModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(CHECKPOINT_MAGIC) + 8 or buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")
    reader = _Reader(buf[:-4])
    reader.take(len(CHECKPOINT_MAGIC))
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    config = AutoencoderConfig(**header["config"])
    meta = TrainingMeta(**header["metadata"])
    params: dict[str, en.Tensor] = {}
    for _ in range(reader.u32()):
        name_len = struct.unpack("<H", reader.take(2))[0]
        name = reader.take(name_len).decode("utf-8")
        ndim = struct.unpack("<B", reader.take(1))[0]
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        n_values = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(4 * n_values), dtype="<f4").reshape(shape)
        params[name] = en.Tensor(data.astype(np.float32), requires_grad=True, name=name)
    if reader.pos != len(reader.buf):
        raise CheckpointIntegrityError(f"{path}: trailing bytes after parameter blocks")
    return AutoencoderModel(config, params, meta)
