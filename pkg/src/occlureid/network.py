"""Fused convolutional-recurrent classifier: assembly, training hooks, I/O.

The network runs a depthwise-separable stem, a stack of inverted residual
blocks, a 1x1 head convolution, and a shared per-position bridge map whose
outputs are read in row-major spatial order as the input sequence of the
recurrent cell. The softmax readout of the final hidden state gives the
occlusion class distribution.

Checkpoints hold the config, every parameter and running statistic as
float32 tensors, the step counter, and the RNG state. Parameters are kept
exactly representable in float32 at all times (initialization and every
optimizer step round through float32), so a save/load round trip reproduces
inference outputs bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields as dc_fields
from typing import BinaryIO, Dict, List, Optional, Tuple

import numpy as np

from .data import OcclusionClass
from .gru import (
    GruCellParams,
    GruGradients,
    GruTrace,
    backward_batched,
    forward_batched,
    init_gru_params,
)
from .layers import (
    BatchNormLayer,
    BridgeLayer,
    DepthwiseLayer,
    InvertedResidualLayer,
    Layer,
    PointwiseLayer,
    Relu6Layer,
)
from .tensor import ShapeError, read_tensor_from, write_tensor_to

CHECKPOINT_MAGIC = b"FCKPT1\n"
CHECKPOINT_VERSION = 1

# Input-map gain for the recurrent cell. Saturating the candidate tanh
# turns the final hidden state into a high-contrast sequence code, which
# the embedding stage needs to keep enrolled persons and strangers apart.
GRU_INPUT_GAIN = 4.0

# Standard inverted-residual table: (expansion, channels, repeats, stride).
FULL_BLOCK_TABLE = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)

# Three stride-2 blocks; at width 0.25 the channel chain is 8 -> 16 -> 24.
TOY_BLOCK_TABLE = (
    (1, 32, 1, 2),
    (6, 64, 1, 2),
    (6, 96, 1, 2),
)

PROFILES = ("full", "toy")


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description; the two stock profiles cover all tests.

    Channel counts in the block table, stem and head are nominal and get
    scaled by ``width_multiplier`` (floored at 4) when the network is built.
    """

    profile: str = "full"
    input_size: int = 224
    input_channels: int = 3
    stem_channels: int = 32
    stem_stride: int = 2
    block_table: Tuple[Tuple[int, int, int, int], ...] = FULL_BLOCK_TABLE
    width_multiplier: float = 1.0
    head_channels: int = 1280
    bridge_size: int = 64
    hidden_size: int = 64
    class_count: int = len(OcclusionClass)
    sequence_mode: str = "row-major"
    batch_norm: bool = True

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ValueError(f"width multiplier must be in (0, 1], got {self.width_multiplier}")
        if self.class_count != len(OcclusionClass):
            raise ValueError(
                f"class count {self.class_count} does not match the {len(OcclusionClass)} occlusion classes"
            )
        if self.sequence_mode != "row-major":
            raise ValueError(f"unknown sequence mode {self.sequence_mode!r}")
        if self.stem_stride not in (1, 2):
            raise ValueError(f"stem stride must be 1 or 2, got {self.stem_stride}")
        if self.input_size < 1 or self.input_channels < 1:
            raise ValueError("input extents must be positive")
        for row in self.block_table:
            if len(row) != 4:
                raise ValueError(f"block table rows need (expansion, channels, repeats, stride), got {row}")
            t, c, n, s = row
            if t < 1 or c < 1 or n < 1:
                raise ValueError(f"block table entries must be positive, got {row}")
            if s not in (1, 2):
                raise ValueError(f"block stride must be 1 or 2, got {s}")

    def scaled(self, channels: int) -> int:
        return max(4, int(round(channels * self.width_multiplier)))

    @classmethod
    def full(cls, **overrides) -> "NetworkConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        base = dict(
            profile="toy",
            input_size=32,
            stem_channels=32,
            stem_stride=1,
            block_table=TOY_BLOCK_TABLE,
            width_multiplier=0.25,
            head_channels=256,
            bridge_size=16,
            hidden_size=16,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "NetworkConfig":
        if profile == "full":
            return cls.full(**overrides)
        if profile == "toy":
            return cls.toy(**overrides)
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")


class Model:
    """A built network: convolution trunk, bridge, recurrent cell."""

    def __init__(self, config: NetworkConfig, trunk: List[Layer], bridge: BridgeLayer, gru: GruCellParams):
        self.config = config
        self.trunk = trunk
        self.bridge = bridge
        self.gru = gru
        self.gru_grads = GruGradients.zeros_like(gru)
        self.step = 0
        self.rng_state: Optional[dict] = None

    # -- registries ---------------------------------------------------------

    def parameter_slots(self) -> List[Tuple[str, np.ndarray, np.ndarray, bool]]:
        """Stable (name, param, grad, decayed) rows for optimizer and I/O.

        The arrays are the live ones; updates must mutate them in place.
        """
        rows: List[Tuple[str, np.ndarray, np.ndarray, bool]] = []
        for layer in [*self.trunk, self.bridge]:
            for name, param in layer.named_params():
                rows.append((name, param, layer.grad_for(name), layer.is_decayed(name)))
        for f in dc_fields(self.gru):
            decayed = f.name.startswith(("w_", "u_"))
            rows.append((f"gru.{f.name}", getattr(self.gru, f.name), getattr(self.gru_grads, f.name), decayed))
        return rows

    def named_tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Everything a checkpoint stores, in deterministic order."""
        rows = [(name, param) for name, param, _, _ in self.parameter_slots()]
        for layer in [*self.trunk, self.bridge]:
            rows.extend(layer.named_state())
        return rows

    def zero_grads(self) -> None:
        for layer in [*self.trunk, self.bridge]:
            layer.zero_grads()
        for f in dc_fields(self.gru_grads):
            getattr(self.gru_grads, f.name)[...] = 0.0

    def snap_to_f32(self) -> None:
        """Round every stored tensor through float32 in place.

        Keeping parameters float32-representable is what makes checkpoint
        round trips bitwise-exact.
        """
        for _, arr in self.named_tensors():
            arr[...] = arr.astype(np.float32).astype(np.float64)

    # -- forward / backward -------------------------------------------------

    def _check_batch(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        cfg = self.config
        want = (cfg.input_size, cfg.input_size, cfg.input_channels)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"input batch has shape {x.shape}, expected [N, {want[0]}, {want[1]}, {want[2]}]")
        return x

    def sequence_inputs(self, images: np.ndarray, train: bool) -> np.ndarray:
        """Trunk + bridge; returns the [T, N, bridge] recurrent input."""
        out = self._check_batch(images)
        for layer in self.trunk:
            out = layer.forward(out, train)
        out = self.bridge.forward(out, train)
        n, h, w, d = out.shape
        self._feature_hw = (h, w)
        return out.reshape(n, h * w, d).transpose(1, 0, 2)

    def forward_train(self, images: np.ndarray) -> Tuple[GruTrace, np.ndarray]:
        """Training-mode forward; returns the recurrent trace and [N, 5] rows."""
        xs = self.sequence_inputs(images, train=True)
        h0 = np.zeros((xs.shape[1], self.config.hidden_size))
        return forward_batched(self.gru, h0, xs)

    def forward(self, images: np.ndarray) -> np.ndarray:
        """Inference: [N, H, W, C] (or one [H, W, C] image) to [N, 5] rows."""
        xs = self.sequence_inputs(images, train=False)
        h0 = np.zeros((xs.shape[1], self.config.hidden_size))
        _, readout = forward_batched(self.gru, h0, xs)
        return readout

    def classify(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(images), axis=1)

    def backward(
        self, trace: GruTrace, targets: np.ndarray, scale: float = 1.0, truncation: Optional[int] = None
    ) -> None:
        """Accumulate gradients for one batch into the registries."""
        grads, d_inputs, _ = backward_batched(self.gru, trace, targets, truncation, scale)
        for f in dc_fields(self.gru_grads):
            getattr(self.gru_grads, f.name)[...] += getattr(grads, f.name)
        h, w = self._feature_hw
        t, n, d = d_inputs.shape
        d_feature = d_inputs.transpose(1, 0, 2).reshape(n, h, w, d)
        dx = self.bridge.backward(d_feature)
        for layer in reversed(self.trunk):
            dx = layer.backward(dx)

    def embed(self, image: np.ndarray) -> np.ndarray:
        """L2-normalized final hidden state of one image; the re-id feature."""
        xs = self.sequence_inputs(image, train=False)
        h0 = np.zeros((xs.shape[1], self.config.hidden_size))
        trace, _ = forward_batched(self.gru, h0, xs)
        h_last = trace.hiddens[-1][0]
        norm = float(np.linalg.norm(h_last))
        if norm < 1e-30:
            raise ValueError("embedding has zero norm; the hidden state collapsed")
        return h_last / norm


def build_network(cfg: NetworkConfig, seed: int) -> Model:
    """Construct a model with seeded, reproducible initialization."""
    rng = np.random.default_rng(seed)
    trunk: List[Layer] = []
    c_in = cfg.input_channels
    stem_out = cfg.scaled(cfg.stem_channels)
    trunk.append(DepthwiseLayer("stem.depthwise", c_in, cfg.stem_stride, rng))
    trunk.append(PointwiseLayer("stem.pointwise", c_in, stem_out, rng))
    if cfg.batch_norm:
        trunk.append(BatchNormLayer("stem.bn", stem_out))
    trunk.append(Relu6Layer("stem.act"))
    c_in = stem_out

    index = 0
    for expansion, channels, repeats, stride in cfg.block_table:
        c_out = cfg.scaled(channels)
        for r in range(repeats):
            index += 1
            s = stride if r == 0 else 1
            trunk.append(
                InvertedResidualLayer(f"block{index}", c_in, c_out, expansion, s, rng, cfg.batch_norm)
            )
            c_in = c_out

    head_out = cfg.scaled(cfg.head_channels)
    trunk.append(PointwiseLayer("head.conv", c_in, head_out, rng))
    if cfg.batch_norm:
        trunk.append(BatchNormLayer("head.bn", head_out))
    trunk.append(Relu6Layer("head.act"))

    bridge = BridgeLayer("bridge", head_out, cfg.bridge_size, rng)
    gru = init_gru_params(cfg.bridge_size, cfg.hidden_size, cfg.class_count, rng, GRU_INPUT_GAIN)
    model = Model(cfg, trunk, bridge, gru)
    model.snap_to_f32()
    return model


# ---------------------------------------------------------------------------
# Checkpoints.
#
# Layout: magic b"FCKPT1\n", a "version N" line, one ASCII line with the
# JSON header length, the JSON header (config, step, rng_state, tensor
# names), then one tensor file blob per name in header order.
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path: str) -> None:
    tensors = model.named_tensors()
    header = {
        "config": asdict(model.config),
        "step": model.step,
        "rng_state": model.rng_state,
        "tensors": [name for name, _ in tensors],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"version {CHECKPOINT_VERSION}\n".encode("ascii"))
        fh.write(f"{len(blob)}\n".encode("ascii"))
        fh.write(blob)
        for _, arr in tensors:
            write_tensor_to(fh, arr)


def _read_line(fh: BinaryIO, what: str, limit: int = 64) -> bytes:
    line = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            raise CheckpointError(f"truncated checkpoint: unterminated {what}")
        if ch == b"\n":
            return bytes(line)
        line += ch
        if len(line) > limit:
            raise CheckpointError(f"malformed checkpoint: {what} too long")


def _config_from_dict(raw: dict) -> NetworkConfig:
    kwargs = dict(raw)
    kwargs["block_table"] = tuple(tuple(row) for row in kwargs["block_table"])
    return NetworkConfig(**kwargs)


def load_checkpoint(path: str, expect: Optional[NetworkConfig] = None) -> Model:
    """Rebuild a model from a checkpoint file.

    With ``expect`` given, every stored tensor must match the shape the
    expected architecture implies; the first offending tensor is named.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if len(magic) < len(CHECKPOINT_MAGIC):
            raise CheckpointError("truncated checkpoint: missing magic bytes")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        version_line = _read_line(fh, "version line").decode("ascii", "replace")
        parts = version_line.split()
        if len(parts) != 2 or parts[0] != "version" or not parts[1].isdigit():
            raise CheckpointError(f"malformed checkpoint version line {version_line!r}")
        version = int(parts[1])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        length_line = _read_line(fh, "header length").decode("ascii", "replace")
        if not length_line.isdigit():
            raise CheckpointError(f"malformed checkpoint header length {length_line!r}")
        blob = fh.read(int(length_line))
        if len(blob) < int(length_line):
            raise CheckpointError("truncated checkpoint: incomplete header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError("malformed checkpoint header") from exc
        stored: Dict[str, np.ndarray] = {}
        for name in header["tensors"]:
            stored[name] = read_tensor_from(fh)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")

    cfg = _config_from_dict(header["config"])
    model = build_network(expect if expect is not None else cfg, seed=0)
    for name, arr in model.named_tensors():
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if stored[name].shape != arr.shape:
            raise ShapeError(
                f"checkpoint tensor {name} has shape {stored[name].shape}, expected {arr.shape}"
            )
        arr[...] = stored[name]
    model.step = int(header["step"])
    model.rng_state = header["rng_state"]
    return model
