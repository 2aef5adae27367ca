"""Two-output masking separator F(x; theta) -> (speech, noise).

encoder conv1d -> ReLU -> residual blocks -> 2-way softmax masks -> shared
transposed-conv decoder.  In ``softmax-consistent`` mode the two decoded
signals are additionally projected so that they add up to the input
exactly; ``free`` mode skips the projection.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tape, Tensor
from .signal import SignalBatch

MASK_MODES = ("softmax-consistent", "free")
CHECKPOINT_FORMAT = "re2re-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SeparatorConfig:
    num_filters: int = 32
    kernel_taps: int = 21
    hop: int = 10
    num_blocks: int = 2
    context_taps: int = 5
    mask_mode: str = "softmax-consistent"
    sample_rate: int = 8000

    def __post_init__(self):
        if self.num_filters < 2:
            raise ValueError("num_filters must be >= 2")
        if self.kernel_taps < 1:
            raise ValueError("kernel_taps must be >= 1")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.context_taps < 1 or self.context_taps % 2 == 0:
            raise ValueError("context_taps must be a positive odd number")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    @classmethod
    def full_scale(cls) -> "SeparatorConfig":
        """512 filters, 41 taps, hop 20, 8 blocks at 16 kHz.  Not trained here."""
        return cls(num_filters=512, kernel_taps=41, hop=20, num_blocks=8, sample_rate=16000)


def param_layout(config: SeparatorConfig) -> tuple[tuple[str, tuple[int, ...]], ...]:
    f, k, c = config.num_filters, config.kernel_taps, config.context_taps
    layout = [("encoder", (f, k))]
    for i in range(config.num_blocks):
        layout += [
            (f"block{i}.in_w", (f, f)),
            (f"block{i}.in_b", (f,)),
            (f"block{i}.act1", (f,)),
            (f"block{i}.context", (f, c)),
            (f"block{i}.act2", (f,)),
            (f"block{i}.out_w", (f, f)),
            (f"block{i}.out_b", (f,)),
        ]
    layout += [("mask_w", (2 * f, f)), ("mask_b", (2 * f,)), ("decoder", (f, k))]
    return tuple(layout)


def param_count(config: SeparatorConfig) -> int:
    f, k, c, n = config.num_filters, config.kernel_taps, config.context_taps, config.num_blocks
    return 2 * f * k + n * (2 * f * f + 4 * f + f * c) + 2 * f * f + 2 * f


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if values.size != expected:
            raise ShapeError(f"{values.size} values for a layout of {expected}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple((n, tuple(s)) for n, s in self.layout))

    def __len__(self):
        return self.values.size

    def segments(self) -> dict[str, np.ndarray]:
        out, start = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    def tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Wrap each segment as a tensor; leaves on ``tape`` when given."""
        segs = self.segments()
        if tape is None:
            return {name: Tensor(v) for name, v in segs.items()}
        return {name: tape.leaf(v) for name, v in segs.items()}

    def flat_gradient(self, grads: dc.Gradients, tensors: dict[str, Tensor]) -> np.ndarray:
        return np.concatenate([grads[tensors[name]].ravel() for name, _ in self.layout])

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout


def init_params(config: SeparatorConfig, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, 0.25 PReLU slopes."""
    chunks = []
    for name, shape in param_layout(config):
        if name.endswith("_b"):
            chunks.append(np.zeros(shape))
        elif name.endswith(("act1", "act2")):
            chunks.append(np.full(shape, 0.25))
        else:
            if name == "decoder":
                fan_in = config.num_filters
            else:
                fan_in = shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=shape)
            if name.endswith("out_w"):
                w *= 0.1  # keep residual branches small at init
            chunks.append(w)
    return ParamVector(np.concatenate([c.ravel() for c in chunks]), param_layout(config))


def padded_length(length: int, config: SeparatorConfig) -> int:
    k, hop = config.kernel_taps, config.hop
    if length <= k:
        return k
    return k + -(-(length - k) // hop) * hop


def _reflect_index(length: int, total: int) -> np.ndarray:
    idx = np.arange(total)
    if length == 1:
        return np.zeros(total, dtype=np.intp)
    period = 2 * (length - 1)
    m = idx % period
    return np.where(m < length, m, period - m)


def forward(x, params: ParamVector, config: SeparatorConfig,
            tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    """Separate a B x T batch into (speech, noise) tensors.

    Use :func:`forward_with_leaves` when gradients w.r.t. theta are needed.
    """
    s, n, _ = forward_with_leaves(x, params, config, tape)
    return s, n


def forward_with_leaves(x, params: ParamVector, config: SeparatorConfig,
                        tape: Tape | None = None):
    data = x.data if isinstance(x, (SignalBatch, Tensor)) else np.asarray(x, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 1:
        raise ShapeError(f"separator input must be B x T, got {data.shape}")
    if params.layout != param_layout(config):
        raise ShapeError("parameter layout does not match the separator config")
    xin = x if isinstance(x, Tensor) else Tensor(data)
    p = params.tensors(tape)
    length = data.shape[1]
    total = padded_length(length, config)
    xp = dc.gather_last(xin, _reflect_index(length, total)) if total != length else xin

    w = dc.relu(dc.conv1d(xp, p["encoder"], config.hop))
    h = w
    for i in range(config.num_blocks):
        b = f"block{i}."
        u = dc.prelu(dc.pointwise(h, p[b + "in_w"], p[b + "in_b"]), p[b + "act1"])
        u = dc.prelu(dc.depthwise_conv1d(u, p[b + "context"]), p[b + "act2"])
        h = h + dc.pointwise(u, p[b + "out_w"], p[b + "out_b"])

    batch, f, frames = w.shape
    logits = dc.reshape(dc.pointwise(h, p["mask_w"], p["mask_b"]), (batch, 2, f, frames))
    masks = dc.softmax_sources(logits)
    crop = np.arange(length)
    outs = []
    for src in (0, 1):
        feat = w * dc.select(masks, 1, src)
        y = dc.conv1d_transposed(feat, p["decoder"], config.hop, length=total)
        outs.append(dc.gather_last(y, crop) if total != length else y)
    speech, noise = outs
    if config.mask_mode == "softmax-consistent":
        half_residual = dc.scale(xin - speech - noise, 0.5)
        speech = speech + half_residual
        noise = noise + half_residual
    return speech, noise, p


def separate(x: SignalBatch, params: ParamVector,
             config: SeparatorConfig) -> tuple[SignalBatch, SignalBatch]:
    """Gradient-free inference returning signal batches."""
    s, n = forward(x, params, config)
    sr = x.sample_rate if isinstance(x, SignalBatch) else config.sample_rate
    return SignalBatch(s.data, "teacher_speech", sr), SignalBatch(n.data, "teacher_noise", sr)


def wma_update(teacher: ParamVector, student: ParamVector, gamma: float) -> ParamVector:
    """gamma * student + (1 - gamma) * teacher."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if not teacher.same_layout(student):
        raise ShapeError("teacher and student layouts differ")
    return teacher.replace(gamma * student.values + (1.0 - gamma) * teacher.values)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, config: SeparatorConfig, params: ParamVector,
                    rng_state: dict | None = None, meta: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "layout": [[n, list(s)] for n, s in params.layout],
        "rng_state": rng_state,
        "meta": meta or {},
    }
    payload = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
               "params": params.values}
    for key, value in (arrays or {}).items():
        payload["extra/" + key] = np.asarray(value)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_npz(path, payload)
    return path


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """An .npz readable by ``np.load`` whose bytes depend only on the arrays
    (``np.savez`` stamps each member with the current time)."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(value), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


@dataclass
class Checkpoint:
    config: SeparatorConfig
    params: ParamVector
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode())
            values = np.array(z["params"])
            arrays = {k[len("extra/"):]: np.array(z[k]) for k in z.files if k.startswith("extra/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                              f"(expected {CHECKPOINT_VERSION})")
    config = SeparatorConfig(**header["config"])
    layout = tuple((n, tuple(s)) for n, s in header["layout"])
    return Checkpoint(config, ParamVector(values, layout), header.get("rng_state"),
                      header.get("meta", {}), arrays)
