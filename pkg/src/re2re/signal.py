"""Waveform batches, mixing and the SI-SDR / MSE objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

ROLES = (
    "mixture", "speech", "noise",
    "teacher_speech", "teacher_noise",
    "bootstrap_tilde", "bootstrap_bar",
    "student_speech", "student_noise",
)

# returned by si_sdr when the estimate is an exact scaled copy of the reference
PERFECT = math.inf

LOSS_EPS = 1e-8


@dataclass(frozen=True)
class SignalBatch:
    """B x T block of samples with a role tag; ``sample_rate`` is metadata."""

    data: np.ndarray
    role: str = "mixture"
    sample_rate: int = 8000

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"SignalBatch needs a non-empty B x T array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("SignalBatch values must be finite")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def with_role(self, role: str) -> "SignalBatch":
        return SignalBatch(self.data, role, self.sample_rate)


def mix(speech: SignalBatch, noise: SignalBatch) -> SignalBatch:
    if speech.data.shape != noise.data.shape:
        raise ShapeError(f"cannot mix {speech.data.shape} with {noise.data.shape}")
    return SignalBatch(speech.data + noise.data, "mixture", speech.sample_rate)


def _rows(x) -> np.ndarray:
    if isinstance(x, SignalBatch):
        return x.data
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def si_sdr(estimate, reference, zero_mean: bool = False) -> float:
    """Exact scale-invariant SDR in dB of one row.

    Returns :data:`PERFECT` when the estimate lies exactly on the reference
    direction.  An all-zero reference is an error.
    """
    est = _rows(estimate).ravel()
    ref = _rows(reference).ravel()
    if est.shape != ref.shape:
        raise ShapeError(f"estimate {est.shape} vs reference {ref.shape}")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("SI-SDR is undefined for an all-zero reference")
    alpha = float(est @ ref) / ref_energy
    target = alpha * ref
    err = target - est
    err_energy = float(err @ err)
    if err_energy == 0.0:
        return PERFECT
    target_energy = float(target @ target)
    if target_energy == 0.0:
        return -math.inf
    return 10.0 * math.log10(target_energy / err_energy)


def si_sdr_rows(estimate, reference, zero_mean: bool = False) -> np.ndarray:
    est, ref = _rows(estimate), _rows(reference)
    est = est.reshape(-1, est.shape[-1])
    ref = ref.reshape(-1, ref.shape[-1])
    return np.array([si_sdr(e, r, zero_mean) for e, r in zip(est, ref)])


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_rows(x))


def si_sdr_per_row(estimate, reference, eps: float = LOSS_EPS,
                   zero_mean: bool = False) -> Tensor:
    """Stabilised, differentiable SI-SDR of each row (shape B)."""
    est, ref = _const(estimate), _const(reference)
    if est.shape != ref.shape:
        raise ShapeError(f"estimate {est.shape} vs reference {ref.shape}")
    if np.any(np.all(ref.data == 0.0, axis=-1)):
        raise ValueError("SI-SDR is undefined for an all-zero reference")
    if zero_mean:
        est = est - dc.mean(est, axis=-1, keepdims=True)
        ref = ref - dc.mean(ref, axis=-1, keepdims=True)
    dot = dc.sum(est * ref, axis=-1, keepdims=True)
    ref_energy = dc.sum(dc.square(ref), axis=-1, keepdims=True)
    alpha = dot / (ref_energy + eps)
    target = ref * alpha
    err = target - est
    num = dc.sum(dc.square(target), axis=-1) + eps
    den = dc.sum(dc.square(err), axis=-1) + eps
    return dc.scale(dc.log10(num / den), 10.0)


def neg_si_sdr_loss(estimate, reference, eps: float = LOSS_EPS,
                    zero_mean: bool = False) -> Tensor:
    return dc.scale(dc.mean(si_sdr_per_row(estimate, reference, eps, zero_mean)), -1.0)


def mse_loss(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse of {a.shape} and {b.shape}")
    return dc.mean(dc.square(a - b))
