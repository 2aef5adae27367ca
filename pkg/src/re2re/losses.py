"""Training objectives for supervised, RemixIT, Re2Re and Re2Re_reg training.

All losses average over the batch (and over samples for MSE) so that the
regularisation weight does not depend on the batch size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .remixer import Permutation, apply
from .signal import SignalBatch, mse_loss, neg_si_sdr_loss

METRICS = ("neg-si-sdr", "mse")


@dataclass(frozen=True)
class LossConfig:
    remixit_metric: str = "neg-si-sdr"
    re2re_metric: str = "mse"
    supervised_metric: str = "neg-si-sdr"
    beta: float = 100.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        for name in ("remixit_metric", "supervised_metric"):
            if getattr(self, name) not in METRICS:
                raise ValueError(f"{name} must be one of {METRICS}")
        if self.re2re_metric != "mse":
            raise ValueError("re2re_metric must be 'mse'")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, (SignalBatch, Tensor)) else np.asarray(x, dtype=np.float64)


def _tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(_arr(x))


def reconstruction(estimate, target, metric: str) -> Tensor:
    if metric == "mse":
        return mse_loss(_tensor(estimate), _tensor(target))
    if metric == "neg-si-sdr":
        return neg_si_sdr_loss(_tensor(estimate), _tensor(target))
    raise ValueError(f"unknown metric {metric!r}")


def _same_shape(*xs) -> None:
    shapes = {_arr(x).shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"mismatched shapes {sorted(shapes)}")


def supervised_loss(speech_est, noise_est, speech, noise, metric: str = "neg-si-sdr") -> Tensor:
    _same_shape(speech_est, noise_est, speech, noise)
    return reconstruction(speech_est, speech, metric) + reconstruction(noise_est, noise, metric)


def remixit_loss(speech_est, noise_est, teacher_speech, teacher_noise,
                 perm: Permutation, metric: str = "neg-si-sdr") -> Tensor:
    """Student outputs against (s~, P n~); note the noise target is permuted."""
    _same_shape(speech_est, noise_est, teacher_speech, teacher_noise)
    noise_target = apply(perm, _arr(teacher_noise))
    return (reconstruction(speech_est, teacher_speech, metric)
            + reconstruction(noise_est, noise_target, metric))


def re2re_loss(speech_est, x_bar) -> Tensor:
    """MSE between the student's speech estimate on x~ and the other remix x-bar."""
    _same_shape(speech_est, x_bar)
    return mse_loss(_tensor(speech_est), _tensor(x_bar))


def re2re_reg_loss(speech_est, noise_est, teacher_speech, teacher_noise,
                   perm: Permutation, x_bar, beta: float = 100.0,
                   metric: str = "neg-si-sdr") -> Tensor:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    base = remixit_loss(speech_est, noise_est, teacher_speech, teacher_noise, perm, metric)
    return base + dc.scale(re2re_loss(speech_est, x_bar), beta)


@dataclass(frozen=True)
class DecompositionReport:
    """Squared-L2 expansion of the student-to-teacher error.

    total == student_error_term + teacher_error_term - 2 * cross_term + residual,
    and equivalently
    total == student_error_term - teacher_error_term - 2 * teacher_student_cross.
    All terms are batch means of per-row inner products (and means over M
    remixes when several student outputs share one teacher estimate).
    """

    total: float
    student_error_term: float
    teacher_error_term: float
    cross_term: float
    residual: float
    teacher_student_cross: float
    supervised_form_residual: float
    num_remixes: int = 1


def decompose_remixit(speech_est, teacher_speech, speech) -> DecompositionReport:
    est = _arr(speech_est)
    teach = _arr(teacher_speech)
    ref = _arr(speech)
    if teach.shape != ref.shape:
        raise ShapeError(f"teacher {teach.shape} vs reference {ref.shape}")
    if est.shape == ref.shape:
        est = est[None]
    elif est.shape[1:] != ref.shape:
        raise ShapeError(f"student {est.shape} vs reference {ref.shape}")
    m = est.shape[0]

    def rowdot(a, b):
        return np.einsum("...t,...t->...", a, b)

    eps_t = teach - ref
    eps_s = est - ref
    total = rowdot(est - teach, est - teach).mean()
    student = rowdot(eps_s, eps_s).mean()
    teacher = rowdot(eps_t, eps_t).mean()
    cross = rowdot(np.broadcast_to(eps_t, est.shape), eps_s).mean()
    # teacher error against the empirical mean deviation of the student from s~
    mean_dev = (est - teach).mean(axis=0)
    ts_cross = rowdot(eps_t, mean_dev).mean()
    residual = total - (student + teacher - 2.0 * cross)
    sup_residual = total - (student - teacher - 2.0 * ts_cross)
    return DecompositionReport(float(total), float(student), float(teacher), float(cross),
                               float(residual), float(ts_cross), float(sup_residual), m)
