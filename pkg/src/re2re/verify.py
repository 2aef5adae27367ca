"""Property suite run by ``re2re verify``.

Each check measures one residual or statistic and compares it with a bound.
Gradient checks are done per primitive op as well as for each training loss
composed with the separator, so a corrupted vjp (see
:func:`re2re.diffcore.inject_gradient_fault`) shows up under its op name.
"""
from __future__ import annotations

import itertools
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from . import diffcore as dc
from . import separator as sp
from .diffcore import Tape, Tensor
from .losses import decompose_remixit, re2re_loss, re2re_reg_loss, remixit_loss, supervised_loss
from .remixer import Permutation, bootstrap_pair, sample_discordant, sample_pair, sample_permutation
from .signal import SignalBatch, neg_si_sdr_loss, si_sdr
from .trainer import TrainConfig

FD_STEP = 1e-5


@dataclass(frozen=True)
class PropertyResult:
    name: str
    value: float
    bound: float | None
    upper: bool = True  # value must be <= bound; otherwise value must be > bound
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        if self.bound is None:
            return True
        return self.value <= self.bound if self.upper else self.value > self.bound

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.bound is None:
            rule = "(report only)"
        else:
            rule = f"{'<=' if self.upper else '>'} {self.bound:.0e}"
        return f"{status}  {self.name:<34} {self.value:.3e} {rule}"


def _timed(name: str, bound, fn: Callable[[], float], upper: bool = True) -> PropertyResult:
    start = time.perf_counter()
    value = float(fn())
    return PropertyResult(name, value, bound, upper, time.perf_counter() - start)


def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------- primitive ops

def _op_cases() -> dict[str, Callable]:
    """Small differentiable expressions that isolate each primitive (x: 2 x 9, w: 2 x 3)."""
    proj = Tensor([[0.7, -0.4], [0.2, 0.9]])
    bias = Tensor([0.1, -0.2])
    return {
        "add": lambda x, w: x + dc.reshape(dc.sum(w, -1, keepdims=True), (2, 1)),
        "sub": lambda x, w: x - dc.reshape(dc.sum(w, -1, keepdims=True), (2, 1)),
        "mul": lambda x, w: x * dc.reshape(dc.sum(w, -1, keepdims=True), (2, 1)),
        "div": lambda x, w: x / (dc.square(dc.reshape(dc.sum(w, -1, keepdims=True), (2, 1))) + 1.0),
        "scale": lambda x, w: dc.scale(x, -2.5),
        "square": lambda x, w: dc.square(x),
        "sqrt": lambda x, w: dc.sqrt(dc.square(x) + 0.5),
        "log10": lambda x, w: dc.log10(dc.square(x) + 0.5),
        "relu": lambda x, w: dc.relu(x),
        "prelu": lambda x, w: dc.prelu(dc.reshape(x, (1, 2, 9)), dc.select(w, 1, 0)),
        "sum": lambda x, w: dc.sum(x, -1, keepdims=True),
        "reshape": lambda x, w: dc.reshape(x, (3, 6)),
        "select": lambda x, w: dc.select(dc.reshape(x, (2, 3, 3)), 1, 2),
        "gather_last": lambda x, w: dc.gather_last(x, np.array([0, 3, 3, 1, 8])),
        "softmax_sources": lambda x, w: dc.softmax_sources(dc.reshape(x, (1, 2, 3, 3))),
        "conv1d": lambda x, w: dc.conv1d(x, w, 2),
        "conv1d_transposed": lambda x, w: dc.conv1d_transposed(dc.reshape(x, (1, 2, 9)), w, 2),
        "pointwise": lambda x, w: dc.pointwise(dc.reshape(x, (1, 2, 9)), proj, bias)
        + dc.reshape(dc.select(w, 1, 1), (1, 2, 1)) * 0.0,
        "depthwise_conv1d": lambda x, w: dc.depthwise_conv1d(dc.reshape(x, (1, 2, 9)), w),
    }


def check_op_gradients(seed: int = 0) -> list[PropertyResult]:
    results = []
    for k, (name, fn) in enumerate(sorted(_op_cases().items())):
        def measure(name=name, fn=fn, k=k):
            rng = np.random.default_rng([seed, k])
            x0 = rng.standard_normal((2, 9))
            w0 = rng.standard_normal((2, 3))
            probe = rng.standard_normal(fn(Tensor(x0), Tensor(w0)).shape)

            def f(x, w):
                return float(np.sum(fn(Tensor(x), Tensor(w)).data * probe))

            tape = Tape()
            x, w = tape.leaf(x0), tape.leaf(w0)
            grads = tape.backward(dc.sum(fn(x, w) * probe))
            err = _rel(grads[x], central_difference(lambda v: f(v, w0), x0))
            gw = central_difference(lambda v: f(x0, v), w0)
            if np.any(gw):
                err = max(err, _rel(grads[w], gw))
            return err
        results.append(_timed(f"gradient[{name}]", 1e-6, measure))
    return results


def central_difference(f: Callable[[np.ndarray], float], x0: np.ndarray,
                       h: float = FD_STEP) -> np.ndarray:
    x = np.array(x0, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return g


# ---------------------------------------------------------------- losses through the separator

LOSS_NAMES = ("supervised", "remixit", "re2re", "re2re_reg")


def _random_point(config: sp.SeparatorConfig, rng: np.random.Generator) -> sp.ParamVector:
    """Initialised weights moved off the zero-bias / default-slope point."""
    base = sp.init_params(config, rng)
    return base.replace(base.values + 0.05 * rng.standard_normal(len(base)))


def loss_gradient_errors(loss: str, points: int = 10, seed: int = 0,
                         config: sp.SeparatorConfig | None = None, batch: int = 4,
                         length: int = 160, coords: int = 16, directions: int = 4,
                         beta: float = 100.0) -> list[float]:
    """Relative error between analytic and central-difference derivatives of
    ``loss`` w.r.t. the student parameters, one value per random point.

    At each point the derivative is compared on ``coords`` random coordinates
    and ``directions`` random unit directions (the full parameter vector is
    too long to difference coordinate by coordinate).  A probe whose stencil
    straddles a relu/prelu kink is redrawn: the difference quotient there
    does not estimate the derivative.
    """
    config = config or TrainConfig().separator
    if loss not in LOSS_NAMES:
        raise ValueError(f"unknown loss {loss!r}")
    errors = []
    for k in range(points):
        rng = np.random.default_rng([seed, LOSS_NAMES.index(loss), k])
        speech = 0.5 * rng.standard_normal((batch, length))
        noise = 0.5 * rng.standard_normal((batch, length))
        teacher = _random_point(config, rng)
        student = _random_point(config, rng)
        s_t, n_t = sp.forward(speech + noise, teacher, config)
        s_t = SignalBatch(s_t.data, "teacher_speech")
        n_t = SignalBatch(n_t.data, "teacher_noise")
        pair = sample_pair(batch, rng, rng)
        x_tilde, x_bar = bootstrap_pair(s_t, n_t, pair)
        x_in = speech + noise if loss == "supervised" else x_tilde.data

        def objective(s_hat, n_hat):
            if loss == "supervised":
                return supervised_loss(s_hat, n_hat, speech, noise)
            if loss == "remixit":
                return remixit_loss(s_hat, n_hat, s_t, n_t, pair.p)
            if loss == "re2re":
                return re2re_loss(s_hat, x_bar)
            return re2re_reg_loss(s_hat, n_hat, s_t, n_t, pair.p, x_bar, beta)

        def value(theta):
            tape = Tape()
            s_hat, n_hat, _ = sp.forward_with_leaves(x_in, student.replace(theta), config, tape)
            return objective(s_hat, n_hat).item(), tape.branch_pattern()

        tape = Tape()
        s_hat, n_hat, leaves = sp.forward_with_leaves(x_in, student, config, tape)
        grad = student.flat_gradient(tape.backward(objective(s_hat, n_hat)), leaves)
        pattern = tape.branch_pattern()
        theta = student.values

        def derivative(d):
            """Central difference along d, or None if the stencil crosses a kink."""
            up, p_up = value(theta + FD_STEP * d)
            down, p_down = value(theta - FD_STEP * d)
            if p_up != pattern or p_down != pattern:
                return None
            return (up - down) / (2 * FD_STEP)

        def sampled(make, count):
            analytic, numeric = [], []
            while len(numeric) < count:
                d = make()
                fd = derivative(d)
                if fd is not None:
                    analytic.append(grad @ d)
                    numeric.append(fd)
            return _rel(analytic, numeric)

        def coordinate():
            e = np.zeros_like(theta)
            e[rng.integers(len(theta))] = 1.0
            return e

        def direction():
            d = rng.standard_normal(len(theta))
            return d / np.linalg.norm(d)

        errors.append(max(sampled(coordinate, coords), sampled(direction, directions)))
    return errors


def check_loss_gradients(points: int = 10, seed: int = 0) -> list[PropertyResult]:
    return [_timed(f"gradient[{name} loss]", 1e-4,
                   lambda name=name: max(loss_gradient_errors(name, points, seed)))
            for name in LOSS_NAMES]


# ---------------------------------------------------------------- algebraic identities

def decomposition_residual(batches: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(batches):
        b = (2, 4, 24)[k % 3]
        t = (16, 160)[(k // 3) % 2]
        est, teach, ref = (rng.standard_normal((b, t)) for _ in range(3))
        rep = decompose_remixit(est, teach, ref)
        worst = max(worst, abs(rep.residual), abs(rep.supervised_form_residual))
    return worst


def adjoint_residual(geometries: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(geometries):
        b, f = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        k, stride = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        t = k + int(rng.integers(0, 40))
        n = dc.conv_output_length(t, k, stride)
        x, w = rng.standard_normal((b, t)), rng.standard_normal((f, k))
        y = rng.standard_normal((b, f, n))
        lhs = np.sum(dc.conv1d(x, w, stride).data * y)
        rhs = np.sum(x * dc.conv1d_transposed(y, w, stride, length=t).data)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst


def si_sdr_residual() -> float:
    """Worst deviation over the hand-derived cases and scale invariance."""
    errs = [abs(si_sdr([1.0, 1.0], [1.0, 0.0]) - 0.0),
            abs(si_sdr([2.0, 2.0], [1.0, 0.0]) - 0.0)]
    rng = np.random.default_rng(0)
    s = rng.standard_normal(256)
    est = s + 0.3 * rng.standard_normal(256)
    base = si_sdr(est, s)
    errs += [abs(si_sdr(c * est, s) - base) for c in (0.1, 2.0, 1000.0)]
    if si_sdr(s, s) != float("inf"):
        return float("inf")
    if not np.isfinite(neg_si_sdr_loss(s[None], s[None]).item()):
        return float("inf")
    return max(errs)


def wma_residual(steps: int = 100, gamma: float = 0.01, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    layout = (("theta", (64,)),)
    teacher = sp.ParamVector(rng.standard_normal(64), layout)
    student = sp.ParamVector(rng.standard_normal(64), layout)
    d0 = np.linalg.norm(teacher.values - student.values)
    worst = 0.0
    for k in range(1, steps + 1):
        teacher = sp.wma_update(teacher, student, gamma)
        ratio = np.linalg.norm(teacher.values - student.values) / d0
        worst = max(worst, abs(ratio - (1 - gamma) ** k))
    return worst


def consistency_residual(seed: int = 0) -> float:
    config = TrainConfig().separator
    rng = np.random.default_rng(seed)
    params = _random_point(config, rng)
    x = rng.standard_normal((3, 333))
    s, n = sp.forward(x, params, config)
    return float(np.max(np.abs(s.data + n.data - x)))


# ---------------------------------------------------------------- statistics

def uniformity_pvalue(draws: int = 60000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    counts = Counter(sample_permutation(3, rng).map for _ in range(draws))
    observed = [counts[p] for p in itertools.permutations(range(3))]
    return float(stats.chisquare(observed).pvalue)


def derangement_deviation(draws: int = 10000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    ident = Permutation.identity(3)
    counts = Counter(sample_discordant(ident, rng).map for _ in range(draws))
    if set(counts) - {(1, 2, 0), (2, 0, 1)}:
        return float("inf")
    return max(abs(counts[d] / draws - 0.5) for d in ((1, 2, 0), (2, 0, 1)))


def discordance_violations(pairs: int = 100_000, batch: int = 24, seed: int = 0) -> int:
    rng_p = np.random.default_rng([seed, 0])
    rng_q = np.random.default_rng([seed, 1])
    bad = 0
    for _ in range(pairs):
        pair = sample_pair(batch, rng_p, rng_q)
        bad += int(np.any(pair.p.index == pair.q.index))
    return bad


def n2n_gain(samples: int = 100_000, rows: int = 10, sigma_s: float = 1.0, sigma_n: float = 1.0,
             teacher_error: float = 0.0, seed: int = 0) -> float:
    """Single-gain student w minimising the Re2Re loss on x~ with an oracle
    (or, with ``teacher_error`` > 0, a perturbed) teacher.

    The loss is quadratic in w, so its derivative at w = 0 and w = 1 locates
    the minimiser exactly.
    """
    rng = np.random.default_rng(seed)
    t = samples // rows
    s = sigma_s * rng.standard_normal((rows, t))
    n = sigma_n * rng.standard_normal((rows, t))
    err = teacher_error * rng.standard_normal((rows, t))
    s_t, n_t = SignalBatch(s + err), SignalBatch(n - err)
    pair = sample_pair(rows, rng, rng)
    x_tilde, x_bar = bootstrap_pair(s_t, n_t, pair)

    def slope(w0):
        tape = Tape()
        w = tape.leaf(w0)
        loss = re2re_loss(Tensor(x_tilde.data) * w, x_bar)
        return float(tape.backward(loss)[w])

    g0, g1 = slope(0.0), slope(1.0)
    return g0 / (g0 - g1)


# ---------------------------------------------------------------- suite

def run_suite(quick: bool = False, seed: int = 0) -> list[PropertyResult]:
    wiener = 1.0 / (1.0 + 1.0)
    points = 3 if quick else 10
    results = [
        _timed("decomposition identity", 1e-10, lambda: decomposition_residual(seed=seed)),
        _timed("conv adjointness", 1e-12, lambda: adjoint_residual(seed=seed)),
        _timed("si-sdr hand cases", 1e-9, si_sdr_residual),
        _timed("mixture consistency", 1e-12, lambda: consistency_residual(seed)),
        _timed("wma contraction", 1e-12, lambda: wma_residual(seed=seed)),
    ]
    results += check_op_gradients(seed)
    results += check_loss_gradients(points, seed)
    results += [
        _timed("permutation uniformity p", 1e-3, lambda: uniformity_pvalue(seed=seed), upper=False),
        _timed("derangement frequency", 0.02, lambda: derangement_deviation(seed=seed)),
        _timed("discordance violations", 0,
               lambda: discordance_violations(10_000 if quick else 100_000, seed=seed)),
        _timed("n2n wiener gain rel err", 0.05,
               lambda: abs(n2n_gain(seed=seed) - wiener) / wiener),
        _timed("n2n gain, noisy teacher", None,
               lambda: abs(n2n_gain(teacher_error=0.3, seed=seed) - wiener) / wiener),
    ]
    return results
