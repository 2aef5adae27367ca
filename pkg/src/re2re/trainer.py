"""Supervised pre-training, teacher-student adaptation, evaluation and trials.

Adaptation (one epoch, per batch):
    teacher forward without a tape -> (s~, n~)
    draw P (and Q for the Re2Re modes) -> x~ = s~ + P n~, x-bar = s~ + Q n~
    student forward on x~ with a tape -> loss for the mode -> Adam step on theta_S
and after the epoch the teacher moves towards the student by WMA.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import separator as sp
from .diffcore import Tape
from .losses import re2re_loss, re2re_reg_loss, remixit_loss, supervised_loss
from .remixer import STRATEGIES, PermutationPair, bootstrap, bootstrap_pair, sample_discordant, \
    sample_permutation
from .report import MetricsReport, aggregate
from .separator import Checkpoint, ParamVector, SeparatorConfig
from .signal import SignalBatch, si_sdr_rows
from .synthdata import Manifest, load_arrays

log = logging.getLogger(__name__)

MODES = ("supervised", "remixit", "re2re", "re2re_reg")
ADAPT_MODES = ("remixit", "re2re", "re2re_reg")
CADENCES = ("epoch", "steps")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "re2re"
    batch_size: int = 24
    epochs: int = 20
    pretrain_epochs: int = 20
    gamma: float = 0.01
    beta: float = 100.0
    lr: float = 3e-3
    pretrain_lr: float | None = 1e-2  # None: same as lr
    seed: int = 0
    wma_every: int = 1
    wma_cadence: str = "epoch"
    remixit_metric: str = "neg-si-sdr"
    supervised_metric: str = "neg-si-sdr"
    permutation_strategy: str = "discordant"
    fresh_optimizer: bool = True
    workers: int = 0
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)

    def __post_init__(self):
        if isinstance(self.separator, dict):
            object.__setattr__(self, "separator", SeparatorConfig(**self.separator))
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma: must lie in [0, 1], got {self.gamma}")
        if self.beta < 0:
            raise ConfigError(f"beta: must be >= 0, got {self.beta}")
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.mode in ADAPT_MODES and self.batch_size < 2:
            raise ConfigError(f"batch_size: remixing needs at least 2 rows, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if self.pretrain_lr is not None and self.pretrain_lr <= 0:
            raise ConfigError("pretrain_lr: must be > 0")
        if self.wma_every < 1:
            raise ConfigError("wma_every: must be >= 1")
        if self.wma_cadence not in CADENCES:
            raise ConfigError(f"wma_cadence: must be one of {CADENCES}")
        if self.permutation_strategy not in STRATEGIES:
            raise ConfigError(f"permutation_strategy: must be one of {STRATEGIES}")
        for name in ("remixit_metric", "supervised_metric"):
            if getattr(self, name) not in ("neg-si-sdr", "mse"):
                raise ConfigError(f"{name}: must be 'neg-si-sdr' or 'mse'")

    def to_dict(self) -> dict:
        return asdict(self)

    def recipe(self) -> dict:
        """Fields that can change results; ``workers`` only affects speed."""
        d = self.to_dict()
        del d["workers"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d.get("train", d))


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------- rng streams

_STREAMS = ("init", "shuffle", "perm_p", "perm_q")


def make_streams(seed: int, phase: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose; phase 0 = pre-training, 1 = adaptation."""
    return {name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(phase, i)))
            for i, name in enumerate(_STREAMS)}


def _batches(order: np.ndarray, size: int, minimum: int) -> list[np.ndarray]:
    out = [order[i:i + size] for i in range(0, len(order), size)]
    return [b for b in out if len(b) >= minimum]


# ---------------------------------------------------------------- pre-training

def pretrain_supervised(config: TrainConfig, data: dict[str, np.ndarray],
                        params: ParamVector | None = None) -> Checkpoint:
    """Train on paired OOD data (mixture, speech, noise) with the supervised loss."""
    for key in ("mixture", "speech", "noise"):
        if key not in data:
            raise ValueError(f"supervised pre-training needs '{key}' arrays")
    sep = config.separator
    rngs = make_streams(config.seed, 0)
    if params is None:
        params = sp.init_params(sep, rngs["init"])
    opt = Adam(lr=config.lr if config.pretrain_lr is None else config.pretrain_lr)
    x, s, n = data["mixture"], data["speech"], data["noise"]
    history = []
    for epoch in range(config.pretrain_epochs):
        order = rngs["shuffle"].permutation(len(x))
        losses = []
        for idx in _batches(order, config.batch_size, 1):
            tape = Tape()
            s_hat, n_hat, leaves = sp.forward_with_leaves(x[idx], params, sep, tape)
            loss = supervised_loss(s_hat, n_hat, s[idx], n[idx], config.supervised_metric)
            grads = tape.backward(loss)
            params = params.replace(opt.step(params.values, params.flat_gradient(grads, leaves)))
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
    return Checkpoint(sep, params, rngs["init"].bit_generator.state,
                      {"history": history, "seed": config.seed, "stage": "pretrained"})


# ---------------------------------------------------------------- adaptation

@dataclass
class TrainState:
    epoch: int
    teacher: ParamVector
    student: ParamVector
    optimizer: Adam
    rngs: dict[str, np.random.Generator]
    history: list[float] = field(default_factory=list)
    steps: int = 0

    def __post_init__(self):
        if not self.teacher.same_layout(self.student):
            raise ValueError("teacher and student layouts differ")


def init_state(pretrained: ParamVector, config: TrainConfig,
               optimizer: Adam | None = None) -> TrainState:
    """Teacher and student both start from the pretrained parameters."""
    opt = Adam(lr=config.lr) if (optimizer is None or config.fresh_optimizer) else optimizer
    return TrainState(0, pretrained, pretrained, opt, make_streams(config.seed, 1))


TeacherFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def mode_loss(mode: str, s_hat, n_hat, s_t: SignalBatch, n_t: SignalBatch, perms,
              x_bar: SignalBatch | None, config: TrainConfig):
    p = perms.p if isinstance(perms, PermutationPair) else perms
    if mode == "remixit":
        return remixit_loss(s_hat, n_hat, s_t, n_t, p, config.remixit_metric)
    if mode == "re2re":
        return re2re_loss(s_hat, x_bar)
    if mode == "re2re_reg":
        return re2re_reg_loss(s_hat, n_hat, s_t, n_t, p, x_bar, config.beta, config.remixit_metric)
    raise ConfigError(f"mode: {mode!r} is not an adaptation mode")


def adapt_step(state: TrainState, x: np.ndarray, idx: np.ndarray, config: TrainConfig,
               teacher_fn: TeacherFn | None = None) -> float:
    sep = config.separator
    if teacher_fn is None:
        s_t, n_t = sp.forward(x, state.teacher, sep)
        s_t, n_t = s_t.data, n_t.data
    else:
        s_t, n_t = teacher_fn(x, idx)
    s_t = SignalBatch(s_t, "teacher_speech", sep.sample_rate)
    n_t = SignalBatch(n_t, "teacher_noise", sep.sample_rate)
    rows = len(x)
    p = sample_permutation(rows, state.rngs["perm_p"], "p")
    x_bar = None
    if config.mode == "remixit":
        perms = p
        x_tilde = bootstrap(s_t, n_t, p)
    else:
        if config.permutation_strategy == "discordant":
            q = sample_discordant(p, state.rngs["perm_q"], "q")
        else:
            q = sample_permutation(rows, state.rngs["perm_q"], "q")
        perms = PermutationPair(p, q, config.permutation_strategy)
        x_tilde, x_bar = bootstrap_pair(s_t, n_t, perms)
    tape = Tape()
    s_hat, n_hat, leaves = sp.forward_with_leaves(x_tilde, state.student, sep, tape)
    loss = mode_loss(config.mode, s_hat, n_hat, s_t, n_t, perms, x_bar, config)
    grads = tape.backward(loss)
    grad = state.student.flat_gradient(grads, leaves)
    state.student = state.student.replace(state.optimizer.step(state.student.values, grad))
    state.steps += 1
    state.history.append(loss.item())
    if config.wma_cadence == "steps" and state.steps % config.wma_every == 0:
        state.teacher = sp.wma_update(state.teacher, state.student, config.gamma)
    return loss.item()


def adapt_epoch(state: TrainState, mixtures: np.ndarray, config: TrainConfig,
                teacher_fn: TeacherFn | None = None) -> TrainState:
    """One pass over the unlabelled in-domain mixtures.  Mutates and returns ``state``."""
    if config.mode not in ADAPT_MODES:
        raise ConfigError(f"mode: {config.mode!r} is not an adaptation mode")
    if config.batch_size < 2:
        raise ConfigError("batch_size: remixing needs at least 2 rows")
    order = state.rngs["shuffle"].permutation(len(mixtures))
    for idx in _batches(order, config.batch_size, 2):
        adapt_step(state, mixtures[idx], idx, config, teacher_fn)
    state.epoch += 1
    if config.wma_cadence == "epoch" and state.epoch % config.wma_every == 0:
        state.teacher = sp.wma_update(state.teacher, state.student, config.gamma)
    return state


def adapt(pretrained: ParamVector, mixtures: np.ndarray, config: TrainConfig,
          teacher_fn: TeacherFn | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    state = init_state(pretrained, config)
    for _ in range(config.epochs):
        adapt_epoch(state, mixtures, config, teacher_fn)
        log.info("%s epoch %d loss %.4f", config.mode, state.epoch,
                 float(np.mean(state.history[-5:])))
        if on_epoch is not None:
            on_epoch(state)
    return state


def state_to_checkpoint(state: TrainState, config: TrainConfig, path) -> Path:
    arrays = {"teacher": state.teacher.values}
    if state.optimizer.m is not None:
        arrays["adam_m"] = state.optimizer.m
        arrays["adam_v"] = state.optimizer.v
    meta = {"epoch": state.epoch, "steps": state.steps, "adam_t": state.optimizer.t,
            "history": state.history, "train_config": config.recipe(), "stage": "adapted"}
    rng_state = {k: g.bit_generator.state for k, g in state.rngs.items()}
    return sp.save_checkpoint(path, config.separator, state.student, rng_state, meta, arrays)


# ---------------------------------------------------------------- evaluation

Estimator = Callable[[np.ndarray], np.ndarray]


def model_estimator(params: ParamVector, config: SeparatorConfig) -> Estimator:
    def run(x):
        return sp.forward(x, params, config)[0].data
    return run


def identity_estimator(x: np.ndarray) -> np.ndarray:
    return x


@dataclass
class EvalResult:
    method: str
    si_sdr: np.ndarray
    conditions: list[str]

    def report_rows(self):
        rows = [aggregate(self.si_sdr, self.method, "all")]
        for cond in sorted(set(self.conditions)):
            mask = np.array([c == cond for c in self.conditions])
            rows.append(aggregate(self.si_sdr[mask], self.method, cond))
        return rows

    def report(self) -> MetricsReport:
        return MetricsReport(self.report_rows())


def evaluate(estimator: Estimator, data: dict, method: str = "model",
             chunk: int = 25) -> EvalResult:
    """Per-utterance SI-SDR of the speech estimate against the clean speech."""
    if "speech" not in data:
        raise ValueError("evaluation needs reference speech")
    x, s = data["mixture"], data["speech"]
    conds = list(data.get("conditions", ["all"] * len(x)))
    scores = []
    for start in range(0, len(x), chunk):
        est = estimator(x[start:start + chunk])
        scores.append(si_sdr_rows(est, s[start:start + chunk]))
    return EvalResult(method, np.concatenate(scores), conds)


# ---------------------------------------------------------------- trials

@dataclass
class CorpusData:
    """In-memory arrays for one experiment: OOD paired train, in-domain
    unlabelled train, and in-domain labelled eval."""

    ood_train: dict
    indomain_train: np.ndarray
    indomain_eval: dict
    ood_eval: dict | None = None


def run_trial(config: TrainConfig, data: CorpusData, seed: int,
              methods=ADAPT_MODES) -> dict[str, EvalResult]:
    """Pretrain a teacher with ``seed`` then adapt it with each method."""
    cfg = replace(config, seed=seed)
    ckpt = pretrain_supervised(replace(cfg, mode="supervised"), data.ood_train)
    results = {
        "input": evaluate(identity_estimator, data.indomain_eval, "input"),
        "pretrained": evaluate(model_estimator(ckpt.params, cfg.separator),
                               data.indomain_eval, "pretrained"),
    }
    for mode in methods:
        state = adapt(ckpt.params, data.indomain_train, replace(cfg, mode=mode))
        results[mode] = evaluate(model_estimator(state.student, cfg.separator),
                                 data.indomain_eval, mode)
        log.info("seed %d %s: %.2f dB", seed, mode, results[mode].si_sdr.mean())
    return results


def trials_report(per_trial: dict[int, dict[str, EvalResult]]) -> MetricsReport:
    """Aggregate per-trial means (one value per trial) into mean and sample std."""
    seeds = sorted(per_trial)
    first = per_trial[seeds[0]]
    report = MetricsReport()
    for method in first:
        conds = ["all"] + sorted(set(first[method].conditions))
        for cond in conds:
            values = []
            for seed in seeds:
                res = per_trial[seed][method]
                mask = np.ones(len(res.si_sdr), bool) if cond == "all" else \
                    np.array([c == cond for c in res.conditions])
                values.append(float(res.si_sdr[mask].mean()))
            report.add(aggregate(values, method, cond, seeds=seeds))
    return report


def multi_trial(config: TrainConfig, data: CorpusData, seeds, methods=ADAPT_MODES,
                cache: dict | None = None) -> MetricsReport:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("multi_trial needs at least 2 trials")
    per_trial = {}
    for seed in seeds:
        if cache is not None and seed in cache:
            per_trial[seed] = cache[seed]
            continue
        per_trial[seed] = run_trial(config, data, seed, methods)
        if cache is not None:
            cache[seed] = per_trial[seed]
    return trials_report(per_trial)


def load_corpus_data(ood_dir, indomain_dir, workers: int = 0) -> CorpusData:
    ood = Manifest.load(ood_dir)
    ind = Manifest.load(indomain_dir)

    def labelled(manifest, split):
        recs = sorted(manifest.split(split), key=lambda r: r.id)
        arrays = load_arrays(manifest, recs, with_references=True, workers=workers)
        arrays["conditions"] = [r.condition for r in recs]
        return arrays

    train_recs = sorted(ind.split("train"), key=lambda r: r.id)
    return CorpusData(
        ood_train=labelled(ood, "train"),
        indomain_train=load_arrays(ind, train_recs, workers=workers)["mixture"],
        indomain_eval=labelled(ind, "eval"),
        ood_eval=labelled(ood, "eval") if ood.split("eval") else None,
    )
