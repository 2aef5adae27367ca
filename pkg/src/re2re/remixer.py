"""Batch permutations and bootstrapped remixtures.

A permutation is stored as an index map: row ``b`` of ``apply(perm, batch)``
is row ``perm.map[b]`` of ``batch``.  The second remix uses a permutation
that disagrees with the first on every row (a relative derangement), so the
two bootstrapped mixtures of a row never share a teacher-noise estimate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ShapeError
from .signal import SignalBatch

STRATEGIES = ("discordant", "independent")


@dataclass(frozen=True)
class Permutation:
    map: tuple[int, ...]
    stream: str = ""

    def __post_init__(self):
        m = tuple(int(i) for i in self.map)
        if sorted(m) != list(range(len(m))) or not m:
            raise ValueError(f"{m} is not a permutation of 0..B-1")
        object.__setattr__(self, "map", m)

    def __len__(self):
        return len(self.map)

    @property
    def index(self) -> np.ndarray:
        return np.asarray(self.map, dtype=np.intp)

    def matrix(self) -> np.ndarray:
        """The B x B permutation matrix P with (P @ a)[b] == a[map[b]]."""
        n = len(self.map)
        p = np.zeros((n, n))
        p[np.arange(n), self.index] = 1.0
        return p

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(n)))


@dataclass(frozen=True)
class PermutationPair:
    p: Permutation
    q: Permutation
    strategy: str = "discordant"

    def __post_init__(self):
        if len(self.p) != len(self.q):
            raise ValueError("p and q must have the same length")
        if self.strategy == "discordant" and any(a == b for a, b in zip(self.p.map, self.q.map)):
            raise ValueError("discordant pair shares a row assignment")


def sample_permutation(batch_size: int, rng: np.random.Generator, stream: str = "") -> Permutation:
    """Uniform random permutation (numpy's Fisher-Yates shuffle)."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return Permutation(tuple(rng.permutation(batch_size).tolist()), stream)


def sample_discordant(p: Permutation, rng: np.random.Generator, stream: str = "",
                      max_tries: int = 100_000) -> Permutation:
    """Uniform permutation q with q.map[b] != p.map[b] for every b.

    Rejection sampling; the acceptance rate tends to 1/e.
    """
    n = len(p)
    if n < 2:
        raise ValueError("no discordant permutation exists for B < 2")
    ref = p.index
    for _ in range(max_tries):
        q = rng.permutation(n)
        if not np.any(q == ref):
            return Permutation(tuple(q.tolist()), stream)
    raise RuntimeError("rejection sampler did not find a discordant permutation")


def sample_pair(batch_size: int, rng_p: np.random.Generator, rng_q: np.random.Generator,
                strategy: str = "discordant") -> PermutationPair:
    """Draw (P, Q).  P and Q come from separate streams so that P's sequence
    does not depend on whether Q is drawn."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown permutation strategy {strategy!r}")
    p = sample_permutation(batch_size, rng_p, "p")
    if strategy == "discordant":
        q = sample_discordant(p, rng_q, "q")
    else:
        q = sample_permutation(batch_size, rng_q, "q")
    return PermutationPair(p, q, strategy)


def apply(perm: Permutation, batch):
    """Row-permute a SignalBatch (or a plain array)."""
    data = batch.data if isinstance(batch, SignalBatch) else np.asarray(batch)
    if len(perm) != data.shape[0]:
        raise ShapeError(f"permutation of length {len(perm)} on batch of {data.shape[0]}")
    out = data[perm.index]
    if isinstance(batch, SignalBatch):
        return SignalBatch(out, batch.role, batch.sample_rate)
    return out


def bootstrap(teacher_speech: SignalBatch, teacher_noise: SignalBatch,
              perm: Permutation, role: str = "bootstrap_tilde") -> SignalBatch:
    """s~ + P n~."""
    if teacher_speech.data.shape != teacher_noise.data.shape:
        raise ShapeError("teacher speech and noise must have equal shapes")
    noise = apply(perm, teacher_noise)
    return SignalBatch(teacher_speech.data + noise.data, role, teacher_speech.sample_rate)


def bootstrap_pair(teacher_speech: SignalBatch, teacher_noise: SignalBatch,
                   pair: PermutationPair) -> tuple[SignalBatch, SignalBatch]:
    if teacher_speech.batch_size < 2:
        raise ValueError("two remixes need a batch of at least 2")
    x_tilde = bootstrap(teacher_speech, teacher_noise, pair.p, "bootstrap_tilde")
    x_bar = bootstrap(teacher_speech, teacher_noise, pair.q, "bootstrap_bar")
    return x_tilde, x_bar
