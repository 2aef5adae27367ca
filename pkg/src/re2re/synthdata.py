"""Synthetic domain-shifted corpora: harmonic speech-like signals plus noise.

The out-of-domain corpus (paired, labelled) uses white noise; the in-domain
corpus uses pink noise and its training split is written without any
speech or noise component files.
"""
from __future__ import annotations

import json
import math
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .signal import SignalBatch

SCHEMA_VERSION = 1
NOISE_KINDS = ("white", "pink", "bandpassed")
DOMAINS = ("ood", "indomain")
SPLITS = ("train", "eval")
DEFAULT_NOISE = {"ood": "white", "indomain": "pink"}
SNR_CLIP_DB = (-10.0, 20.0)
PEAK = 0.5
MAX_MIX_PEAK = 0.99
PCM_SCALE = 32767.0
BAND_HZ = (300.0, 2000.0)


class WavFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class UnlabeledError(PermissionError):
    """Raised when ground truth is requested for an unlabelled record."""


@dataclass(frozen=True)
class CorpusSpec:
    domain: str = "ood"
    num_utterances: int = 200
    num_eval: int = 50
    chunk_seconds: float = 1.0
    sample_rate: int = 8000
    speech_kind: str = "harmonic-am"
    noise_kind: str | None = None
    snr_mean_db: float = 5.0
    snr_std_db: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain: must be one of {DOMAINS}, got {self.domain!r}")
        if self.noise_kind is None:
            object.__setattr__(self, "noise_kind", DEFAULT_NOISE[self.domain])
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind: must be one of {NOISE_KINDS}, got {self.noise_kind!r}")
        if self.speech_kind != "harmonic-am":
            raise ValueError(f"speech_kind: only 'harmonic-am' is supported, got {self.speech_kind!r}")
        if not self.chunk_seconds > 0:
            raise ValueError("chunk_seconds: must be > 0")
        if self.snr_std_db < 0:
            raise ValueError("snr_std_db: must be >= 0")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate: must be > 0")
        if self.num_utterances < 0 or self.num_eval < 0:
            raise ValueError("num_utterances/num_eval: must be >= 0")

    @property
    def num_samples(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown corpus field")
        return cls(**d)


def utterance_rng(seed: int, domain: str, split: str, index: int) -> np.random.Generator:
    """Independent stream per (seed, utterance id); order of generation is irrelevant."""
    ss = np.random.SeedSequence(seed, spawn_key=(DOMAINS.index(domain), SPLITS.index(split), index))
    return np.random.default_rng(ss)


# ---------------------------------------------------------------- generators

def _raised_cosine_gate(n: int, ramp: int) -> np.ndarray:
    gate = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp)
        gate[:ramp] = r
        gate[-ramp:] = r[::-1]
    return gate


def gen_speechlike(spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    """Voiced harmonic segments separated by silent gaps, peak 0.5."""
    n = spec.num_samples
    sr = spec.sample_rate
    num_gaps = int(rng.integers(1, 4))
    silent = rng.uniform(0.15, 0.32) * n
    gaps = rng.dirichlet(np.ones(num_gaps)) * silent
    voiced = rng.dirichlet(np.ones(num_gaps + 1) * 2.0) * (n - silent)
    # interleave voiced, gap, voiced, ..., voiced
    bounds = np.cumsum(np.ravel(np.column_stack([voiced[:-1], gaps])).tolist() + [voiced[-1]])
    edges = np.concatenate([[0], np.round(bounds).astype(int)])
    edges[-1] = n
    out = np.zeros(n)
    ramp = int(0.01 * sr)
    for seg in range(0, len(edges) - 1, 2):
        start, stop = edges[seg], edges[seg + 1]
        length = stop - start
        if length <= 0:
            continue
        t = np.arange(length) / sr
        f0 = rng.uniform(100.0, 300.0)
        glide = 1.0 + rng.uniform(-0.05, 0.05) * t / max(t[-1], 1e-9)
        phase_base = 2 * np.pi * np.cumsum(f0 * glide) / sr
        harmonics = int(rng.integers(3, 6))
        seg_sig = np.zeros(length)
        for h in range(1, harmonics + 1):
            amp = rng.uniform(0.3, 1.0) / h
            seg_sig += amp * np.sin(h * phase_base + rng.uniform(0, 2 * np.pi))
        rates = rng.uniform(2.0, 6.0, size=2)
        phases = rng.uniform(0, 2 * np.pi, size=2)
        env = 0.6 + 0.2 * np.sin(2 * np.pi * rates[0] * t + phases[0]) \
            + 0.2 * np.sin(2 * np.pi * rates[1] * t + phases[1])
        out[start:stop] = seg_sig * env * _raised_cosine_gate(length, ramp)
    peak = np.abs(out).max()
    return out * (PEAK / peak)


def silent_fraction(x: np.ndarray, sample_rate: int, threshold_db: float = -40.0,
                    frame_seconds: float = 0.01) -> float:
    """Fraction of frames whose RMS is more than |threshold_db| below the loudest frame."""
    frame = max(1, int(frame_seconds * sample_rate))
    usable = (len(x) // frame) * frame
    rms = np.sqrt(np.mean(x[:usable].reshape(-1, frame) ** 2, axis=1))
    limit = rms.max() * 10 ** (threshold_db / 20)
    return float(np.mean(rms < limit))


def gen_noise(kind: str, spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance noise of the requested colour."""
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    n = spec.num_samples
    white = rng.standard_normal(n)
    if kind == "white":
        x = white
    else:
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / spec.sample_rate)
        if kind == "pink":
            shape = np.zeros_like(freqs)
            shape[1:] = 1.0 / np.sqrt(freqs[1:])
        else:
            shape = ((freqs >= BAND_HZ[0]) & (freqs <= BAND_HZ[1])).astype(float)
        x = np.fft.irfft(spectrum * shape, n)
    x = x - x.mean()
    return x / x.std()


def noise_gain(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    return math.sqrt(float(speech @ speech) / (float(noise @ noise) * 10 ** (snr_db / 10)))


def snr_db(speech: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(float(speech @ speech) / float(noise @ noise))


def snr_bucket(value: float | None) -> str:
    if value is None:
        return "unknown"
    for lo, hi in ((-10, 0), (0, 5), (5, 10)):
        if value < hi:
            return f"[{lo},{hi})"
    return "[10,20]"


# ---------------------------------------------------------------- wav i/o

def _to_pcm(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, -1.0, 1.0) * PCM_SCALE).astype(np.int16)


def write_wav(path, row, sample_rate: int = 8000) -> Path:
    """Write one float row in [-1, 1] as 16-bit PCM mono."""
    data = row.data[0] if isinstance(row, SignalBatch) else np.asarray(row, dtype=np.float64).ravel()
    return write_pcm(path, _to_pcm(data), sample_rate)


def write_pcm(path, samples: np.ndarray, sample_rate: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        raise WavFormatError("PCM samples must be int16")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(samples.astype("<i2").tobytes())
    return path


def read_pcm(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise WavFormatError(f"{path}: {w.getnchannels()} channels, expected mono")
            if w.getsampwidth() != 2:
                raise WavFormatError(f"{path}: {8 * w.getsampwidth()}-bit samples, expected 16-bit")
            if w.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV is not supported")
            frames = w.getnframes()
            rate = w.getframerate()
            raw = w.readframes(frames)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if len(raw) != 2 * frames:
        raise WavFormatError(f"{path}: truncated data ({len(raw)} of {2 * frames} bytes)")
    return np.frombuffer(raw, dtype="<i2").astype(np.int16), rate


def read_wav(path, role: str = "mixture") -> SignalBatch:
    pcm, rate = read_pcm(path)
    if pcm.size == 0:
        raise WavFormatError(f"{path}: no samples")
    return SignalBatch(pcm.astype(np.float64)[None, :] / PCM_SCALE, role, rate)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class Record:
    id: str
    domain: str
    split: str
    mixture: str
    speech: str | None = None
    noise: str | None = None
    snr_db: float | None = None
    noise_kind: str | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def labelled(self) -> bool:
        return self.speech is not None and self.noise is not None

    @property
    def condition(self) -> str:
        return f"{self.noise_kind}/snr{snr_bucket(self.snr_db)}"


@dataclass
class Manifest:
    root: Path
    records: list[Record] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return self.root / "manifest.jsonl"

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def save(self) -> Path:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        self.path.write_text("\n".join(lines) + "\n")
        return self.path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            version = d.get("schema_version")
            if version != SCHEMA_VERSION:
                raise ManifestError(f"{path}:{lineno}: schema_version {version}, expected {SCHEMA_VERSION}")
            try:
                rec = Record(**d)
            except TypeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.domain == "indomain" and rec.split == "train" and (rec.speech or rec.noise):
                raise ManifestError(f"{path}:{lineno}: in-domain training records must be unlabelled")
            records.append(rec)
        return cls(path.parent, records)

    def mixture(self, rec: Record) -> SignalBatch:
        return read_wav(self.root / rec.mixture, "mixture")

    def references(self, rec: Record) -> tuple[SignalBatch, SignalBatch]:
        if not rec.labelled:
            raise UnlabeledError(f"{rec.id} has no ground-truth components")
        return (read_wav(self.root / rec.speech, "speech"),
                read_wav(self.root / rec.noise, "noise"))


def load_arrays(manifest: Manifest, records: list[Record], with_references: bool = False,
                workers: int = 0) -> dict[str, np.ndarray]:
    """Stack the records' waveforms into N x T arrays, in record order.

    ``workers > 0`` reads files on a thread pool; ``map`` keeps the order,
    so the result does not depend on the worker count.
    """
    def load(rec):
        x = manifest.mixture(rec).data[0]
        if not with_references:
            return (x,)
        s, n = manifest.references(rec)
        return x, s.data[0], n.data[0]

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(load, records))
    else:
        rows = [load(r) for r in records]
    if not rows:
        raise ManifestError("no records to load")
    out = {"mixture": np.stack([r[0] for r in rows])}
    if with_references:
        out["speech"] = np.stack([r[1] for r in rows])
        out["noise"] = np.stack([r[2] for r in rows])
    return out


# ---------------------------------------------------------------- corpus

def _make_utterance(spec: CorpusSpec, split: str, index: int):
    rng = utterance_rng(spec.seed, spec.domain, split, index)
    speech = gen_speechlike(spec, rng)
    noise = gen_noise(spec.noise_kind, spec, rng)
    target = float(np.clip(rng.normal(spec.snr_mean_db, spec.snr_std_db), *SNR_CLIP_DB))
    noise = noise * noise_gain(speech, noise, target)
    peak = np.abs(speech + noise).max()
    if peak > MAX_MIX_PEAK:
        speech, noise = speech * (MAX_MIX_PEAK / peak), noise * (MAX_MIX_PEAK / peak)
    s_pcm, n_pcm = _to_pcm(speech), _to_pcm(noise)
    # mixture is the exact integer sum so components add up to it
    x_pcm = (s_pcm.astype(np.int32) + n_pcm.astype(np.int32)).astype(np.int16)
    return s_pcm, n_pcm, x_pcm, target


def synthesize_corpus(spec: CorpusSpec, out_dir, workers: int = 0) -> Manifest:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "corpus_spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_dir}: {exc}") from exc

    jobs = [(split, i) for split, count in (("train", spec.num_utterances), ("eval", spec.num_eval))
            for i in range(count)]

    def build(job):
        split, i = job
        uid = f"{spec.domain}-{split}-{i:05d}"
        s_pcm, n_pcm, x_pcm, target = _make_utterance(spec, split, i)
        labelled = not (spec.domain == "indomain" and split == "train")
        rel = Path(split)
        write_pcm(out_dir / rel / f"{uid}_mix.wav", x_pcm, spec.sample_rate)
        if labelled:
            write_pcm(out_dir / rel / f"{uid}_speech.wav", s_pcm, spec.sample_rate)
            write_pcm(out_dir / rel / f"{uid}_noise.wav", n_pcm, spec.sample_rate)
        return Record(
            id=uid, domain=spec.domain, split=split,
            mixture=str(rel / f"{uid}_mix.wav"),
            speech=str(rel / f"{uid}_speech.wav") if labelled else None,
            noise=str(rel / f"{uid}_noise.wav") if labelled else None,
            snr_db=target if labelled else None,
            noise_kind=spec.noise_kind,
        )

    try:
        if workers > 0:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(build, jobs))
        else:
            records = [build(j) for j in jobs]
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_dir}: {exc}") from exc
    manifest = Manifest(out_dir, records)
    manifest.save()
    return manifest
