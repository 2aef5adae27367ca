"""The desk-scale domain-shift benchmark: corpus specs and training recipe.

OOD is white noise, in-domain is pink noise with a lower SNR distribution.
Sizes follow the end-to-end trend check: 200 train and 50 eval chunks of
1 s at 8 kHz, 20 pretraining and 20 adaptation epochs.
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .synthdata import CorpusSpec, synthesize_corpus
from .trainer import CorpusData, TrainConfig, load_corpus_data, multi_trial

OOD_SPEC = CorpusSpec("ood", snr_mean_db=5.0, snr_std_db=7.0)
INDOMAIN_SPEC = CorpusSpec("indomain", snr_mean_db=-5.0, snr_std_db=7.0)
TRAIN = TrainConfig()


def generate(root, seed: int = 0, workers: int = 0) -> tuple[Path, Path]:
    root = Path(root)
    ood, ind = root / "ood", root / "indomain"
    synthesize_corpus(replace(OOD_SPEC, seed=seed), ood, workers)
    synthesize_corpus(replace(INDOMAIN_SPEC, seed=seed), ind, workers)
    return ood, ind


def load(root, workers: int = 0) -> CorpusData:
    root = Path(root)
    return load_corpus_data(root / "ood", root / "indomain", workers)


def run(data: CorpusData, seeds, config: TrainConfig = TRAIN, cache: dict | None = None):
    return multi_trial(config, data, seeds, cache=cache)
