"""Letter metrics, confusion matrices and the word-length by sample-count grid."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .classify import ConfusionMatrix, LetterPrediction, classify_many
from .core import Dataset, WritingMode, letter_index
from .synth import KinematicsConfig, NoiseConfig, synth_recording
from .worddecode import ConfusionModel, Lexicon, NoWordFound, PositionObservations, decode_word

LENGTHS = (3, 4, 5, 6)
KS = (2, 3, 4, 5)

# A predictor maps a recording to a prediction, or to None when it produced no letter.
Predictor = Callable[[object], Optional[LetterPrediction]]


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    n: int

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.macro_f1 <= 1.0):
            raise ValueError("metrics must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "n": self.n}


def _as_letter(p) -> str | None:
    if p is None:
        return None
    return getattr(p, "letter", p)


def compute_metrics(preds: Sequence, truths: Sequence[str]) -> Metrics:
    """Accuracy and macro F1; a ``None`` prediction counts as wrong.

    Macro F1 averages per-class F1 over the classes that occur in the truths
    or among the predictions. A class with precision + recall = 0 has F1 0.
    """
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} truths")
    if not truths:
        raise ValueError("no samples")
    p = [_as_letter(x) for x in preds]
    hits = sum(a == b for a, b in zip(p, truths))
    classes = sorted(set(truths) | {x for x in p if x is not None})
    f1s = []
    for c in classes:
        tp = sum(a == c and b == c for a, b in zip(p, truths))
        fp = sum(a == c and b != c for a, b in zip(p, truths))
        fn = sum(a != c and b == c for a, b in zip(p, truths))
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return Metrics(hits / len(truths), math.fsum(f1s) / len(f1s), len(truths))


def confusion(preds: Sequence, truths: Sequence[str]) -> ConfusionMatrix:
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} truths")
    cm = ConfusionMatrix()
    for p, t in zip(preds, truths):
        ti = letter_index(t)
        letter = _as_letter(p)
        if letter is None:
            cm.no_letter[ti] += 1
        else:
            cm.counts[ti, letter_index(letter)] += 1
    return cm


@dataclass
class LetterEval:
    metrics: Metrics
    confusion: ConfusionMatrix
    sources: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics.to_dict(), "confusion": self.confusion.to_dict(), "sources": self.sources}


def run_letter_eval(predictor: Predictor, test: Dataset, jobs: int = 1) -> dict[str, LetterEval]:
    """Apply ``predictor`` to every recording; results per writing mode (``"2D"``, ``"3D"``).

    ``sources`` tallies which component produced each prediction, which for
    the 3D pipeline is the rate at which the CNN and the gallery disagree.
    """
    out = {}
    for mode in WritingMode:
        recs = [r for r in test if r.mode is mode]
        if not recs:
            continue
        preds = classify_many(predictor, recs, jobs)
        truths = [r.letter for r in recs]
        sources: dict[str, int] = {}
        for p in preds:
            key = "no_letter" if p is None else getattr(getattr(p, "source", None), "value", "other")
            sources[key] = sources.get(key, 0) + 1
        out[mode.value] = LetterEval(compute_metrics(preds, truths), confusion(preds, truths), dict(sorted(sources.items())))
    return out


def oracle_predictor(rec) -> str:
    return rec.letter


def constant_predictor(letter: str = "A") -> Callable:
    letter_index(letter)
    return lambda rec: letter


# -- word grid ---------------------------------------------------------------

@dataclass
class WordGridResult:
    cells: dict
    words_per_cell: int
    seed: int
    samples: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in self.cells.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError("grid cells must lie in [0, 1]")

    @property
    def lengths(self) -> list[int]:
        return sorted({n for n, _ in self.cells})

    @property
    def ks(self) -> list[int]:
        return sorted({k for _, k in self.cells})

    def mean_for_lengths(self, max_len: int) -> float:
        vals = [v for (n, _), v in self.cells.items() if n <= max_len]
        return math.fsum(vals) / len(vals)

    def to_dict(self) -> dict:
        return {
            "words_per_cell": self.words_per_cell,
            "seed": self.seed,
            "cells": [{"length": n, "k": k, "accuracy": self.cells[n, k]} for n, k in sorted(self.cells)],
            "samples": {f"{n},{k}": v for (n, k), v in sorted(self.samples.items())},
        }

    def table(self) -> str:
        """Plain-text grid: one row per word length, one column per k."""
        head = "length | " + " | ".join(f"k={k}" for k in self.ks)
        rows = [head, "-" * len(head)]
        for n in self.lengths:
            rows.append(f"{n:>6} | " + " | ".join(f"{self.cells[n, k]:.3f}".rjust(len(f"k={k}")) for k in self.ks))
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class WordSynth:
    """How each letter drawing of a word is synthesized: mid-air, by one writer."""

    subject: str
    noise: NoiseConfig
    kinematics: KinematicsConfig = KinematicsConfig()
    mode: WritingMode = WritingMode.MID_AIR_3D


def _cell_rng(seed: int, n: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5EED, n, k]))


def _predict_letter(predictor, rec) -> str:
    p = _as_letter(predictor(rec))
    return p if p is not None else "?"


def _run_cell(predictor, lexicon: Lexicon, model, synth: WordSynth, words_per_cell: int, seed: int,
              n: int, k: int, decoder, keep: int):
    words = lexicon.of_length(n)
    if not words:
        raise ValueError(f"lexicon has no words of length {n}")
    rng = _cell_rng(seed, n, k)
    hits = 0
    samples = []
    for w_i in range(words_per_cell):
        word = words[int(rng.integers(len(words)))]
        positions = []
        for pos, ch in enumerate(word):
            obs = []
            for j in range(k):
                rec_seed = int(rng.integers(2 ** 62))
                rec = synth_recording(ch, synth.mode, synth.kinematics, synth.noise, rec_seed, subject=synth.subject,
                                      rec_id=f"word-{n}-{k}-{w_i}-{pos}-{j}")
                obs.append(_predict_letter(predictor, rec))
            positions.append(obs)
        guess = decoder(positions)
        hits += guess == word
        if len(samples) < keep:
            samples.append({"word": word, "observed": ["".join(p) for p in positions], "decoded": guess})
    return hits / words_per_cell, samples


def lexicon_decoder(lexicon: Lexicon, model: ConfusionModel) -> Callable[[list], str | None]:
    """Noisy-channel decoding of per-position observations.

    Unparseable slots ("?") are dropped and every position is cut to the
    smallest remaining count so all positions keep the same k. A position
    with nothing left makes the word undecodable (``None``).
    """

    def decode(positions):
        kept = [[o for o in p if o != "?"] for p in positions]
        k = min(len(p) for p in kept)
        if k == 0:
            return None
        try:
            obs = PositionObservations(tuple(tuple(p[:k]) for p in kept))
            return decode_word(obs, lexicon, model, 1)[0].word
        except NoWordFound:
            return None

    return decode


def run_word_grid(predictor: Predictor, lexicon: Lexicon, model: ConfusionModel, synth: WordSynth,
                  words_per_cell: int = 50, ks: Sequence[int] = KS, lengths: Sequence[int] = LENGTHS,
                  seed: int = 0, jobs: int = 1, decoder: Callable | None = None,
                  keep_samples: int = 3) -> WordGridResult:
    """Word match accuracy for every ``(length, k)`` cell.

    Each cell samples ``words_per_cell`` lexicon words (with replacement)
    from its own seeded stream, synthesizes ``k`` drawings per letter,
    predicts each drawing, and decodes the word. ``decoder`` receives the
    per-position observed letters; the default is noisy-channel decoding
    against ``lexicon`` under ``model``.
    """
    if words_per_cell < 1:
        raise ValueError("words_per_cell must be >= 1")
    for n in lengths:
        if not lexicon.of_length(n):
            raise ValueError(f"lexicon has no words of length {n}")
    decoder = decoder or lexicon_decoder(lexicon, model)
    cells = [(n, k) for n in lengths for k in ks]

    def work(cell):
        return _run_cell(predictor, lexicon, model, synth, words_per_cell, seed, *cell, decoder, keep_samples)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]
    return WordGridResult({c: r[0] for c, r in zip(cells, results)}, words_per_cell, seed,
                          {c: r[1] for c, r in zip(cells, results)})


def letter_table(results: dict[str, LetterEval]) -> str:
    rows = ["mode | accuracy | macro_f1 |    n", "-----+----------+----------+-----"]
    for mode, ev in results.items():
        m = ev.metrics
        rows.append(f"{mode:>4} | {m.accuracy:8.4f} | {m.macro_f1:8.4f} | {m.n:4d}")
    return "\n".join(rows) + "\n"


def emit_report(results, path: "str | os.PathLike", config: dict | None = None) -> tuple[Path, Path]:
    """Write ``results`` as JSON at ``path`` and a plain-text table beside it (``.txt``).

    ``results`` is a :class:`WordGridResult` or a per-mode letter-eval dict.
    Returns both paths.
    """
    path = Path(path)
    if isinstance(results, WordGridResult):
        body = {"kind": "word_grid", "grid": results.to_dict(), "overall_len_le_5": results.mean_for_lengths(5)}
        text = results.table()
    else:
        body = {"kind": "letter_eval", "modes": {m: ev.to_dict() for m, ev in results.items()}}
        text = letter_table(results)
    body["config"] = config or {}
    txt = path.with_suffix(".txt")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        txt.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror or exc}") from exc
    return path, txt
