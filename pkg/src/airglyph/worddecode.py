"""Lexicon-constrained decoding of words from repeated per-letter predictions.

Each word position carries ``k`` observed letters. A lexicon word is scored by
the log-likelihood of all observations under a confusion model
``P(observed | true)``; the prior over lexicon words is uniform.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .core import letter_index

MIN_LEN, MAX_LEN = 3, 6


class NoWordFound(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    words: frozenset
    min_len: int = MIN_LEN
    max_len: int = MAX_LEN

    def __post_init__(self):
        words = frozenset(w.strip().upper() for w in self.words)
        for w in words:
            if not w.isascii() or not w.isalpha():
                raise ValueError(f"lexicon word {w!r} must contain only letters A-Z")
            if not self.min_len <= len(w) <= self.max_len:
                raise ValueError(f"lexicon word {w!r} outside length bounds {self.min_len}-{self.max_len}")
        object.__setattr__(self, "words", words)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word) -> bool:
        return word in self.words

    def of_length(self, n: int) -> list[str]:
        return sorted(w for w in self.words if len(w) == n)


def load_lexicon(path: "str | os.PathLike | None" = None, min_len: int = MIN_LEN, max_len: int = MAX_LEN) -> Lexicon:
    """Read one word per line; with no path, the bundled 1,500-noun list."""
    if path is None:
        text = resources.files("airglyph").joinpath("data/nouns.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = [line.strip() for line in text.splitlines() if line.strip()]
    return Lexicon(frozenset(words), min_len, max_len)


@dataclass(frozen=True)
class PositionObservations:
    positions: tuple

    def __post_init__(self):
        pos = tuple(tuple(str(o).upper() for o in p) for p in self.positions)
        if not pos:
            raise ValueError("need at least one position")
        ks = {len(p) for p in pos}
        if len(ks) != 1 or 0 in ks:
            raise ValueError("every position needs the same k >= 1 observations")
        for p in pos:
            for o in p:
                letter_index(o)
        object.__setattr__(self, "positions", pos)

    @property
    def k(self) -> int:
        return len(self.positions[0])

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class ConfusionModel:
    """Row-stochastic ``P(observed | true)``; rows are true letters."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.shape != (26, 26) or np.any(p <= 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("confusion model must be a 26x26 row-stochastic matrix with positive entries")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        logs = tuple(tuple(math.log(v) for v in row) for row in p.tolist())
        object.__setattr__(self, "_log", logs)

    def log_prob(self, observed: str, true: str) -> float:
        return self._log[letter_index(true)][letter_index(observed)]

    @classmethod
    def diagonal(cls, p_correct: float) -> "ConfusionModel":
        """Probability ``p_correct`` on the diagonal, the rest spread evenly."""
        off = (1.0 - p_correct) / 25.0
        m = np.full((26, 26), off)
        np.fill_diagonal(m, p_correct)
        return cls(m)


def fit_confusion_model(matrix, alpha: float = 1.0) -> ConfusionModel:
    """Laplace-smoothed rows: ``(counts + alpha) / (row_sum + 26 * alpha)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    counts = np.asarray(getattr(matrix, "counts", matrix), dtype=np.float64)
    if counts.shape != (26, 26) or np.any(counts < 0):
        raise ValueError("expected a 26x26 non-negative count matrix")
    return ConfusionModel((counts + alpha) / (counts.sum(axis=1, keepdims=True) + 26 * alpha))


def score_word(word: str, obs: PositionObservations, model: ConfusionModel) -> float:
    """Sum over positions and observations of ``log P(observed | word[pos])``."""
    word = word.upper()
    if len(word) != len(obs):
        raise ValueError(f"word {word!r} has {len(word)} letters but there are {len(obs)} positions")
    rows = [model._log[letter_index(ch)] for ch in word]
    cols = [[letter_index(o) for o in p] for p in obs.positions]
    return math.fsum(row[c] for row, cs in zip(rows, cols) for c in cs)


@dataclass(frozen=True)
class WordHypothesis:
    word: str
    log_score: float


def decode_word(obs: PositionObservations, lexicon: Lexicon, model: ConfusionModel,
                top_n: int = 5) -> list[WordHypothesis]:
    """Best ``top_n`` lexicon words of matching length, highest score first
    (ties alphabetical). Exhaustive over the lexicon."""
    candidates = lexicon.of_length(len(obs))
    if not candidates:
        raise NoWordFound(f"lexicon has no words of length {len(obs)}")
    cols = [[letter_index(o) for o in p] for p in obs.positions]
    logs = model._log
    scored = []
    for w in candidates:
        s = math.fsum(logs[ord(ch) - 65][c] for ch, cs in zip(w, cols) for c in cs)
        scored.append((-s, w))
    scored.sort()
    return [WordHypothesis(w, -neg) for neg, w in scored[:top_n]]


def aggregation_prompt(obs: PositionObservations) -> list:
    from .llm import ChatMessage

    lines = [f"Position {i + 1}: {', '.join(p)}" for i, p in enumerate(obs.positions)]
    system = (
        "You reconstruct English words from noisy handwriting recognition. Each letter of a word was written "
        f"{obs.k} times and each attempt was recognized separately, so some recognized letters are wrong. "
        "Use the repeated attempts and your knowledge of common English nouns to infer the intended word. "
        "End your reply with 'Final answer: <WORD>'."
    )
    user = f"The word has {len(obs)} letters. Recognized letters per position:\n" + "\n".join(lines)
    return [ChatMessage("system", system), ChatMessage("user", user)]


_FINAL = re.compile(r"final answer\s*[:\-]?\s*[*\"'`]*([A-Za-z]+)", re.IGNORECASE)
_WORD = re.compile(r"[A-Za-z]+")


def parse_word_response(text: str) -> str:
    """The word after the last 'Final answer:' marker, else the last word of the reply."""
    if not text or not text.strip():
        raise NoWordFound("empty response")
    marked = _FINAL.findall(text)
    if marked:
        return marked[-1].upper()
    tokens = _WORD.findall(text)
    if not tokens:
        raise NoWordFound(f"no word in response {text[:80]!r}")
    return tokens[-1].upper()


def llm_decode_word(client, obs: PositionObservations, temperature: float = 0.0, max_tokens: int = 256,
                    seed: int | None = None) -> WordHypothesis:
    """Ask a chat model to aggregate the observations; no lexicon constraint."""
    reply = client.complete(aggregation_prompt(obs), temperature=temperature, max_tokens=max_tokens, seed=seed)
    return WordHypothesis(parse_word_response(reply), 0.0)


def majority_string(obs: PositionObservations) -> str:
    """Per-position plurality letter (ties alphabetical); a lexicon-free baseline."""
    out = []
    for p in obs.positions:
        counts = {}
        for o in p:
            counts[o] = counts.get(o, 0) + 1
        out.append(min(counts, key=lambda c: (-counts[c], c)))
    return "".join(out)

