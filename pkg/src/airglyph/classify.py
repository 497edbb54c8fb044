"""Letter classifiers: DTW nearest neighbours, a small CNN, and the 3D pipeline.

The 3D pipeline embeds a mid-air query, retrieves the closest flat-surface
gallery entry and classifies that entry's window with the CNN. When the two
letters disagree the gallery letter is returned.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import dtw as _dtw
from .core import LETTERS, Dataset, DatasetError, Recording, index_letter, letter_index
from .metricmap import MapperBundle, retrieve
from .nn import AdamState, Network, adam_step, encoder_spec, softmax, softmax_cross_entropy
from .preprocess import DEFAULT_LEN, Window, prepare, prepare_many


class Source(str, Enum):
    DTW_KNN = "dtw_knn"
    CNN = "cnn"
    GALLERY = "gallery_retrieval"
    LLM = "llm"


@dataclass(frozen=True)
class LetterPrediction:
    letter: str
    score: float
    source: Source

    def __post_init__(self):
        letter_index(self.letter)
        if not math.isfinite(self.score) or self.score < 0:
            raise ValueError(f"score must be finite and >= 0, got {self.score}")
        object.__setattr__(self, "source", Source(self.source))


@dataclass(eq=False)
class ConfusionMatrix:
    """Counts with rows = truth, columns = prediction.

    ``no_letter[i]`` counts unparseable predictions for true letter ``i``;
    they are wrong answers that have no column of their own.
    """

    counts: np.ndarray = field(default_factory=lambda: np.zeros((26, 26), dtype=np.int64))
    no_letter: np.ndarray = field(default_factory=lambda: np.zeros(26, dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.no_letter = np.asarray(self.no_letter, dtype=np.int64)
        if self.counts.shape != (26, 26) or self.no_letter.shape != (26,):
            raise ValueError("confusion matrix must be 26x26 with a 26-entry overflow column")
        if np.any(self.counts < 0) or np.any(self.no_letter < 0):
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.no_letter.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1) + self.no_letter

    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts)) / self.total

    def to_dict(self) -> dict:
        return {"labels": list(LETTERS), "counts": self.counts.tolist(), "no_letter": self.no_letter.tolist()}


def dtw_distance(a: "Window | np.ndarray", b: "Window | np.ndarray", band: int | None = None) -> float:
    """DTW alignment cost between two 3-channel windows (see :mod:`airglyph.dtw`)."""
    va = getattr(a, "values", a)
    vb = getattr(b, "values", b)
    if np.ndim(va) != 2 or np.shape(va)[-1] != 3 or np.ndim(vb) != 2 or np.shape(vb)[-1] != 3:
        raise ValueError("dtw_distance expects 3-channel (T, 3) windows")
    return _dtw.dtw_distance(va, vb, band)


def knn_dtw_classify(query: "Window | np.ndarray", train: Sequence[tuple], k: int = 1,
                     band: int | None = None) -> LetterPrediction:
    """Majority letter among the ``k`` DTW-nearest training windows.

    Candidates at equal distance are ordered by letter, so the result does not
    depend on the order of ``train``. Vote ties go to the smaller mean
    distance, then to the alphabetically first letter.
    """
    if not train:
        raise ValueError("empty training set")
    if k < 1 or k % 2 == 0:
        raise ValueError("k must be an odd positive integer")
    if k > len(train):
        raise ValueError(f"k={k} exceeds training set size {len(train)}")
    windows = [getattr(w, "values", w) for w, _ in train]
    labels = [lab for _, lab in train]
    dists = _dtw.dtw_one_to_many(getattr(query, "values", query), windows, band)
    order = sorted(range(len(train)), key=lambda i: (dists[i], labels[i]))[:k]
    by_letter: dict[str, list[float]] = {}
    for i in order:
        by_letter.setdefault(labels[i], []).append(float(dists[i]))
    winner = min(by_letter, key=lambda L: (-len(by_letter[L]), math.fsum(by_letter[L]) / len(by_letter[L]), L))
    return LetterPrediction(winner, len(by_letter[winner]) / k, Source.DTW_KNN)


class DtwKnnClassifier:
    """DTW k-NN over the standard preprocessed windows of a training set."""

    def __init__(self, train: Dataset, k: int = 1, band: int | None = None, target_len: int = DEFAULT_LEN):
        if len(train) == 0:
            raise ValueError("empty training set")
        self.k, self.band, self.target_len = k, band, target_len
        recs = list(train.recordings)
        self._train = list(zip(prepare_many(recs, target_len), [r.letter for r in recs]))

    def predict_window(self, window) -> LetterPrediction:
        return knn_dtw_classify(window, self._train, self.k, self.band)

    def __call__(self, rec: Recording) -> LetterPrediction:
        return self.predict_window(prepare(rec, self.target_len))


# -- CNN classifier ----------------------------------------------------------

@dataclass(frozen=True)
class CnnConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    target_len: int = DEFAULT_LEN
    head: str = "flatten"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CnnClassifier:
    net: Network
    history: list[float] = field(default_factory=list)

    @property
    def target_len(self) -> int:
        return self.net.spec.input_shape[0]

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        """Class probabilities, ``(26,)`` for one window or ``(B, 26)`` for a batch."""
        return softmax(self.net.predict(np.asarray(windows, dtype=np.float64)))

    def predict_window(self, window) -> LetterPrediction:
        p = self.predict_proba(getattr(window, "values", window))
        i = int(np.argmax(p))
        return LetterPrediction(index_letter(i), float(p[i]), Source.CNN)

    def __call__(self, rec: Recording) -> LetterPrediction:
        return self.predict_window(prepare(rec, self.target_len))


def train_cnn_classifier(train: Dataset, config: CnnConfig = CnnConfig(), log=None) -> CnnClassifier:
    """26-way softmax CNN trained with cross-entropy and Adam.

    ``history`` holds the mean training loss of each epoch.
    """
    missing = sorted(set(LETTERS) - train.letters)
    if missing:
        raise DatasetError(f"training set lacks letters: {''.join(missing)}")
    recs = list(train.recordings)
    x = prepare_many(recs, config.target_len)
    y = np.array([letter_index(r.letter) for r in recs])
    seeds = np.random.SeedSequence([config.seed, 26]).generate_state(2)
    net = Network(encoder_spec(26, config.target_len, head=config.head), int(seeds[0]))
    opt = AdamState(lr=config.lr)
    rng = np.random.default_rng(int(seeds[1]))
    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = perm[start:start + config.batch_size]
            logits, cache = net.forward(x[idx])
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            total += loss * len(idx)
            grads, _ = net.backward(cache, dlogits)
            adam_step(opt, net.params, grads)
        history.append(total / len(x))
        if log is not None:
            log(f"cnn epoch {epoch + 1}/{config.epochs} mean loss {history[-1]:.4f}")
    return CnnClassifier(net, history)


# -- composed 3D pipeline ----------------------------------------------------

def gallery_score(distance: float) -> float:
    return 1.0 / (1.0 + distance)


def predict_letter_3d(query: Recording, bundle: MapperBundle,
                      letter_model: CnnClassifier | None = None) -> LetterPrediction:
    """Retrieve the nearest flat-surface entry, then classify its window.

    Agreement returns the shared letter with the larger of the two scores
    (source ``CNN``); disagreement returns the gallery letter with score
    ``1 / (1 + distance)`` (source ``GALLERY``).
    """
    if letter_model is None:
        if bundle.letter_model is None:
            raise ValueError("no letter model given and none stored in the bundle")
        letter_model = CnnClassifier(bundle.letter_model)
    hit = retrieve(bundle.encoder3d, query, bundle.gallery)
    g = gallery_score(hit.distance)
    if bundle.gallery.windows is None:
        raise ValueError("gallery was built without windows; rebuild it with build_gallery")
    cnn = letter_model.predict_window(bundle.gallery.windows[hit.index])
    if cnn.letter == hit.letter:
        return LetterPrediction(hit.letter, max(cnn.score, g), Source.CNN)
    return LetterPrediction(hit.letter, g, Source.GALLERY)


class Pipeline3D:
    """Callable wrapper so the harness can treat the pipeline like any predictor."""

    def __init__(self, bundle: MapperBundle, letter_model: CnnClassifier | None = None):
        self.bundle = bundle
        self.letter_model = letter_model or (CnnClassifier(bundle.letter_model) if bundle.letter_model else None)

    def __call__(self, rec: Recording) -> LetterPrediction:
        return predict_letter_3d(rec, self.bundle, self.letter_model)


def classify_many(predictor: Callable[[Recording], LetterPrediction], recordings: Sequence[Recording],
                  jobs: int = 1) -> list[LetterPrediction]:
    """Apply ``predictor`` to each recording; results keep input order."""
    if jobs <= 1 or len(recordings) < 2:
        return [predictor(r) for r in recordings]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(predictor, recordings))
