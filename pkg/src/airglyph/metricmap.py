"""Triplet-trained mapping from mid-air (3D) gestures to flat-surface (2D) ones.

Two encoders share an embedding space: ``encoder3d`` embeds mid-air anchors,
``encoder2d`` embeds flat-surface positives (same letter) and negatives
(different letter). After training, a 3D query is embedded and matched to the
nearest entry of a gallery of embedded flat-surface recordings.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .core import Dataset, DatasetError, Recording, WritingMode
from .nn import AdamState, GradCheckResult, Network, activation_pattern, adam_step, check_gradients, encoder_spec
from .preprocess import DEFAULT_LEN, prepare, prepare_many


class Mining(str, Enum):
    RANDOM = "random"
    SEMI_HARD = "semihard"


@dataclass(frozen=True)
class MapperConfig:
    margin: float = 1.0
    epochs: int = 40
    batch_size: int = 32
    triplets_per_epoch: int = 1024
    lr: float = 1e-3
    seed: int = 0
    mining: Mining = Mining.SEMI_HARD
    embed_dim: int = 32
    target_len: int = DEFAULT_LEN
    encoder_head: str = "flatten"

    def __post_init__(self):
        object.__setattr__(self, "mining", Mining(self.mining))
        if self.encoder_head not in ("flatten", "gap"):
            raise ValueError(f"encoder_head must be 'flatten' or 'gap', got {self.encoder_head!r}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.triplets_per_epoch < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and triplets_per_epoch >= 1 required")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mining"] = self.mining.value
        return d


def euclidean(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape:
        raise ValueError(f"embedding dimension mismatch: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.sum((x - y) ** 2)))


def triplet_loss(g_a, g_p, g_n, margin: float) -> float:
    """``max(D(a, p) + margin - D(a, n), 0)`` with Euclidean ``D``."""
    return max(euclidean(g_a, g_p) + margin - euclidean(g_a, g_n), 0.0)


def triplet_loss_batch(A: np.ndarray, P: np.ndarray, N: np.ndarray, margin: float):
    """Mean triplet loss over a batch and its gradients w.r.t. each embedding.

    The hinge and a zero distance both take the zero sub-gradient.
    Returns ``(loss, dA, dP, dN, active)``.
    """
    dp_vec = A - P
    dn_vec = A - N
    dp = np.sqrt(np.sum(dp_vec ** 2, axis=1))
    dn = np.sqrt(np.sum(dn_vec ** 2, axis=1))
    raw = dp + margin - dn
    active = raw > 0
    losses = np.where(active, raw, 0.0)
    b = A.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        up = np.where((dp > 0)[:, None], dp_vec / dp[:, None], 0.0)
        un = np.where((dn > 0)[:, None], dn_vec / dn[:, None], 0.0)
    w = active[:, None] / b
    dA = w * (up - un)
    dP = -w * up
    dN = w * un
    return float(losses.mean()), dA, dP, dN, active


def triplet_grad_check(encoder2d: Network, encoder3d: Network, xa: np.ndarray, xp: np.ndarray, xn: np.ndarray,
                       margin: float = 1.0, h: float = 1e-4, max_per_array: int | None = 128,
                       seed: int = 0, analytic_scale: float = 1.0) -> GradCheckResult:
    """Central-difference check of the batch triplet loss through both encoders.

    Coordinates whose perturbation flips a ReLU, a pooling winner or a
    triplet's hinge are skipped; the loss has no derivative there.
    ``analytic_scale`` multiplies the analytic gradients, for confirming
    that the check catches a wrong gradient.
    """
    b = len(xa)
    xpn = np.concatenate([xp, xn])

    def embed():
        return encoder3d.predict(xa), encoder2d.predict(xpn)

    def loss():
        A, PN = embed()
        return triplet_loss_batch(A, PN[:b], PN[b:], margin)[0]

    def pattern():
        A, PN = embed()
        active = triplet_loss_batch(A, PN[:b], PN[b:], margin)[4]
        return activation_pattern(encoder3d, xa) + activation_pattern(encoder2d, xpn) + active.tobytes()

    A, ca = encoder3d.forward(xa)
    PN, cpn = encoder2d.forward(xpn)
    _, dA, dP, dN, _ = triplet_loss_batch(A, PN[:b], PN[b:], margin)
    g3, _ = encoder3d.backward(ca, dA)
    g2, _ = encoder2d.backward(cpn, np.concatenate([dP, dN]))
    arrays = [p[k] for net in (encoder3d, encoder2d) for p in net.params for k in sorted(p)]
    analytic = [g[k] * analytic_scale for grads in (g3, g2) for g in grads for k in sorted(g)]
    return check_gradients(loss, arrays, analytic, h, pattern, max_per_array, seed)


@dataclass(frozen=True, eq=False)
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_letter: str
    positive_letter: str
    negative_letter: str
    anchor_id: str = ""
    positive_id: str = ""
    negative_id: str = ""


class _Pool:
    """Preprocessed windows of a dataset, indexed by letter."""

    def __init__(self, dataset: Dataset, target_len: int):
        self.recordings = list(dataset.recordings)
        self.windows = prepare_many(self.recordings, target_len)
        self.letters = np.array([r.letter for r in self.recordings])
        self.ids = [r.id for r in self.recordings]
        self.by_letter = {L: np.flatnonzero(self.letters == L) for L in sorted(set(self.letters.tolist()))}


def _check_coverage(pool2d: _Pool, pool3d: _Pool):
    missing = sorted(set(pool3d.by_letter) - set(pool2d.by_letter))
    if missing:
        raise DatasetError(f"letters present in 3D data but absent from 2D data: {', '.join(missing)}")
    if len(pool2d.by_letter) < 2:
        raise DatasetError("2D data must cover at least two letters to form negatives")


def _sample_indices(pool2d: _Pool, pool3d: _Pool, n: int, rng: np.random.Generator, strategy: Mining,
                    emb2d: np.ndarray | None = None, emb3d: np.ndarray | None = None, margin: float = 1.0):
    anchors = rng.integers(0, len(pool3d.recordings), size=n)
    pos = np.empty(n, dtype=int)
    neg = np.empty(n, dtype=int)
    all2d = np.arange(len(pool2d.recordings))
    use_semi = strategy is Mining.SEMI_HARD and emb2d is not None and emb3d is not None
    for t, a in enumerate(anchors):
        letter = pool3d.letters[a]
        same = pool2d.by_letter[letter]
        pos[t] = same[rng.integers(0, len(same))]
        others = all2d[pool2d.letters != letter]
        choice = None
        if use_semi:
            d_ap = np.sqrt(np.sum((emb3d[a] - emb2d[pos[t]]) ** 2))
            d_an = np.sqrt(np.sum((emb3d[a][None] - emb2d[others]) ** 2, axis=1))
            semi = others[(d_an > d_ap) & (d_an < d_ap + margin)]
            if len(semi):
                choice = semi[rng.integers(0, len(semi))]
        if choice is None:
            choice = others[rng.integers(0, len(others))]
        neg[t] = choice
    return anchors, pos, neg


def mine_triplets(train2d: Dataset, train3d: Dataset, n: int, strategy: Mining = Mining.RANDOM, seed: int = 0,
                  encoders: tuple[Network, Network] | None = None, margin: float = 1.0,
                  target_len: int = DEFAULT_LEN) -> list[Triplet]:
    """Sample ``n`` (3D anchor, 2D positive, 2D negative) triplets.

    Semi-hard mining needs ``encoders=(encoder2d, encoder3d)``; without them
    it degrades to random sampling.
    """
    strategy = Mining(strategy)
    p2, p3 = _Pool(train2d, target_len), _Pool(train3d, target_len)
    _check_coverage(p2, p3)
    emb2d = emb3d = None
    if encoders is not None:
        emb2d = encoders[0].predict(p2.windows)
        emb3d = encoders[1].predict(p3.windows)
    rng = np.random.default_rng(seed)
    a, p, ng = _sample_indices(p2, p3, n, rng, strategy, emb2d, emb3d, margin)
    return [
        Triplet(p3.windows[i], p2.windows[j], p2.windows[k], str(p3.letters[i]), str(p2.letters[j]),
                str(p2.letters[k]), p3.ids[i], p2.ids[j], p2.ids[k])
        for i, j, k in zip(a, p, ng)
    ]


@dataclass
class MapperResult:
    encoder2d: Network
    encoder3d: Network
    history: list[float]
    config: MapperConfig


def init_encoders(config: MapperConfig) -> tuple[Network, Network]:
    spec = encoder_spec(config.embed_dim, config.target_len, head=config.encoder_head)
    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    return Network(spec, int(seeds[0])), Network(spec, int(seeds[1]))


def train_mapper(train2d: Dataset, train3d: Dataset, config: MapperConfig = MapperConfig(),
                 log=None) -> MapperResult:
    for r in train2d:
        if r.mode is not WritingMode.FLAT_2D:
            raise DatasetError(f"train2d contains non-2D recording {r.id}")
    for r in train3d:
        if r.mode is not WritingMode.MID_AIR_3D:
            raise DatasetError(f"train3d contains non-3D recording {r.id}")
    p2, p3 = _Pool(train2d, config.target_len), _Pool(train3d, config.target_len)
    _check_coverage(p2, p3)
    enc2d, enc3d = init_encoders(config)
    opt2d, opt3d = AdamState(lr=config.lr), AdamState(lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    history: list[float] = []
    for epoch in range(config.epochs):
        emb2d = emb3d = None
        strategy = config.mining if epoch > 0 else Mining.RANDOM
        if strategy is Mining.SEMI_HARD:
            emb2d, emb3d = enc2d.predict(p2.windows), enc3d.predict(p3.windows)
        a_idx, p_idx, n_idx = _sample_indices(p2, p3, config.triplets_per_epoch, rng, strategy, emb2d, emb3d,
                                              config.margin)
        total = 0.0
        for start in range(0, config.triplets_per_epoch, config.batch_size):
            sl = slice(start, start + config.batch_size)
            xa = p3.windows[a_idx[sl]]
            xpn = np.concatenate([p2.windows[p_idx[sl]], p2.windows[n_idx[sl]]])
            A, ca = enc3d.forward(xa)
            PN, cpn = enc2d.forward(xpn)
            b = len(xa)
            loss, dA, dP, dN, _ = triplet_loss_batch(A, PN[:b], PN[b:], config.margin)
            total += loss * b
            g3, _ = enc3d.backward(ca, dA)
            g2, _ = enc2d.backward(cpn, np.concatenate([dP, dN]))
            adam_step(opt3d, enc3d.params, g3)
            adam_step(opt2d, enc2d.params, g2)
        history.append(total / config.triplets_per_epoch)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} mean triplet loss {history[-1]:.4f}")
    return MapperResult(enc2d, enc3d, history, config)


@dataclass(eq=False)
class Gallery:
    embeddings: np.ndarray
    letters: list[str]
    recording_ids: list[str]
    fingerprint: str
    windows: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.embeddings) == 0:
            raise ValueError("gallery must hold at least one embedding")
        if not (len(self.letters) == len(self.recording_ids) == len(self.embeddings)):
            raise ValueError("gallery fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def to_dict(self) -> dict:
        d = {
            "fingerprint": self.fingerprint,
            "entries": [
                {"recording_id": rid, "letter": L, "embedding": e.tolist()}
                for rid, L, e in zip(self.recording_ids, self.letters, self.embeddings)
            ],
        }
        if self.windows is not None:
            d["windows"] = self.windows.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Gallery":
        entries = d["entries"]
        windows = np.array(d["windows"], dtype=np.float64) if "windows" in d else None
        return cls(np.array([e["embedding"] for e in entries], dtype=np.float64),
                   [e["letter"] for e in entries], [e["recording_id"] for e in entries],
                   d["fingerprint"], windows)


def build_gallery(encoder2d: Network, flat: Dataset, target_len: int = DEFAULT_LEN) -> Gallery:
    if len(flat) == 0:
        raise ValueError("cannot build a gallery from an empty dataset")
    for r in flat:
        if r.mode is not WritingMode.FLAT_2D:
            raise DatasetError(f"gallery recordings must be flat-surface (2D); {r.id} is {r.mode.value}")
    windows = prepare_many(list(flat.recordings), target_len)
    emb = encoder2d.predict(windows)
    return Gallery(emb, [r.letter for r in flat], [r.id for r in flat], encoder2d.fingerprint(), windows)


def nearest(gallery: Gallery, embedding: np.ndarray) -> tuple[int, float]:
    """Index and distance of the closest gallery entry (ties: lowest recording id)."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (gallery.dim,):
        raise ValueError(f"embedding dimension mismatch: {e.shape} vs ({gallery.dim},)")
    d = np.sqrt(np.sum((gallery.embeddings - e[None]) ** 2, axis=1))
    best = d.min()
    tied = np.flatnonzero(d == best)
    i = min(tied, key=lambda k: gallery.recording_ids[k])
    return int(i), float(best)


@dataclass(frozen=True)
class Retrieval:
    letter: str
    recording_id: str
    distance: float
    index: int


def _embed_query(encoder3d: Network, query: Recording, target_len: int) -> np.ndarray:
    if query.mode is not WritingMode.MID_AIR_3D:
        raise DatasetError(f"retrieval queries must be mid-air (3D); {query.id} is {query.mode.value}")
    return encoder3d.predict(prepare(query, target_len))


def retrieve(encoder3d: Network, query: Recording, gallery: Gallery) -> Retrieval:
    emb = _embed_query(encoder3d, query, encoder3d.spec.input_shape[0])
    i, d = nearest(gallery, emb)
    return Retrieval(gallery.letters[i], gallery.recording_ids[i], d, i)


def retrieve_many(encoder3d: Network, queries: list[Recording], gallery: Gallery) -> list[Retrieval]:
    if not queries:
        return []
    for q in queries:
        if q.mode is not WritingMode.MID_AIR_3D:
            raise DatasetError(f"retrieval queries must be mid-air (3D); {q.id} is {q.mode.value}")
    emb = encoder3d.predict(prepare_many(queries, encoder3d.spec.input_shape[0]))
    out = []
    for e in emb:
        i, d = nearest(gallery, e)
        out.append(Retrieval(gallery.letters[i], gallery.recording_ids[i], d, i))
    return out


def mapping_accuracy(encoder3d: Network, test3d: Dataset, gallery: Gallery) -> float:
    recs = list(test3d.recordings)
    if not recs:
        raise ValueError("empty test set")
    hits = sum(r.letter == q.letter for r, q in zip(retrieve_many(encoder3d, recs, gallery), recs))
    return hits / len(recs)


@dataclass
class MapperBundle:
    encoder2d: Network
    encoder3d: Network
    config: MapperConfig
    gallery: Gallery
    history: list[float] = field(default_factory=list)
    letter_model: Network | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "airglyph.mapper/1",
            "config": self.config.to_dict(),
            "encoder2d": self.encoder2d.to_checkpoint(),
            "encoder3d": self.encoder3d.to_checkpoint(),
            "gallery": self.gallery.to_dict(),
            "history": list(self.history),
            "letter_model": self.letter_model.to_checkpoint() if self.letter_model is not None else None,
            "meta": self.meta,
        }

    def save(self, path: "str | os.PathLike") -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: "str | os.PathLike") -> "MapperBundle":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.get("format") != "airglyph.mapper/1":
            raise ValueError(f"{path} is not a mapper bundle")
        enc2d = Network.from_checkpoint(d["encoder2d"])
        gallery = Gallery.from_dict(d["gallery"])
        if gallery.fingerprint != enc2d.fingerprint():
            raise ValueError("gallery fingerprint does not match the stored 2D encoder")
        lm = d.get("letter_model")
        return cls(enc2d, Network.from_checkpoint(d["encoder3d"]), MapperConfig(**d["config"]), gallery,
                   d.get("history", []), Network.from_checkpoint(lm) if lm else None, d.get("meta", {}))
