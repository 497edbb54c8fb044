"""Data model for letter-writing IMU recordings and their on-disk format.

A dataset file is UTF-8 JSON lines. An optional first line
``{"provenance": "..."}`` carries the dataset provenance; every other line is
one recording::

    {"id": "S1-2D-A-00", "subject": "S1", "mode": "2D", "letter": "A",
     "rate_hz": 100.0, "samples": [[ax, ay, az], ...]}
"""

from __future__ import annotations

import enum
import json
import math
import os
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

LETTERS = string.ascii_uppercase
STORAGE_DECIMALS = 6


class DatasetError(ValueError):
    """Raised when a dataset file or object violates the schema."""


class WritingMode(str, enum.Enum):
    FLAT_2D = "2D"
    MID_AIR_3D = "3D"

    @classmethod
    def parse(cls, value: "str | WritingMode") -> "WritingMode":
        if isinstance(value, WritingMode):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise DatasetError(f"unknown writing mode {value!r}; expected '2D' or '3D'") from None


def letter_index(letter: str) -> int:
    """Ordinal of an uppercase letter, ``A`` -> 0 ... ``Z`` -> 25."""
    if not isinstance(letter, str) or len(letter) != 1 or letter not in LETTERS:
        raise DatasetError(f"invalid letter label {letter!r}")
    return ord(letter) - ord("A")


def index_letter(i: int) -> str:
    if not 0 <= i < 26:
        raise DatasetError(f"letter ordinal out of range: {i}")
    return LETTERS[i]


@dataclass(frozen=True, eq=False)
class Recording:
    """One capture of a single written letter.

    ``samples`` is a ``(T, 3)`` float array of device-frame linear
    acceleration in m/s^2. The array is made read-only on construction.
    """

    id: str
    subject: str
    mode: WritingMode
    letter: str
    rate_hz: float
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mode", WritingMode.parse(self.mode))
        letter_index(self.letter)
        if not isinstance(self.id, str) or not self.id:
            raise DatasetError("recording id must be a non-empty string")
        if not isinstance(self.subject, str) or not self.subject:
            raise DatasetError(f"recording {self.id}: subject must be a non-empty string")
        rate = float(self.rate_hz)
        if not math.isfinite(rate) or rate <= 0:
            raise DatasetError(f"recording {self.id}: rate_hz must be > 0, got {self.rate_hz}")
        object.__setattr__(self, "rate_hz", rate)
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != 3:
            raise DatasetError(
                f"recording {self.id}: samples must be a non-empty list of 3-vectors, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DatasetError(f"recording {self.id}: samples contain non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def duration_s(self) -> float:
        return (len(self.samples) - 1) / self.rate_hz

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.id == other.id
            and self.subject == other.subject
            and self.mode == other.mode
            and self.letter == other.letter
            and self.rate_hz == other.rate_hz
            and self.samples.shape == other.samples.shape
            and bool(np.array_equal(self.samples, other.samples))
        )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "subject": self.subject,
            "mode": self.mode.value,
            "letter": self.letter,
            "rate_hz": self.rate_hz,
            "samples": [[_storage_float(v) for v in row] for row in self.samples],
        }


def _storage_float(v: float) -> float:
    # round, then add 0.0 to drop negative zero
    return round(float(v), STORAGE_DECIMALS) + 0.0


@dataclass(frozen=True)
class Dataset:
    recordings: tuple[Recording, ...]
    provenance: str = ""

    def __post_init__(self):
        recs = tuple(self.recordings)
        seen = set()
        for r in recs:
            if r.id in seen:
                raise DatasetError(f"duplicate recording id {r.id!r}")
            seen.add(r.id)
        object.__setattr__(self, "recordings", recs)

    def __len__(self) -> int:
        return len(self.recordings)

    def __iter__(self):
        return iter(self.recordings)

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self.recordings})

    @property
    def letters(self) -> set[str]:
        return {r.letter for r in self.recordings}

    def filter(self, *, subject: str | None = None, mode: "WritingMode | str | None" = None) -> "Dataset":
        m = WritingMode.parse(mode) if mode is not None else None
        recs = [
            r for r in self.recordings
            if (subject is None or r.subject == subject) and (m is None or r.mode == m)
        ]
        return Dataset(tuple(recs), self.provenance)


@dataclass(frozen=True)
class SplitSpec:
    train_subject: str
    test_subject: str

    def __post_init__(self):
        if self.train_subject == self.test_subject:
            raise DatasetError("train and test subject must differ")


def split_by_subject(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Subject-disjoint train/test split."""
    present = set(dataset.subjects)
    for s in (spec.train_subject, spec.test_subject):
        if s not in present:
            raise DatasetError(f"unknown subject {s!r}; dataset has {sorted(present)}")
    return dataset.filter(subject=spec.train_subject), dataset.filter(subject=spec.test_subject)


def _record_from_obj(obj: object, index: int) -> Recording:
    if not isinstance(obj, dict):
        raise DatasetError(f"record {index}: expected an object")
    for key in ("id", "subject", "mode", "letter", "rate_hz", "samples"):
        if key not in obj:
            raise DatasetError(f"record {index}: missing field {key!r}")
    samples = obj["samples"]
    if not isinstance(samples, list) or not samples:
        raise DatasetError(f"record {index}: field 'samples' must be a non-empty array")
    for j, row in enumerate(samples):
        if not isinstance(row, list) or len(row) != 3:
            raise DatasetError(f"record {index}: field 'samples'[{j}] must have exactly 3 components")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
            raise DatasetError(f"record {index}: field 'samples'[{j}] must be numbers")
    if not isinstance(obj["rate_hz"], (int, float)) or isinstance(obj["rate_hz"], bool):
        raise DatasetError(f"record {index}: field 'rate_hz' must be a number")
    for key in ("id", "subject", "letter", "mode"):
        if not isinstance(obj[key], str):
            raise DatasetError(f"record {index}: field {key!r} must be a string")
    try:
        return Recording(
            id=obj["id"],
            subject=obj["subject"],
            mode=obj["mode"],
            letter=obj["letter"],
            rate_hz=obj["rate_hz"],
            samples=samples,
        )
    except DatasetError as exc:
        raise DatasetError(f"record {index}: {exc}") from None


def load_dataset(path: "str | os.PathLike") -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    provenance = ""
    recordings: list[Recording] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        index = 0
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if lineno == 1 and isinstance(obj, dict) and set(obj) == {"provenance"}:
                provenance = str(obj["provenance"])
                continue
            rec = _record_from_obj(obj, index)
            if rec.id in seen:
                raise DatasetError(f"record {index}: duplicate recording id {rec.id!r}")
            seen.add(rec.id)
            recordings.append(rec)
            index += 1
    return Dataset(tuple(recordings), provenance)


def dumps_dataset(dataset: Dataset) -> str:
    lines = []
    if dataset.provenance:
        lines.append(json.dumps({"provenance": dataset.provenance}, sort_keys=True))
    lines.extend(json.dumps(r.to_record(), separators=(",", ":")) for r in dataset.recordings)
    return "".join(line + "\n" for line in lines)


def save_dataset(dataset: Dataset, path: "str | os.PathLike") -> None:
    path = Path(path)
    text = dumps_dataset(dataset)
    try:
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror or exc}") from exc


def quantized(dataset: Dataset) -> Dataset:
    """The dataset exactly as it would read back from disk."""
    recs = []
    for r in dataset.recordings:
        samples = [[_storage_float(v) for v in row] for row in r.samples]
        recs.append(Recording(r.id, r.subject, r.mode, r.letter, r.rate_hz, samples))
    return Dataset(tuple(recs), dataset.provenance)


def concat(datasets: Iterable[Dataset], provenance: str = "") -> Dataset:
    recs: list[Recording] = []
    for d in datasets:
        recs.extend(d.recordings)
    return Dataset(tuple(recs), provenance)
