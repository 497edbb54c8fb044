"""Windowing, normalization, pseudo-text rendering and trajectory reconstruction."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .core import Recording

DEFAULT_LEN = 128
HEADER = "t,ax,ay,az"


class PseudoTextError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Window:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ValueError(f"window must be a non-empty (T, 3) array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("window values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


def resample(recording: Recording, target_len: int = DEFAULT_LEN) -> Window:
    """Linear interpolation onto ``target_len`` evenly spaced instants."""
    if target_len < 2:
        raise ValueError("target_len must be >= 2")
    x = recording.samples
    n = len(x)
    if n < 2:
        raise ValueError(f"recording {recording.id} has fewer than 2 samples")
    if n == target_len:
        return Window(x.copy())
    src = np.linspace(0.0, 1.0, n)
    dst = np.linspace(0.0, 1.0, target_len)
    out = np.column_stack([np.interp(dst, src, x[:, j]) for j in range(3)])
    return Window(out)


def normalize(window: Window) -> Window:
    """Per-axis z-score; a constant axis becomes all zeros."""
    v = window.values
    mu = v.mean(axis=0)
    sd = v.std(axis=0)
    centered = v - mu
    scale = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, np.inf)
    return Window(centered / scale, normalized=True)


def prepare(recording: Recording, target_len: int = DEFAULT_LEN) -> np.ndarray:
    """The standard model input: resample then normalize, as a ``(T, 3)`` array."""
    return normalize(resample(recording, target_len)).values


def prepare_many(recordings, target_len: int = DEFAULT_LEN) -> np.ndarray:
    return np.stack([prepare(r, target_len) for r in recordings]) if recordings else np.zeros((0, target_len, 3))


def _fmt(v: float, decimals: int) -> str:
    s = f"{v:.{decimals}f}"
    if s.startswith("-") and not s.strip("-0."):
        s = s[1:]
    return s


def serialize_pseudo_text(window: "Window | np.ndarray", decimals: int = 3) -> str:
    values = window.values if isinstance(window, Window) else np.asarray(window, float)
    if decimals < 0:
        raise ValueError("decimals must be >= 0")
    lines = [HEADER]
    for i, (ax, ay, az) in enumerate(values):
        lines.append(f"{i},{_fmt(ax, decimals)},{_fmt(ay, decimals)},{_fmt(az, decimals)}")
    return "\n".join(lines) + "\n"


_NUM = r"-?\d+(?:\.\d+)?"
_ROW = re.compile(rf"^(\d+),({_NUM}),({_NUM}),({_NUM})$")


def parse_pseudo_text(text: str) -> Window:
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise PseudoTextError(f"line 1: expected header {HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        m = _ROW.match(line.strip())
        if m is None:
            raise PseudoTextError(f"line {lineno}: malformed row {line!r}")
        if int(m.group(1)) != len(rows):
            raise PseudoTextError(f"line {lineno}: expected index {len(rows)}, got {m.group(1)}")
        rows.append([float(m.group(k)) for k in (2, 3, 4)])
    if not rows:
        raise PseudoTextError("no data rows after header")
    return Window(np.array(rows))


def integrate(recording: Recording) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoidal double integration from rest at the origin.

    Returns ``(velocity, position)``, each ``(T, 3)``, before any detrending.
    """
    a = recording.samples
    dt = 1.0 / recording.rate_hz
    v = np.zeros_like(a)
    v[1:] = np.cumsum((a[1:] + a[:-1]) * (dt / 2.0), axis=0)
    p = np.zeros_like(a)
    p[1:] = np.cumsum((v[1:] + v[:-1]) * (dt / 2.0), axis=0)
    return v, p


def reconstruct_trajectory(recording: Recording) -> np.ndarray:
    """Position trace (one point per sample) recovered by double integration.

    The writer is assumed at rest at both ends, so the velocity is detrended
    linearly to end at zero before the second integration. This cancels any
    constant acceleration bias without touching a zero-noise signal.
    """
    a = recording.samples
    dt = 1.0 / recording.rate_hz
    v, _ = integrate(recording)
    n = len(a)
    if n > 1:
        ramp = np.linspace(0.0, 1.0, n)[:, None]
        v = v - ramp * v[-1]
    p = np.zeros_like(a)
    p[1:] = np.cumsum((v[1:] + v[:-1]) * (dt / 2.0), axis=0)
    return p
