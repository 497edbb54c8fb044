"""Deterministic synthetic letter-writing accelerometer data.

Each letter is a small set of strokes in the unit square. A stroke is cut
into pieces at sharp corners; every piece is traversed along a cubic-spline
path with a minimum-jerk speed profile, so velocity and acceleration are zero
at every piece boundary and the acceleration signal is continuous. Pen-up
moves between strokes are straight, quicker pieces (the device never leaves
the hand, so they show up in the signal).

Flat-surface (2D) writing lives in the device x/y plane. Mid-air (3D) writing
happens on a roughly vertical plane: letter x maps to device x, letter y to
device z, then the plane is tilted by a random amount and wobbles along its
normal.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter1d

from .core import LETTERS, Dataset, Recording, WritingMode, letter_index

CORNER_DEG = 40.0
PENUP_SPEEDUP = 0.6
# piece duration grows as length ** DURATION_EXP
DURATION_EXP = 0.7
# length scale (unit square) over which straight runs blend into arcs
ROUNDING = 0.1
FLAT_SIZE_M = 0.08
AIR_SIZE_M = 0.20


def _arc(cx, cy, rx, ry, a0, a1, step=15.0):
    n = max(2, int(math.ceil(abs(a1 - a0) / step)) + 1)
    ang = np.radians(np.linspace(a0, a1, n))
    return [(cx + rx * math.cos(a), cy + ry * math.sin(a)) for a in ang]


def _build_templates() -> dict[str, list[list[tuple[float, float]]]]:
    upper_bowl = [(0.0, 1.0), (0.55, 1.0)] + _arc(0.55, 0.75, 0.25, 0.25, 90, -90)[1:-1] + [(0.55, 0.5), (0.0, 0.5)]
    lower_bowl = [(0.0, 0.5), (0.6, 0.5)] + _arc(0.6, 0.25, 0.25, 0.25, 90, -90)[1:-1] + [(0.6, 0.0), (0.0, 0.0)]
    ring = _arc(0.5, 0.5, 0.5, 0.5, 90, 450)
    t = {
        "A": [[(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)], [(0.22, 0.45), (0.78, 0.45)]],
        "B": [[(0.0, 1.0), (0.0, 0.0)], upper_bowl + lower_bowl[1:]],
        "C": [_arc(0.5, 0.5, 0.5, 0.5, 45, 315)],
        "D": [[(0.0, 1.0), (0.0, 0.0)],
              [(0.0, 1.0), (0.45, 1.0)] + _arc(0.45, 0.5, 0.55, 0.5, 90, -90)[1:-1] + [(0.45, 0.0), (0.0, 0.0)]],
        "E": [[(1.0, 1.0), (0.0, 1.0), (0.0, 0.0), (1.0, 0.0)], [(0.0, 0.5), (0.75, 0.5)]],
        "F": [[(1.0, 1.0), (0.0, 1.0), (0.0, 0.0)], [(0.0, 0.5), (0.75, 0.5)]],
        "G": [_arc(0.5, 0.5, 0.5, 0.5, 45, 360) + [(0.55, 0.5)]],
        "H": [[(0.0, 1.0), (0.0, 0.0)], [(1.0, 1.0), (1.0, 0.0)], [(0.0, 0.5), (1.0, 0.5)]],
        "I": [[(0.5, 1.0), (0.5, 0.0)], [(0.2, 1.0), (0.8, 1.0)], [(0.2, 0.0), (0.8, 0.0)]],
        "J": [[(0.8, 1.0), (0.8, 0.3)] + _arc(0.45, 0.3, 0.35, 0.3, 0, -180)[1:]],
        "K": [[(0.0, 1.0), (0.0, 0.0)], [(0.9, 1.0), (0.0, 0.45), (0.9, 0.0)]],
        "L": [[(0.0, 1.0), (0.0, 0.0)], [(0.0, 0.0), (1.0, 0.0)]],
        "M": [[(0.0, 0.0), (0.0, 1.0), (0.5, 0.35), (1.0, 1.0), (1.0, 0.0)]],
        "N": [[(0.0, 0.0), (0.0, 1.0), (0.9, 0.0), (0.9, 1.0)]],
        "O": [ring],
        "P": [[(0.0, 0.0), (0.0, 1.0)], upper_bowl],
        "Q": [ring, [(0.6, 0.3), (1.0, 0.0)]],
        "R": [[(0.0, 0.0), (0.0, 1.0)], upper_bowl, [(0.25, 0.5), (0.9, 0.0)]],
        "S": [_arc(0.5, 0.75, 0.4, 0.25, 20, 270) + _arc(0.5, 0.25, 0.4, 0.25, 90, -160)[1:]],
        "T": [[(0.0, 1.0), (1.0, 1.0)], [(0.5, 1.0), (0.5, 0.0)]],
        "U": [[(0.0, 1.0), (0.0, 0.4)] + _arc(0.5, 0.4, 0.5, 0.4, 180, 360)[1:] + [(1.0, 1.0)]],
        "V": [[(0.0, 1.0), (0.5, 0.0), (1.0, 1.0)]],
        "W": [[(0.0, 1.0), (0.25, 0.0), (0.5, 0.65), (0.75, 0.0), (1.0, 1.0)]],
        "X": [[(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)], [(1.0, 1.0), (0.5, 0.5), (0.0, 0.0)]],
        "Y": [[(0.0, 1.0), (0.5, 0.5), (1.0, 1.0)], [(0.5, 0.5), (0.5, 0.0)]],
        "Z": [[(0.0, 1.0), (1.0, 1.0), (0.0, 0.0), (1.0, 0.0)]],
    }
    cleaned = {}
    for letter, strokes in t.items():
        out = []
        for s in strokes:
            pts = [(min(1.0, max(0.0, round(x, 12) + 0.0)), min(1.0, max(0.0, round(y, 12) + 0.0))) for x, y in s]
            out.append(pts)
        cleaned[letter] = out
    return cleaned


_TEMPLATES = _build_templates()


@dataclass(frozen=True)
class LetterTemplate:
    letter: str
    strokes: tuple[tuple[tuple[float, float], ...], ...]

    def __post_init__(self):
        letter_index(self.letter)
        if not self.strokes:
            raise ValueError("template needs at least one stroke")
        for s in self.strokes:
            if len(s) < 2:
                raise ValueError("every stroke needs at least two points")
            for x, y in s:
                if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                    raise ValueError(f"template point ({x}, {y}) outside the unit square")

    @property
    def points(self) -> frozenset:
        return frozenset(p for s in self.strokes for p in s)


def template_for(letter: str) -> LetterTemplate:
    letter_index(letter)
    return LetterTemplate(letter, tuple(tuple(s) for s in _TEMPLATES[letter]))


class SpeedProfile(str, Enum):
    """Progress along each piece as a function of normalized time.

    ``MINIMUM_SNAP`` is the seventh-order rest-to-rest polynomial: velocity,
    acceleration and jerk all vanish at both ends, so sampled acceleration
    integrates back to the path accurately at 100 Hz. ``MINIMUM_JERK`` (the
    classic quintic) has a jerk step at every piece boundary.
    """

    MINIMUM_SNAP = "minimum_snap"
    MINIMUM_JERK = "minimum_jerk"
    CONSTANT = "constant"


@dataclass(frozen=True)
class KinematicsConfig:
    duration_s: float = 2.0
    rate_hz: float = 100.0
    profile: SpeedProfile = SpeedProfile.MINIMUM_SNAP

    def __post_init__(self):
        object.__setattr__(self, "profile", SpeedProfile(self.profile))
        if self.duration_s <= 0 or self.rate_hz <= 0:
            raise ValueError("duration_s and rate_hz must be positive")
        if self.n_samples < 16:
            raise ValueError("duration_s * rate_hz must give at least 16 samples")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.rate_hz))


@dataclass(frozen=True)
class NoiseConfig:
    """Per-subject variability.

    ``*_bias`` fields are fixed per subject; the matching ``*_jitter`` fields
    are drawn fresh for every recording.
    """

    accel_sigma: float = 0.0
    scale_jitter: float = 0.0
    rot_jitter_deg: float = 0.0
    tilt_deg: float = 0.0
    depth_wobble_amp: float = 0.0
    scale_bias: float = 1.0
    rot_bias_deg: float = 0.0
    aspect_jitter: float = 0.0
    aspect_bias: float = 1.0
    timing_jitter: float = 0.0
    stroke_order_jitter: float = 0.0
    gravity_offset: float = 0.0

    def __post_init__(self):
        for name in ("accel_sigma", "scale_jitter", "rot_jitter_deg", "tilt_deg", "depth_wobble_amp",
                     "aspect_jitter", "timing_jitter", "stroke_order_jitter", "gravity_offset"):
            if getattr(self, name) < 0:
                raise ValueError(f"NoiseConfig.{name} must be >= 0")
        if self.scale_bias <= 0 or self.aspect_bias <= 0:
            raise ValueError("scale_bias and aspect_bias must be positive")
        if self.scale_jitter >= 1 or self.aspect_jitter >= 1 or self.timing_jitter >= 1:
            raise ValueError("relative jitters must be < 1")


ZERO_NOISE = NoiseConfig()

# Two writers with different habits; used for S1, S2 (and cycled beyond).
SUBJECT_PROFILES = (
    NoiseConfig(accel_sigma=0.25, scale_jitter=0.15, rot_jitter_deg=8.0, tilt_deg=15.0, depth_wobble_amp=0.08,
                scale_bias=1.0, rot_bias_deg=4.0, aspect_jitter=0.1, aspect_bias=1.0, timing_jitter=0.15),
    NoiseConfig(accel_sigma=0.40, scale_jitter=0.15, rot_jitter_deg=8.0, tilt_deg=15.0, depth_wobble_amp=0.08,
                scale_bias=1.15, rot_bias_deg=-4.0, aspect_jitter=0.1, aspect_bias=0.9, timing_jitter=0.2,
                stroke_order_jitter=0.15),
)


def subject_noise(subject_index: int) -> NoiseConfig:
    return SUBJECT_PROFILES[subject_index % len(SUBJECT_PROFILES)]


def default_subjects(n: int) -> list[str]:
    return [f"S{i + 1}" for i in range(n)]


@dataclass(frozen=True)
class GenSpec:
    subjects: tuple[str, ...] = ("S1", "S2")
    reps_per_letter: int = 10
    modes: tuple[WritingMode, ...] = (WritingMode.FLAT_2D, WritingMode.MID_AIR_3D)
    kinematics: KinematicsConfig = field(default_factory=KinematicsConfig)
    noise: dict = field(default_factory=dict)
    seed: int = 0
    letters: str = LETTERS
    rep_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "modes", tuple(WritingMode.parse(m) for m in self.modes))
        if self.reps_per_letter < 1:
            raise ValueError("reps_per_letter must be >= 1")
        if not self.subjects or len(set(self.subjects)) != len(self.subjects):
            raise ValueError("subjects must be non-empty and unique")
        for ch in self.letters:
            letter_index(ch)

    def noise_for(self, subject: str) -> NoiseConfig:
        if subject in self.noise:
            return self.noise[subject]
        return subject_noise(self.subjects.index(subject) if subject in self.subjects else 0)


# --- kinematics -------------------------------------------------------------

@dataclass
class _Piece:
    curve: object  # callable s -> (pos, d1, d2) in unit-square coords
    length: float
    weight: float


def _line_piece(p0, p1, weight_scale=1.0) -> _Piece | None:
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    d = p1 - p0
    length = float(np.hypot(*d))
    if length < 1e-9:
        return None
    u = d / length

    def curve(s):
        s = np.asarray(s, float)
        pos = p0[None, :] + s[:, None] * u[None, :]
        d1 = np.broadcast_to(u, pos.shape)
        return pos, d1, np.zeros_like(pos)

    return _Piece(curve, length, weight_scale)


def _densify(points: np.ndarray, max_step: float = 0.2) -> np.ndarray:
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / max_step)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * k / n)
    return np.array(out)


def _spline_piece(points) -> _Piece | None:
    pts = np.asarray(points, float)
    keep = [0]
    for i in range(1, len(pts)):
        if np.hypot(*(pts[i] - pts[keep[-1]])) > 1e-9:
            keep.append(i)
    pts = pts[keep]
    if len(pts) < 2:
        return None
    if len(pts) == 2:
        return _line_piece(pts[0], pts[1])
    pts = _round_path(pts) if ROUNDING > 0 else _densify(pts)
    chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    cs = CubicSpline(chord, pts, bc_type="natural", axis=0)
    d1s, d2s = cs.derivative(1), cs.derivative(2)

    def curve(s):
        s = np.asarray(s, float)
        return cs(s), d1s(s), d2s(s)

    return _Piece(curve, float(chord[-1]), 1.0)


def _round_path(pts, step: float = 0.005, out_step: float = 0.02):
    """Blend straight runs into arcs so curvature ramps up instead of jumping.

    The template polyline is resampled finely and low-pass filtered along
    its length. Odd reflection at both ends keeps the endpoints and the end
    directions in place.
    """
    chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    length = float(chord[-1])
    u = np.linspace(0.0, length, max(int(length / step), 8) + 1)
    fine = np.column_stack([np.interp(u, chord, pts[:, 0]), np.interp(u, chord, pts[:, 1])])
    pad = min(int(4 * ROUNDING / step), len(fine) - 1)
    ext = np.concatenate([2 * fine[0] - fine[pad:0:-1], fine, 2 * fine[-1] - fine[-2:-pad - 2:-1]])
    smooth = gaussian_filter1d(ext, ROUNDING / step, axis=0, mode="nearest")[pad:pad + len(fine)]
    smooth[0], smooth[-1] = fine[0], fine[-1]
    idx = np.unique(np.linspace(0, len(smooth) - 1, max(int(length / out_step), 4) + 1).round().astype(int))
    return np.clip(smooth[idx], 0.0, 1.0)


def _split_at_corners(stroke) -> list:
    pts = [np.asarray(p, float) for p in stroke]
    pieces = [[pts[0]]]
    for i in range(1, len(pts) - 1):
        a = pts[i] - pts[i - 1]
        b = pts[i + 1] - pts[i]
        na, nb = np.hypot(*a), np.hypot(*b)
        pieces[-1].append(pts[i])
        if na > 1e-12 and nb > 1e-12:
            cosang = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
            if math.degrees(math.acos(cosang)) > CORNER_DEG:
                pieces.append([pts[i]])
    pieces[-1].append(pts[-1])
    return pieces


def _pieces_for(template: LetterTemplate, reverse_order: bool) -> list[_Piece]:
    strokes = list(template.strokes)
    if reverse_order:
        strokes = strokes[::-1]
    pieces: list[_Piece] = []
    prev_end = None
    for stroke in strokes:
        if prev_end is not None:
            pen = _line_piece(prev_end, stroke[0], PENUP_SPEEDUP)
            if pen is not None:
                pieces.append(pen)
        for chunk in _split_at_corners(stroke):
            p = _spline_piece(chunk)
            if p is not None:
                pieces.append(p)
        prev_end = stroke[-1]
    return pieces


def _profile(tau: np.ndarray, profile: SpeedProfile):
    """Normalized arc-length progress and its first two tau-derivatives."""
    if profile is SpeedProfile.CONSTANT:
        return tau, np.ones_like(tau), np.zeros_like(tau)
    t2 = tau * tau
    t3 = t2 * tau
    if profile is SpeedProfile.MINIMUM_SNAP:
        t4 = t2 * t2
        s = t4 * (35 - 84 * tau + 70 * t2 - 20 * t3)
        ds = 140 * t3 * (1 - 3 * tau + 3 * t2 - t3)
        dds = 420 * t2 * (1 - 4 * tau + 5 * t2 - 2 * t3)
        return s, ds, dds
    s = 10 * t3 - 15 * t3 * tau + 6 * t3 * t2
    ds = 30 * t2 - 60 * t3 + 30 * t2 * t2
    dds = 60 * tau - 180 * t2 + 120 * t3
    return s, ds, dds


@dataclass(frozen=True)
class SynthMotion:
    """Everything synthesized for one recording, before and after sensor noise."""

    t: np.ndarray
    position: np.ndarray
    accel_clean: np.ndarray
    accel: np.ndarray


def _rotation(axis: str, deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def synth_motion(letter: str, mode: WritingMode, kin: KinematicsConfig, noise: NoiseConfig, seed: int,
                 template: LetterTemplate | None = None) -> SynthMotion:
    mode = WritingMode.parse(mode)
    template = template or template_for(letter)
    rng = np.random.default_rng(seed)

    def uniform(half_width):
        return rng.uniform(-half_width, half_width)

    # fixed draw order keeps recordings stable when a jitter is zero
    scale = noise.scale_bias * (1.0 + uniform(noise.scale_jitter))
    aspect = noise.aspect_bias * (1.0 + uniform(noise.aspect_jitter))
    rot = noise.rot_bias_deg + uniform(noise.rot_jitter_deg)
    tilt_a, tilt_b = uniform(noise.tilt_deg), uniform(noise.tilt_deg)
    wobble_n = int(rng.integers(1, 3))
    wobble_amp = noise.depth_wobble_amp * rng.uniform(0.5, 1.0) * (1 if rng.random() < 0.5 else -1)
    reverse = rng.random() < noise.stroke_order_jitter

    pieces = _pieces_for(template, reverse and len(template.strokes) > 1)
    weights = np.array([(0.05 + p.length) ** DURATION_EXP * p.weight for p in pieces])
    weights = weights * (1.0 + rng.uniform(-noise.timing_jitter, noise.timing_jitter, len(pieces)))

    n = kin.n_samples
    total = (n - 1) / kin.rate_hz
    t = np.arange(n) / kin.rate_hz
    bounds = np.concatenate([[0.0], np.cumsum(weights)]) / weights.sum() * total
    bounds[-1] = total

    pos2 = np.zeros((n, 2))
    acc2 = np.zeros((n, 2))
    for i, piece in enumerate(pieces):
        t0, t1 = bounds[i], bounds[i + 1]
        dur = t1 - t0
        if i == len(pieces) - 1:
            mask = t >= t0
        else:
            mask = (t >= t0) & (t < t1)
        if not mask.any():
            continue
        tau = np.clip((t[mask] - t0) / dur, 0.0, 1.0)
        s, ds, dds = _profile(tau, kin.profile)
        arc = s * piece.length
        arc_dot = ds * piece.length / dur
        arc_ddot = dds * piece.length / dur ** 2
        p, d1, d2 = piece.curve(arc)
        pos2[mask] = p
        acc2[mask] = d2 * arc_dot[:, None] ** 2 + d1 * arc_ddot[:, None]

    size = (FLAT_SIZE_M if mode is WritingMode.FLAT_2D else AIR_SIZE_M) * scale
    lin = np.array([[aspect, 0.0], [0.0, 1.0]]) * size
    rc, rs = math.cos(math.radians(rot)), math.sin(math.radians(rot))
    lin = np.array([[rc, -rs], [rs, rc]]) @ lin
    pos2 = (pos2 - 0.5) @ lin.T
    acc2 = acc2 @ lin.T

    if mode is WritingMode.FLAT_2D:
        position = np.column_stack([pos2, np.zeros(n)])
        accel = np.column_stack([acc2, np.zeros(n)])
    else:
        # letter plane spanned by device x (horizontal) and device z (up); normal is device y
        basis = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        position = pos2 @ basis.T
        accel = acc2 @ basis.T
        omega = 2 * math.pi * wobble_n / total
        w = wobble_amp * AIR_SIZE_M * scale
        position[:, 1] += w * (1 - np.cos(omega * t)) / 2
        accel[:, 1] += w * omega ** 2 * np.cos(omega * t) / 2
        R = _rotation("x", tilt_a) @ _rotation("z", tilt_b)
        position = position @ R.T
        accel = accel @ R.T

    accel_clean = accel
    accel = accel_clean + rng.normal(0.0, 1.0, accel_clean.shape) * noise.accel_sigma
    if noise.gravity_offset:
        accel = accel + np.array([0.0, 0.0, noise.gravity_offset])
    return SynthMotion(t=t, position=position, accel_clean=accel_clean, accel=accel)


def synth_recording(letter: str, mode: WritingMode, kin: KinematicsConfig, noise: NoiseConfig, seed: int, *,
                    subject: str = "S0", rec_id: str | None = None,
                    template: LetterTemplate | None = None) -> Recording:
    mode = WritingMode.parse(mode)
    motion = synth_motion(letter, mode, kin, noise, seed, template=template)
    return Recording(
        id=rec_id or f"{subject}-{mode.value}-{letter}-{seed}",
        subject=subject,
        mode=mode,
        letter=letter,
        rate_hz=kin.rate_hz,
        samples=motion.accel,
    )


def recording_seed(master: int, subject: str, letter: str, mode: WritingMode, rep: int) -> int:
    """Seed for one recording, independent of generation order."""
    ss = np.random.SeedSequence([
        int(master) & 0xFFFFFFFF,
        zlib.crc32(subject.encode("utf-8")),
        letter_index(letter),
        0 if WritingMode.parse(mode) is WritingMode.FLAT_2D else 1,
        int(rep),
    ])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def recording_id(subject: str, mode: WritingMode, letter: str, rep: int) -> str:
    return f"{subject}-{WritingMode.parse(mode).value}-{letter}-{rep:02d}"


def synth_dataset(spec: GenSpec) -> Dataset:
    recs = []
    for subject in spec.subjects:
        noise = spec.noise_for(subject)
        for mode in spec.modes:
            for letter in spec.letters:
                for r in range(spec.rep_offset, spec.rep_offset + spec.reps_per_letter):
                    seed = recording_seed(spec.seed, subject, letter, mode, r)
                    recs.append(synth_recording(letter, mode, spec.kinematics, noise, seed, subject=subject,
                                                rec_id=recording_id(subject, mode, letter, r)))
    prov = (f"synthetic seed={spec.seed} subjects={','.join(spec.subjects)} "
            f"modes={','.join(m.value for m in spec.modes)} reps={spec.reps_per_letter} "
            f"rate_hz={spec.kinematics.rate_hz:g} duration_s={spec.kinematics.duration_s:g}")
    return Dataset(tuple(recs), prov)

