"""Dynamic time warping with a compiled kernel and a numpy fallback.

The compiled extension ``airglyph._dtw`` is used when it imports; set
``AIRGLYPH_PURE_PYTHON=1`` to force the fallback. Both backends compute the
same recurrence cell by cell in the same order, so results agree to the last
bit on typical inputs.

Per-step cost is the Euclidean distance between samples. With a finite
Sakoe-Chiba ``band`` a cell ``(i, j)`` is reachable only when
``|i - j| <= max(band, |n - m|)``; the widening keeps unequal-length pairs
alignable.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("AIRGLYPH_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _dtw as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def _band_width(n: int, m: int, band) -> int:
    if band is None or band < 0:
        return max(n, m)
    return max(int(band), abs(n - m))


def _check(a: np.ndarray, b_len: int, channels: int):
    if a.ndim != 2 or a.shape[0] == 0 or b_len == 0:
        raise ValueError("DTW needs non-empty (T, C) sequences")
    if a.shape[1] != channels:
        raise ValueError("channel count mismatch")


def numpy_one_to_many(query: np.ndarray, refs: np.ndarray, band=None) -> np.ndarray:
    """DTW from one query to a stack of equal-length references, vectorized
    over references and over anti-diagonals of the cost matrix."""
    q = np.ascontiguousarray(query, dtype=np.float64)
    R = np.ascontiguousarray(refs, dtype=np.float64)
    _check(q, R.shape[1] if R.ndim == 3 else 0, R.shape[2] if R.ndim == 3 else -1)
    N, m, _ = R.shape
    n = q.shape[0]
    if N == 0:
        return np.zeros(0)
    diff = q[None, :, None, :] - R[:, None, :, :]
    sq = diff[..., 0] * diff[..., 0]
    for k in range(1, diff.shape[-1]):
        sq = sq + diff[..., k] * diff[..., k]
    cost = np.sqrt(sq)
    w = _band_width(n, m, band)
    if w < max(n, m):
        ii, jj = np.indices((n, m))
        cost[:, np.abs(ii - jj) > w] = np.inf
    D = np.full((N, n + 1, m + 1), np.inf)
    D[:, 0, 0] = 0.0
    for d in range(n + m - 1):
        i = np.arange(max(0, d - m + 1), min(n, d + 1))
        j = d - i
        best = np.minimum(np.minimum(D[:, i, j], D[:, i, j + 1]), D[:, i + 1, j])
        D[:, i + 1, j + 1] = cost[:, i, j] + best
    return D[:, n, m].copy()


def numpy_distance(a: np.ndarray, b: np.ndarray, band=None) -> float:
    return float(numpy_one_to_many(a, np.asarray(b, dtype=np.float64)[None], band)[0])


def dtw_distance(a, b, band=None) -> float:
    """Alignment cost between two ``(T, C)`` sequences; ``band=None`` is unbounded."""
    a = np.ascontiguousarray(getattr(a, "values", a), dtype=np.float64)
    b = np.ascontiguousarray(getattr(b, "values", b), dtype=np.float64)
    _check(a, b.shape[0] if b.ndim == 2 else 0, b.shape[1] if b.ndim == 2 else -1)
    if band is not None and band > max(len(a), len(b)):
        raise ValueError("band exceeds sequence length")
    if _compiled is not None:
        return float(_compiled.dtw_distance(a, b, -1 if band is None else int(band)))
    return numpy_distance(a, b, band)


def dtw_one_to_many(query, refs, band=None) -> np.ndarray:
    """Distances from ``query`` to every sequence in ``refs``.

    ``refs`` is either a ``(N, T, C)`` array or a list of ``(T_i, C)`` arrays.
    """
    q = np.ascontiguousarray(getattr(query, "values", query), dtype=np.float64)
    if isinstance(refs, np.ndarray) and refs.ndim == 3:
        groups = {refs.shape[1]: (np.arange(len(refs)), refs)}
        total = len(refs)
    else:
        arrs = [np.asarray(getattr(r, "values", r), dtype=np.float64) for r in refs]
        total = len(arrs)
        groups = {}
        for idx, r in enumerate(arrs):
            groups.setdefault(r.shape, []).append(idx)
        groups = {shape: (np.array(ix), np.stack([arrs[i] for i in ix])) for shape, ix in groups.items()}
    out = np.empty(total)
    for idx, stack in groups.values():
        stack = np.ascontiguousarray(stack, dtype=np.float64)
        if _compiled is not None:
            out[idx] = _compiled.dtw_one_to_many(q, stack, -1 if band is None else int(band))
        else:
            out[idx] = numpy_one_to_many(q, stack, band)
    return out
