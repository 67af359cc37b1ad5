"""Simulated affine views and their sampling.

A view is a tilt ``t >= 1`` applied along the direction ``alpha`` of the
canonical keypoint frame. Views are sampled on a geometric tilt grid; along
each tilt row the longitude step is the widest one that keeps adjacent view
ellipses overlapping by more than a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TILT_MAX = 4.0
BISECTION_TOL = 1e-4
_SAME_TOL = 1e-12


class InvalidEllipseError(ValueError):
    """Raised when an ellipse matrix is not symmetric positive-definite."""


@dataclass(frozen=True)
class ViewParams:
    """Tilt ``t`` and longitude ``alpha`` (radians) of a simulated view."""

    t: float
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if not (self.t >= 1.0) or not math.isfinite(self.t):
            raise ValueError(f"tilt must be >= 1, got {self.t}")
        if not (0.0 <= self.alpha < math.pi):
            raise ValueError(f"alpha must lie in [0, pi), got {self.alpha}")
        if self.t == 1.0 and self.alpha != 0.0:
            # longitude is meaningless for a circle
            object.__setattr__(self, "alpha", 0.0)


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def affine_from_view(v: ViewParams) -> np.ndarray:
    """2x2 map stretching by ``t`` along direction ``alpha``.

    Built as ``R(alpha) diag(t, 1) R(alpha)^T``: zoom is fixed at 1 and the
    trailing rotation is ``-alpha`` so every view stays in the keypoint's
    aligned frame and views of one tilt row differ by more than an in-plane
    rotation.
    """
    r = _rotation(v.alpha)
    return r @ np.diag([v.t, 1.0]) @ r.T


def view_ellipse(v: ViewParams) -> np.ndarray:
    """The quadratic form ``A^T A`` of a view."""
    a = affine_from_view(v)
    e = a.T @ a
    return 0.5 * (e + e.T)


def _check_ellipse(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (2, 2) or not np.all(np.isfinite(e)):
        raise InvalidEllipseError("ellipse must be a finite 2x2 matrix")
    if abs(e[0, 1] - e[1, 0]) > 1e-9 * max(1.0, np.abs(e).max()):
        raise InvalidEllipseError("ellipse matrix is not symmetric")
    if e[0, 0] <= 0 or np.linalg.det(e) <= 0:
        raise InvalidEllipseError("ellipse matrix is not positive-definite")
    return 0.5 * (e + e.T)


def ellipse_area(e: np.ndarray) -> float:
    return math.pi / math.sqrt(np.linalg.det(e))


def _sector_area(e: np.ndarray, th0: float, th1: float) -> float:
    # e^(1/2) maps the ellipse onto the unit disc and scales areas by sqrt(det e)
    w, v = np.linalg.eigh(e)
    half = (v * np.sqrt(w)) @ v.T
    u0 = half @ np.array([math.cos(th0), math.sin(th0)])
    u1 = half @ np.array([math.cos(th1), math.sin(th1)])
    swept = math.atan2(u0[0] * u1[1] - u0[1] * u1[0], float(u0 @ u1))
    return 0.5 * swept / math.sqrt(np.linalg.det(e))


def _crossing_angles(d: np.ndarray) -> list[float]:
    """Directions in [0, pi) where the quadratic form ``u^T d u`` vanishes."""
    w, v = np.linalg.eigh(d)
    if w[0] * w[1] >= 0:
        return []
    base = math.atan2(v[1, 0], v[0, 0])
    offset = math.atan(math.sqrt(-w[0] / w[1]))
    return sorted({(base + offset) % math.pi, (base - offset) % math.pi})


def ellipse_intersection_area(e1: np.ndarray, e2: np.ndarray) -> float:
    """Exact area of the intersection of two origin-centred ellipses."""
    e1 = _check_ellipse(e1)
    e2 = _check_ellipse(e2)
    cuts = _crossing_angles(e1 - e2)
    if not cuts:
        # one ellipse contains the other; the inner one has the larger form
        u = np.array([1.0, 0.0])
        if abs(u @ (e1 - e2) @ u) < _SAME_TOL:
            u = np.array([0.0, 1.0])
        inner = e1 if u @ e1 @ u >= u @ e2 @ u else e2
        return ellipse_area(inner)
    bounds = [cuts[0]] + cuts[1:] + [cuts[0] + math.pi]
    half = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        mid = 0.5 * (lo + hi)
        u = np.array([math.cos(mid), math.sin(mid)])
        inner = e1 if u @ e1 @ u >= u @ e2 @ u else e2
        half += _sector_area(inner, lo, hi)
    # both ellipses are centrally symmetric
    return 2.0 * half


def ellipse_overlap(e1: np.ndarray, e2: np.ndarray) -> float:
    """Overlap rate: intersection area over the larger of the two areas.

    Symmetric, in [0, 1], and equal to 1 only for identical ellipses.
    """
    e1 = _check_ellipse(e1)
    e2 = _check_ellipse(e2)
    if np.max(np.abs(e1 - e2)) <= _SAME_TOL:
        return 1.0
    inter = ellipse_intersection_area(e1, e2)
    ratio = inter / max(ellipse_area(e1), ellipse_area(e2))
    return min(1.0, max(0.0, ratio))


def tilt_values(n_t: int) -> list[float]:
    if n_t < 2:
        raise ValueError("n_t must be >= 2")
    return [TILT_MAX ** (k / (n_t - 1)) for k in range(n_t)]


def max_longitude_step(t: float, T_o: float) -> float:
    """Largest step (to BISECTION_TOL) keeping adjacent overlap above T_o."""
    e0 = view_ellipse(ViewParams(t, 0.0))

    def overlap_at(step: float) -> float:
        r = _rotation(step)
        return ellipse_overlap(e0, r @ e0 @ r.T)

    lo, hi = 0.0, math.pi / 2
    if overlap_at(hi) > T_o:
        return hi
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if overlap_at(mid) > T_o:
            lo = mid
        else:
            hi = mid
    if lo == 0.0:
        raise ValueError(f"T_o={T_o} leaves no longitude step above the bisection tolerance")
    return lo


def sample_views(T_o: float = 0.8, n_t: int = 5) -> list[ViewParams]:
    """Sampled view set, ordered by ascending tilt then ascending longitude."""
    if not 0.0 < T_o < 1.0:
        raise ValueError("T_o must lie in (0, 1)")
    views = [ViewParams(1.0, 0.0)]
    for t in tilt_values(n_t)[1:]:
        step = max_longitude_step(t, T_o)
        n_alpha = math.ceil(math.pi / step)
        views.extend(ViewParams(t, k * math.pi / n_alpha) for k in range(n_alpha))
    return views


def format_views(views: Iterable[ViewParams]) -> str:
    return "".join(f"{v.t:.9g} {v.alpha:.9g}\n" for v in views)


def parse_views(text: str) -> list[ViewParams]:
    views = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            t, alpha = (float(tok) for tok in line.split())
        except ValueError:
            raise ValueError(f"line {lineno}: expected 't alpha', got {line!r}") from None
        views.append(ViewParams(t, alpha))
    return views


def write_views(views: Sequence[ViewParams], path: str | Path) -> None:
    Path(path).write_text(format_views(views))


def read_views(path: str | Path) -> list[ViewParams]:
    return parse_views(Path(path).read_text())
