"""Difference-of-Gaussian keypoints and the keypoint text format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .patch import Keypoint

KEYPOINT_HEADER = "# asr-keypoints v1"
MIN_IMAGE_SIDE = 32
_INPUT_BLUR = 0.5
_BORDER = 5
_MAX_REFINE_STEPS = 5


class ImageTooSmallError(ValueError):
    pass


class KeypointFormatError(ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class DogParams:
    octaves: int = 4
    scales_per_octave: int = 3
    contrast_threshold: float = 0.03
    edge_ratio_threshold: float = 10.0
    base_sigma: float = 1.6

    def __post_init__(self) -> None:
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if self.scales_per_octave < 2:
            raise ValueError("scales_per_octave must be >= 2")
        if self.contrast_threshold < 0:
            raise ValueError("contrast_threshold must be >= 0")
        if not self.edge_ratio_threshold > 1:
            raise ValueError("edge_ratio_threshold must be > 1")
        if not self.base_sigma > 0:
            raise ValueError("base_sigma must be > 0")


def _octave_stack(base: np.ndarray, p: DogParams) -> np.ndarray:
    """Gaussian scale images of one octave, blurred incrementally."""
    s = p.scales_per_octave
    images = [base]
    for k in range(1, s + 3):
        prev = p.base_sigma * 2.0 ** ((k - 1) / s)
        cur = p.base_sigma * 2.0 ** (k / s)
        images.append(ndimage.gaussian_filter(images[-1], math.sqrt(cur * cur - prev * prev),
                                              mode="nearest"))
    return np.stack(images)


def _refine(dog: np.ndarray, s: int, y: int, x: int, p: DogParams):
    """Quadratic sub-pixel fit; returns (s, y, x, offset, value) or None."""
    n_s, h, w = dog.shape
    for _ in range(_MAX_REFINE_STEPS):
        c = dog[s - 1:s + 2, y - 1:y + 2, x - 1:x + 2]
        g = 0.5 * np.array([c[1, 1, 2] - c[1, 1, 0], c[1, 2, 1] - c[1, 0, 1],
                            c[2, 1, 1] - c[0, 1, 1]])
        v2 = 2.0 * c[1, 1, 1]
        dxx = c[1, 1, 2] + c[1, 1, 0] - v2
        dyy = c[1, 2, 1] + c[1, 0, 1] - v2
        dss = c[2, 1, 1] + c[0, 1, 1] - v2
        dxy = 0.25 * (c[1, 2, 2] - c[1, 2, 0] - c[1, 0, 2] + c[1, 0, 0])
        dxs = 0.25 * (c[2, 1, 2] - c[2, 1, 0] - c[0, 1, 2] + c[0, 1, 0])
        dys = 0.25 * (c[2, 2, 1] - c[2, 0, 1] - c[0, 2, 1] + c[0, 0, 1])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            off = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            value = c[1, 1, 1] + 0.5 * float(g @ off)
            return s, y, x, off, value, (dxx, dyy, dxy)
        x += int(round(off[0]))
        y += int(round(off[1]))
        s += int(round(off[2]))
        if not (1 <= s < n_s - 1 and _BORDER <= y < h - _BORDER and _BORDER <= x < w - _BORDER):
            return None
    return None


def detect_dog(img: np.ndarray, p: DogParams | None = None) -> list[Keypoint]:
    """Scale-space extrema of the DoG pyramid, strongest first."""
    p = p or DogParams()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < MIN_IMAGE_SIDE:
        raise ImageTooSmallError(f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    n_layers = p.scales_per_octave
    prelim = 0.5 * p.contrast_threshold / n_layers
    edge = (p.edge_ratio_threshold + 1.0) ** 2 / p.edge_ratio_threshold
    base = ndimage.gaussian_filter(
        img, math.sqrt(max(p.base_sigma ** 2 - _INPUT_BLUR ** 2, 0.01)), mode="nearest")

    found = []
    for octave in range(p.octaves):
        if min(base.shape) < 2 * _BORDER + 3:
            break
        gauss = _octave_stack(base, p)
        dog = gauss[1:] - gauss[:-1]
        peak_max = ndimage.maximum_filter(dog, size=3, mode="nearest")
        peak_min = ndimage.minimum_filter(dog, size=3, mode="nearest")
        candidates = ((dog == peak_max) | (dog == peak_min)) & (np.abs(dog) > prelim)
        candidates[0] = candidates[-1] = False
        candidates[:, :_BORDER] = candidates[:, -_BORDER:] = False
        candidates[:, :, :_BORDER] = candidates[:, :, -_BORDER:] = False
        scale = 2.0 ** octave
        for s, y, x in zip(*np.nonzero(candidates)):
            fit = _refine(dog, int(s), int(y), int(x), p)
            if fit is None:
                continue
            fs, fy, fx, off, value, (dxx, dyy, dxy) = fit
            if abs(value) * n_layers < p.contrast_threshold:
                continue
            det = dxx * dyy - dxy * dxy
            if det <= 0 or (dxx + dyy) ** 2 / det >= edge:
                continue
            found.append((
                abs(value),
                (fx + off[0]) * scale,
                (fy + off[1]) * scale,
                p.base_sigma * 2.0 ** (octave + (fs + off[2]) / n_layers),
            ))
        base = gauss[n_layers][::2, ::2]

    found.sort(key=lambda r: (-r[0], r[2], r[1], r[3]))
    return [Keypoint(float(x), float(y), float(sig)) for _, x, y, sig in found]


# -- keypoint files -------------------------------------------------------------


def format_keypoints(kps: Iterable[Keypoint]) -> str:
    lines = [KEYPOINT_HEADER]
    for kp in kps:
        ori = "nan" if math.isnan(kp.orientation) else f"{kp.orientation:.6f}"
        lines.append(f"{kp.x:.6f} {kp.y:.6f} {kp.sigma:.6f} {ori}")
    return "\n".join(lines) + "\n"


def parse_keypoints(text: str) -> list[Keypoint]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != KEYPOINT_HEADER:
        raise KeypointFormatError(f"expected header {KEYPOINT_HEADER!r}", 1)
    kps = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise KeypointFormatError(f"expected 4 fields, got {len(fields)}", lineno)
        try:
            x, y, sigma, ori = (float(f) for f in fields)
            kps.append(Keypoint(x, y, sigma, ori))
        except ValueError as exc:
            raise KeypointFormatError(str(exc), lineno) from None
    return kps


def read_keypoints(path: str | Path) -> list[Keypoint]:
    return parse_keypoints(Path(path).read_text())


def write_keypoints(kps: Iterable[Keypoint], path: str | Path) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, format_keypoints(kps))
