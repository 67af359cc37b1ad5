"""Matching and evaluation: NNDR matching, homography ground truth,
recall / 1-precision curves, a single-view baseline and stage timings."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._io import atomic_write_text
from .descriptor import (StageTimer, describe_one, pca_patch_vector)
from .model import TrainedModel
from .patch import Keypoint, estimate_orientation, extract_patch

CURVE_HEADER = "ratio,matches,correct,recall,one_minus_precision"
TIMING_HEADER = "stage,mean_ms,stddev_ms"
STAGES = ("warping", "patch representation", "subspace representation")


class SingularHomographyError(ValueError):
    pass


class EmptyGroundTruthError(ValueError):
    pass


@dataclass(frozen=True)
class MatchPair:
    index_a: int
    index_b: int
    distance: float
    ratio: float


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    matches: int
    correct: int
    recall: float
    one_minus_precision: float


# -- matching ------------------------------------------------------------------------


def _valid_rows(desc: Sequence[Optional[np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    idx = [i for i, d in enumerate(desc) if d is not None and np.all(np.isfinite(d))]
    if not idx:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    return np.stack([np.asarray(desc[i], dtype=np.float64) for i in idx]), np.array(idx)


def match_nndr(desc_a: Sequence[Optional[np.ndarray]], desc_b: Sequence[Optional[np.ndarray]],
               ratio_threshold: float = 0.8) -> list[MatchPair]:
    """One-way nearest-neighbour matches whose distance ratio is below threshold.

    Failed descriptors (``None`` or non-finite) take no part. Ties go to the
    lower index in ``desc_b``.
    """
    a, ia = _valid_rows(desc_a)
    b, ib = _valid_rows(desc_b)
    if len(ia) == 0 or len(ib) == 0:
        raise ValueError("match_nndr needs non-empty descriptor lists")
    if a.shape[1] != b.shape[1]:
        raise ValueError("descriptor dimensions differ")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    order = np.argsort(dist, axis=1, kind="stable")
    out = []
    for row in range(len(ia)):
        j1 = order[row, 0]
        d1 = float(dist[row, j1])
        d2 = float(dist[row, order[row, 1]]) if len(ib) > 1 else math.inf
        if d2 == 0.0:
            ratio = 1.0
        else:
            ratio = 0.0 if math.isinf(d2) else d1 / d2
        if ratio < ratio_threshold:
            out.append(MatchPair(int(ia[row]), int(ib[j1]), d1, ratio))
    return out


# -- homographies and ground truth ------------------------------------------------------------


def normalize_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < 1e-12 or h[2, 2] == 0:
        raise SingularHomographyError("homography is singular")
    return h / h[2, 2]


def read_homography(path: str | Path) -> np.ndarray:
    values = [float(tok) for tok in Path(path).read_text().split()]
    if len(values) != 9:
        raise ValueError(f"{path}: expected 9 numbers, got {len(values)}")
    return normalize_homography(values)


def write_homography(h, path: str | Path) -> None:
    h = normalize_homography(h)
    atomic_write_text(path, "\n".join(" ".join(f"{v:.10g}" for v in row) for row in h) + "\n")


def project(h: np.ndarray, x: float, y: float) -> tuple[float, float]:
    p = h @ np.array([x, y, 1.0])
    return p[0] / p[2], p[1] / p[2]


def local_scale(h: np.ndarray, x: float, y: float) -> float:
    """Geometric mean of the singular values of the homography's Jacobian."""
    w = h[2] @ np.array([x, y, 1.0])
    px, py = project(h, x, y)
    jac = np.array([[h[0, 0] - px * h[2, 0], h[0, 1] - px * h[2, 1]],
                    [h[1, 0] - py * h[2, 0], h[1, 1] - py * h[2, 1]]]) / w
    return math.sqrt(abs(np.linalg.det(jac)))


def ground_truth_correspondences(kps_a: Sequence[Keypoint], kps_b: Sequence[Keypoint], h,
                                 dist_thresh: float = 2.5,
                                 scale_ratio_max: float = 1.8) -> set[tuple[int, int]]:
    """Greedy one-to-one pairs by reprojection distance and scale consistency."""
    h = normalize_homography(h)
    if not kps_a or not kps_b:
        return set()
    b_xy = np.array([[k.x, k.y] for k in kps_b])
    b_s = np.array([k.sigma for k in kps_b])
    candidates = []
    for i, ka in enumerate(kps_a):
        px, py = project(h, ka.x, ka.y)
        scale = ka.sigma * local_scale(h, ka.x, ka.y)
        d = np.hypot(b_xy[:, 0] - px, b_xy[:, 1] - py)
        ratio = np.maximum(scale / b_s, b_s / scale)
        for j in np.nonzero((d <= dist_thresh) & (ratio <= scale_ratio_max))[0]:
            candidates.append((float(d[j]), i, int(j)))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), set()
    for _, i, j in candidates:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.add((i, j))
    return pairs


# -- curves -------------------------------------------------------------------------


def recall_precision_curve(matches: Sequence[MatchPair],
                           gt: set[tuple[int, int]]) -> list[CurvePoint]:
    """Sweep the ratio threshold over matches sorted by ascending ratio."""
    if not gt:
        raise EmptyGroundTruthError("no ground-truth correspondences; curve undefined")
    ratios = [mp.ratio for mp in matches]
    if any(r1 > r2 for r1, r2 in zip(ratios, ratios[1:])):
        raise ValueError("matches must be sorted by ascending ratio")
    points, correct = [], 0
    for k, mp in enumerate(matches):
        correct += (mp.index_a, mp.index_b) in gt
        if k + 1 < len(matches) and matches[k + 1].ratio == mp.ratio:
            continue
        n = k + 1
        points.append(CurvePoint(mp.ratio, n, correct, correct / len(gt), (n - correct) / n))
    return points


def curve_for(desc_a, desc_b, gt, ratio_threshold: float = 1.0) -> list[CurvePoint]:
    matches = sorted(match_nndr(desc_a, desc_b, ratio_threshold),
                     key=lambda mp: (mp.ratio, mp.index_a))
    return recall_precision_curve(matches, gt)


def recall_at(curve: Sequence[CurvePoint], one_minus_precision: float) -> float:
    """Best recall among curve points whose 1-precision does not exceed the level."""
    ok = [p.recall for p in curve if p.one_minus_precision <= one_minus_precision]
    return max(ok, default=0.0)


def recall_at_ratio(curve: Sequence[CurvePoint], threshold: float) -> float:
    ok = [p.recall for p in curve if p.threshold < threshold]
    return max(ok, default=0.0)


def curve_to_csv(curve: Sequence[CurvePoint]) -> str:
    lines = [CURVE_HEADER]
    lines += [f"{p.threshold:.6f},{p.matches},{p.correct},{p.recall:.6f},"
              f"{p.one_minus_precision:.6f}" for p in curve]
    return "\n".join(lines) + "\n"


def write_curve_csv(curve: Sequence[CurvePoint], path: str | Path) -> None:
    atomic_write_text(path, curve_to_csv(curve))


# -- baseline --------------------------------------------------------------------------


def baseline_single_view(img: np.ndarray, kps: Sequence[Keypoint],
                         m: TrainedModel) -> list[Optional[np.ndarray]]:
    """L2-normalised PCA-patch vector of the aligned, unwarped patch."""
    p = m.params
    out = []
    for kp in kps:
        if not kp.inside(img):
            out.append(None)
            continue
        theta = kp.orientation if kp.has_orientation else estimate_orientation(img, kp, p.c_s, p.n_p)
        v = pca_patch_vector(extract_patch(img, kp, p.s_l, theta, p.c_s), m.proj)
        norm = np.linalg.norm(v)
        out.append(v / norm if norm > 0 else v)
    return out


# -- timing -----------------------------------------------------------------------------


def bench_timing(img: np.ndarray, kps: Sequence[Keypoint], m: TrainedModel, mode: str,
                 repetitions: int = 20, min_keypoints: int = 100) -> dict[str, tuple[float, float]]:
    """Per-descriptor mean and stddev milliseconds for every stage and the total.

    One untimed warm-up pass precedes ``repetitions`` timed passes over all
    keypoints; statistics are taken over the per-pass means.
    """
    kps = [kp for kp in kps if kp.inside(img)]
    if len(kps) < min_keypoints:
        raise ValueError(f"timing needs at least {min_keypoints} keypoints, got {len(kps)}")
    for kp in kps:
        describe_one(img, kp, m, mode)
    per_pass: dict[str, list[float]] = {s: [] for s in STAGES + ("total",)}
    for _ in range(repetitions):
        timer = StageTimer()
        start = time.perf_counter()
        for kp in kps:
            describe_one(img, kp, m, mode, timer=timer)
        total = time.perf_counter() - start
        for s in STAGES:
            per_pass[s].append(1e3 * timer.seconds.get(s, 0.0) / len(kps))
        per_pass["total"].append(1e3 * total / len(kps))
    return {s: (statistics.fmean(v), statistics.pstdev(v)) for s, v in per_pass.items()}


def timing_to_csv(report: dict[str, tuple[float, float]]) -> str:
    lines = [TIMING_HEADER]
    lines += [f"{stage},{mean:.6f},{std:.6f}" for stage, (mean, std) in report.items()]
    return "\n".join(lines) + "\n"
