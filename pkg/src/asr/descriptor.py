"""Affine subspace descriptors.

For every keypoint a set of PCA-patch vectors is produced, one per simulated
view, either by warping the reference patch (naive path) or by combining
precomputed warped-basis tables (fast path). The centred set is summarised
by its leading principal subspace, and the subspace's projector is flattened
into a vector whose Euclidean distance equals the projection Frobenius
distance between subspaces.
"""

from __future__ import annotations

import math
import os
import struct
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._io import (BadMagicError, DimensionMismatchError, Reader, TruncatedFileError,
                  VersionMismatchError, atomic_write_bytes, atomic_write_text)
from .model import TrainedModel, fix_signs
from .patch import (Keypoint, bilinear_sample, estimate_orientation, extract_patch,
                    gradient_probe_offsets, orientation_from_probes, patch_grid, patch_sigma)

DESC_MAGIC = b"ASRD"
DESC_VERSION = 1
MODES = ("naive", "fast")
_RANK_TOL = 1e-12


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.seconds: dict[str, float] = defaultdict(float)

    def add(self, stage: str, start: float) -> float:
        now = time.perf_counter()
        self.seconds[stage] += now - start
        return now


# -- PCA-patch vectors ------------------------------------------------------------


def pca_patch_vector(p: np.ndarray, proj) -> np.ndarray:
    """Project a vectorised patch onto the learned directions (no centring)."""
    basis = proj.basis if hasattr(proj, "basis") else np.asarray(proj)
    flat = np.ravel(p)
    if flat.size != basis.shape[1]:
        raise ValueError(f"patch has {flat.size} pixels, projection expects {basis.shape[1]}")
    return basis @ flat


def _reference_patch(img: np.ndarray, kp: Keypoint, m: TrainedModel, theta: float) -> np.ndarray:
    p = m.params
    return extract_patch(img, kp, p.s_r, theta, p.c_s, support_side=p.s_l)


def _orientation(img: np.ndarray, kp: Keypoint, m: TrainedModel) -> float:
    if kp.has_orientation:
        return kp.orientation
    return estimate_orientation(img, kp, m.params.c_s, m.params.n_p)


def _inverse_maps(m: TrainedModel) -> np.ndarray:
    cached = m.__dict__.get("_inverse_maps")
    if cached is None:
        cached = np.linalg.inv(m.view_maps)
        m.__dict__["_inverse_maps"] = cached
    return cached


def warp_views(ref: np.ndarray, m: TrainedModel, realign: bool) -> np.ndarray:
    """All simulated views of an ``s_r`` reference patch, each of side ``s_l``.

    View ``A`` samples ``ref(A^-1 x)``. With ``realign`` the dominant
    orientation of each warped patch is measured and the view is rotated so
    that orientation points along +u before cropping; the warp, measurement
    and rotation are composed into a single resampling of ``ref``.
    """
    p = m.params
    inv = _inverse_maps(m)  # (V, 2, 2)
    c = (p.s_r - 1) / 2
    u, v = patch_grid(p.s_l)
    grid = np.stack([u.ravel(), v.ravel()])  # (2, s_l^2)
    if realign:
        probes = gradient_probe_offsets(patch_sigma(p.s_l, p.c_s), p.c_s, p.n_p)
        pts = probes.reshape(-1, 2).T  # (2, 4 * n_p)
        src = inv @ pts  # (V, 2, 4 * n_p)
        vals = bilinear_sample(ref, c + src[:, 0], c + src[:, 1])
        theta = orientation_from_probes(vals.reshape(len(inv), 4, -1),
                                        patch_sigma(p.s_l, p.c_s))
        cos, sin = np.cos(theta), np.sin(theta)
        rot = np.stack([np.stack([cos, -sin], -1), np.stack([sin, cos], -1)], -2)
        maps = inv @ rot
    else:
        maps = inv
    src = maps @ grid  # (V, 2, s_l^2)
    return bilinear_sample(ref, c + src[:, 0], c + src[:, 1])


def patch_vectors_naive(img: np.ndarray, kp: Keypoint, m: TrainedModel,
                        realign: bool = True, timer: StageTimer | None = None) -> np.ndarray:
    """PCA-patch vectors of every simulated view by explicit warping, (V, n_d)."""
    t0 = time.perf_counter()
    theta = _orientation(img, kp, m)
    ref = _reference_patch(img, kp, m, theta)
    if timer:
        t0 = timer.add("patch representation", t0)
    warped = warp_views(ref, m, realign)
    if timer:
        t0 = timer.add("warping", t0)
    vectors = warped @ m.proj.basis.T
    if timer:
        timer.add("patch representation", t0)
    return vectors


def fast_vectors_from_reference(ref: np.ndarray, m: TrainedModel) -> np.ndarray:
    coords = m.ref_basis.coordinates(ref)
    return m.tables.d_bar + np.tensordot(coords, m.tables.d_comp, axes=1)


def patch_vectors_fast(img: np.ndarray, kp: Keypoint, m: TrainedModel,
                       timer: StageTimer | None = None) -> np.ndarray:
    """PCA-patch vectors from the warped-basis tables, (V, n_d). No warping."""
    t0 = time.perf_counter()
    ref = _reference_patch(img, kp, m, _orientation(img, kp, m))
    vectors = fast_vectors_from_reference(ref, m)
    if timer:
        timer.add("patch representation", t0)
    return vectors


# -- subspaces -----------------------------------------------------------------------


def _canonical_completion(chosen: np.ndarray, dim: int, n_s: int) -> np.ndarray:
    cols = [c for c in chosen.T]
    for k in range(dim):
        if len(cols) == n_s:
            break
        e = np.zeros(dim)
        e[k] = 1.0
        for c in cols:
            e -= (c @ e) * c
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            cols.append(e / norm)
    return np.stack(cols, axis=1)


def subspace_fit(vectors, n_s: int) -> np.ndarray:
    """Orthonormal (n_d, n_s) basis of the leading principal subspace."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("subspace_fit needs at least 2 vectors")
    dim = x.shape[1]
    if not 1 <= n_s <= dim:
        raise ValueError(f"n_s must be in [1, {dim}]")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / x.shape[0]
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    rank = int(np.sum(w > _RANK_TOL * max(w[0], 0.0))) if w[0] > 0 else 0
    keep = min(rank, n_s)
    chosen = fix_signs(v[:, :keep].T).T
    if keep == n_s:
        return chosen
    return _canonical_completion(chosen, dim, n_s)


def eigen_gap(vectors, n_s: int) -> float:
    """Gap between the n_s-th and (n_s+1)-th covariance eigenvalues."""
    x = np.asarray(vectors, dtype=np.float64)
    xc = x - x.mean(axis=0)
    w = np.sort(np.linalg.eigvalsh(xc.T @ xc / x.shape[0]))[::-1]
    return float(w[n_s - 1] - w[n_s]) if n_s < len(w) else math.inf


def loss_rate(vectors, basis: np.ndarray) -> float:
    """Share of centred energy left outside the subspace spanned by ``basis``."""
    x = np.asarray(vectors, dtype=np.float64)
    xc = x - x.mean(axis=0)
    total = float(np.sum(xc * xc))
    if total == 0.0:
        return 0.0
    resid = xc - (xc @ basis) @ basis.T
    return min(1.0, float(np.sum(resid * resid)) / total)


def subspace_to_point(basis: np.ndarray) -> np.ndarray:
    """Upper triangle of the projector, diagonal scaled by 1/sqrt(2)."""
    q = basis @ basis.T
    n = q.shape[0]
    rows, cols = np.triu_indices(n)
    out = q[rows, cols]
    out[rows == cols] /= math.sqrt(2.0)
    return out


def descriptor_distance(q1: np.ndarray, q2: np.ndarray) -> float:
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    if q1.shape != q2.shape:
        raise ValueError(f"descriptor lengths differ: {q1.shape} vs {q2.shape}")
    return float(np.linalg.norm(q1 - q2))


# -- describe ------------------------------------------------------------------------


def describe_one(img: np.ndarray, kp: Keypoint, m: TrainedModel, mode: str = "naive",
                 realign: bool | None = None, timer: StageTimer | None = None) -> np.ndarray:
    if mode == "naive":
        vectors = patch_vectors_naive(img, kp, m, True if realign is None else realign, timer)
    elif mode == "fast":
        vectors = patch_vectors_fast(img, kp, m, timer)
    else:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    t0 = time.perf_counter()
    q = subspace_to_point(subspace_fit(vectors, m.params.n_s))
    if timer:
        timer.add("subspace representation", t0)
    return q


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("ASR_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def assign_orientations(img: np.ndarray, kps: Sequence[Keypoint], m: TrainedModel) -> list[Keypoint]:
    """Copy of ``kps`` with every unset orientation estimated."""
    out = []
    for kp in kps:
        if not kp.has_orientation and kp.inside(img):
            kp = Keypoint(kp.x, kp.y, kp.sigma, _orientation(img, kp, m))
        out.append(kp)
    return out


def describe(img: np.ndarray, kps: Sequence[Keypoint], m: TrainedModel, mode: str = "naive",
             realign: bool | None = None, threads: int | None = 1) -> list[Optional[np.ndarray]]:
    """Descriptors in keypoint order; ``None`` marks keypoints off the image."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    img = np.asarray(img)

    def one(kp: Keypoint) -> Optional[np.ndarray]:
        if not kp.inside(img):
            return None
        return describe_one(img, kp, m, mode, realign)

    n_workers = resolve_threads(threads)
    if n_workers == 1 or len(kps) < 2:
        return [one(kp) for kp in kps]
    with ThreadPoolExecutor(n_workers) as pool:
        return list(pool.map(one, kps))


# -- descriptor files ------------------------------------------------------------------


def descriptors_to_bytes(kps: Sequence[Keypoint], descs: Sequence[Optional[np.ndarray]],
                         dim: int) -> bytes:
    if len(kps) != len(descs):
        raise ValueError("keypoint and descriptor counts differ")
    parts = [struct.pack("<4sIII", DESC_MAGIC, DESC_VERSION, len(kps), dim)]
    for kp, d in zip(kps, descs):
        values = np.full(dim, np.nan) if d is None else np.asarray(d, dtype=np.float64)
        if values.shape != (dim,):
            raise ValueError(f"descriptor has shape {values.shape}, expected ({dim},)")
        parts.append(struct.pack("<4f", kp.x, kp.y, kp.sigma, kp.orientation))
        parts.append(values.astype("<f4").tobytes())
    return b"".join(parts)


def descriptors_from_bytes(data: bytes) -> tuple[list[Keypoint], np.ndarray]:
    """Keypoints and a (count, dim) array; failed records hold NaN."""
    r = Reader(data)
    magic, = r.unpack("4s", "magic")
    if magic != DESC_MAGIC:
        raise BadMagicError(f"not a descriptor file (magic {magic!r})")
    version, = r.unpack("I", "version")
    if version != DESC_VERSION:
        raise VersionMismatchError(f"descriptor version {version}, expected {DESC_VERSION}")
    count, dim = r.unpack("II", "header")
    if dim == 0:
        raise DimensionMismatchError("descriptor dimension is zero")
    record_size = 16 + 4 * dim
    available = len(data) - r.pos
    if count * record_size > available:
        raise TruncatedFileError(f"record {available // record_size}")
    kps, rows = [], np.empty((count, dim))
    for i in range(count):
        x, y, sigma, ori = r.unpack("4f", f"record {i}")
        if not sigma > 0:
            raise DimensionMismatchError(f"record {i}: non-positive scale")
        kps.append(Keypoint(x, y, sigma, ori))
        rows[i] = r.f32(dim, f"record {i}")
    r.finish()
    return kps, rows


def write_descriptors(path: str | Path, kps: Sequence[Keypoint],
                      descs: Sequence[Optional[np.ndarray]], dim: int) -> None:
    atomic_write_bytes(path, descriptors_to_bytes(kps, descs, dim))


def read_descriptors(path: str | Path) -> tuple[list[Keypoint], np.ndarray]:
    return descriptors_from_bytes(Path(path).read_bytes())


def descriptors_to_csv(kps: Sequence[Keypoint], descs: Iterable[Optional[np.ndarray]],
                       dim: int) -> str:
    head = ["x", "y", "sigma", "orientation"] + [f"v{i}" for i in range(dim)]
    lines = [",".join(head)]
    for kp, d in zip(kps, descs):
        values = np.full(dim, np.nan) if d is None else np.asarray(d)
        nums = [kp.x, kp.y, kp.sigma, kp.orientation] + [float(v) for v in values]
        lines.append(",".join(f"{float(np.float32(v)):.9g}" for v in nums))
    return "\n".join(lines) + "\n"


def write_descriptors_csv(path: str | Path, kps, descs, dim: int) -> None:
    atomic_write_text(path, descriptors_to_csv(kps, descs, dim))
