"""Offline training of the patch projections and warped-basis tables.

Three linear models are learned:

* ``PatchProjection`` -- top ``n_d`` principal directions of ``s_l`` patches,
  applied without centring so the patch representation stays linear.
* ``ReferenceBasis`` -- mean and top ``n_l`` principal components of the
  enlarged ``s_r`` reference patches.
* ``ViewTables`` -- the projection of every warped basis patch, so that the
  per-view patch vectors of any reference patch are a linear combination of
  table rows.

Everything stored in a ``TrainedModel`` is rounded to float32 precision when
the model is assembled, which makes the binary file an exact image of the
in-memory model.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import geometry
from ._io import (BadMagicError, DimensionMismatchError, Reader, VersionMismatchError,
                  atomic_write_bytes, f32_bytes)
from .geometry import ViewParams
from .patch import C_S, N_P, check_warp_sides, warp_patch

log = logging.getLogger(__name__)

MODEL_MAGIC = b"ASRM"
MODEL_VERSION = 1
_RANK_TOL = 1e-12
MAX_TILTS = 64
_CHUNK = 4096


class RankDeficiencyError(ValueError):
    """Training data does not span the requested number of directions."""


class TooFewSamplesError(RankDeficiencyError):
    pass


@dataclass(frozen=True)
class ASRParams:
    n_d: int = 24
    n_s: int = 8
    n_l: int = 160
    s_l: int = 21
    s_r: int = 31
    n_p: int = N_P
    c_s: float = C_S
    T_o: float = 0.8
    n_t: int = 5

    def __post_init__(self) -> None:
        if self.s_l % 2 == 0 or self.s_r % 2 == 0:
            raise ValueError("patch sides must be odd")
        check_warp_sides(self.s_r, self.s_l)
        if not 1 <= self.n_s <= self.n_d <= self.s_l ** 2:
            raise ValueError("need 1 <= n_s <= n_d <= s_l^2")
        if not 1 <= self.n_l <= self.s_r ** 2:
            raise ValueError("need 1 <= n_l <= s_r^2")
        if self.c_s <= 0:
            raise ValueError("c_s must be positive")
        if not 0.0 < self.T_o < 1.0:
            raise ValueError("T_o must lie in (0, 1)")
        if not 2 <= self.n_t <= MAX_TILTS:
            raise ValueError(f"n_t must lie in [2, {MAX_TILTS}]")
        if self.n_p < 1:
            raise ValueError("n_p must be positive")


@dataclass(eq=False)
class PatchProjection:
    basis: np.ndarray  # (n_d, s_l * s_l), orthonormal rows

    @property
    def n_d(self) -> int:
        return self.basis.shape[0]


@dataclass(eq=False)
class ReferenceBasis:
    mean_patch: np.ndarray  # (s_r * s_r,)
    components: np.ndarray  # (n_l, s_r * s_r), orthonormal rows

    @property
    def n_l(self) -> int:
        return self.components.shape[0]

    def coordinates(self, patch: np.ndarray) -> np.ndarray:
        return self.components @ (np.ravel(patch) - self.mean_patch)

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return self.mean_patch + coords @ self.components


@dataclass(eq=False)
class ViewTables:
    d_bar: np.ndarray  # (n_views, n_d)
    d_comp: np.ndarray  # (n_l, n_views, n_d)


@dataclass(eq=False)
class TrainedModel:
    params: ASRParams
    views: list[ViewParams]
    proj: PatchProjection
    ref_basis: ReferenceBasis
    tables: ViewTables
    stats: dict = field(default_factory=dict, repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainedModel):
            return NotImplemented
        return (
            self.params == other.params
            and self.views == other.views
            and all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays()))
        )

    def _arrays(self) -> tuple[np.ndarray, ...]:
        return (self.proj.basis, self.ref_basis.mean_patch, self.ref_basis.components,
                self.tables.d_bar, self.tables.d_comp)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def descriptor_dim(self) -> int:
        return self.params.n_d * (self.params.n_d + 1) // 2

    @cached_property
    def view_maps(self) -> np.ndarray:
        return np.stack([geometry.affine_from_view(v) for v in self.views])

    def with_n_l(self, n_l: int) -> "TrainedModel":
        """Model using only the leading ``n_l`` reference components."""
        if not 1 <= n_l <= self.ref_basis.n_l:
            raise ValueError(f"n_l must be in [1, {self.ref_basis.n_l}]")
        return TrainedModel(
            params=replace(self.params, n_l=n_l),
            views=list(self.views),
            proj=self.proj,
            ref_basis=ReferenceBasis(self.ref_basis.mean_patch,
                                     self.ref_basis.components[:n_l]),
            tables=ViewTables(self.tables.d_bar, self.tables.d_comp[:n_l]),
            stats=dict(self.stats),
        )


# -- PCA -------------------------------------------------------------------------


def _as_rows(samples, width: int | None = None) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    if width is not None and x.shape[1] != width:
        raise ValueError(f"samples have {x.shape[1]} values, expected {width}")
    return x


class CovarianceAccumulator:
    """Streaming first and second moments in float64, reduced in call order."""

    def __init__(self, dim: int):
        self.n = 0
        self.s1 = np.zeros(dim)
        self.s2 = np.zeros((dim, dim))

    def add(self, rows: np.ndarray) -> None:
        rows = _as_rows(rows, self.s1.size)
        for start in range(0, rows.shape[0], _CHUNK):
            chunk = rows[start:start + _CHUNK]
            self.n += chunk.shape[0]
            self.s1 += chunk.sum(axis=0)
            self.s2 += chunk.T @ chunk

    @property
    def mean(self) -> np.ndarray:
        return self.s1 / self.n

    def covariance(self) -> np.ndarray:
        mu = self.mean
        cov = self.s2 / self.n - np.outer(mu, mu)
        return 0.5 * (cov + cov.T)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry (first on ties) is positive."""
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def top_eigenvectors(cov: np.ndarray, k: int, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` eigenpairs, eigenvalue-descending, as rows."""
    if n_samples < k:
        raise TooFewSamplesError(f"{n_samples} samples cannot span {k} directions")
    w, v = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="stable")[:k]
    w, v = w[order], v[:, order].T
    if w[0] <= 0 or w[-1] <= _RANK_TOL * w[0]:
        raise RankDeficiencyError(f"sample covariance has rank below {k}")
    return w, fix_signs(v)


def train_patch_pca(patches, n_d: int) -> PatchProjection:
    """Principal directions of vectorised patches (covariance eigenvectors)."""
    acc = CovarianceAccumulator(_as_rows(patches[:1]).shape[1])
    acc.add(patches)
    _, rows = top_eigenvectors(acc.covariance(), n_d, acc.n)
    return PatchProjection(rows)


def train_reference_pca(patches, n_l: int) -> ReferenceBasis:
    acc = CovarianceAccumulator(_as_rows(patches[:1]).shape[1])
    acc.add(patches)
    _, rows = top_eigenvectors(acc.covariance(), n_l, acc.n)
    return ReferenceBasis(acc.mean, rows)


def reconstruction_loss(rb: ReferenceBasis, patches) -> np.ndarray:
    """Per-patch squared residual over squared norm of the centred patch."""
    x = _as_rows(patches, rb.mean_patch.size) - rb.mean_patch
    coords = x @ rb.components.T
    resid = np.sum((x - coords @ rb.components) ** 2, axis=1)
    total = np.sum(x * x, axis=1)
    return np.divide(resid, total, out=np.zeros_like(resid), where=total > 0)


# -- tables ------------------------------------------------------------------------


def precompute_view_tables(rb: ReferenceBasis, pp: PatchProjection,
                           views: Sequence[ViewParams]) -> ViewTables:
    """Project the warp of the mean patch and of every component, per view."""
    s_r = math.isqrt(rb.mean_patch.size)
    s_l = math.isqrt(pp.basis.shape[1])
    maps = [geometry.affine_from_view(v) for v in views]
    mean = rb.mean_patch.reshape(s_r, s_r)
    d_bar = np.stack([pp.basis @ warp_patch(mean, a, s_l).ravel() for a in maps])
    d_comp = np.empty((rb.n_l, len(maps), pp.n_d))
    for i, comp in enumerate(rb.components):
        comp = comp.reshape(s_r, s_r)
        for j, a in enumerate(maps):
            d_comp[i, j] = pp.basis @ warp_patch(comp, a, s_l).ravel()
    return ViewTables(d_bar, d_comp)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def assemble_model(params: ASRParams, proj: PatchProjection, ref_basis: ReferenceBasis,
                   stats: dict | None = None) -> TrainedModel:
    """Round the learned bases to float32, then build the view tables."""
    views = geometry.sample_views(params.T_o, params.n_t)
    proj = PatchProjection(_f32(proj.basis))
    ref_basis = ReferenceBasis(_f32(ref_basis.mean_patch), _f32(ref_basis.components))
    raw = precompute_view_tables(ref_basis, proj, views)
    tables = ViewTables(_f32(raw.d_bar), _f32(raw.d_comp))
    return TrainedModel(params, views, proj, ref_basis, tables, dict(stats or {}))


# -- corpus training ------------------------------------------------------------------


def augment_images(images: Iterable[np.ndarray], scale: float = 0.7) -> list[np.ndarray]:
    """Each image, its quarter-turn rotation and a smoothed ``scale`` resize."""
    from scipy import ndimage

    out = []
    for img in images:
        img = np.asarray(img, dtype=np.float32)
        small = ndimage.zoom(ndimage.gaussian_filter(img, 0.5 / scale), scale, order=1)
        out += [img, np.ascontiguousarray(np.rot90(img)), small.astype(np.float32)]
    return out


def collect_reference_patches(images: Iterable[np.ndarray], params: ASRParams,
                              dog_params=None, max_per_image: int | None = None) -> np.ndarray:
    """Aligned ``s_r`` reference patches around DoG keypoints of each image."""
    from .detect import detect_dog
    from .patch import estimate_orientation, extract_patch

    out = []
    for img in images:
        kps = detect_dog(img, dog_params)
        if max_per_image is not None:
            kps = kps[:max_per_image]
        for kp in kps:
            theta = estimate_orientation(img, kp, params.c_s, params.n_p)
            out.append(extract_patch(img, kp, params.s_r, theta, params.c_s,
                                     support_side=params.s_l).ravel())
    if not out:
        return np.zeros((0, params.s_r * params.s_r))
    return np.stack(out)


def train_model(reference_patches: np.ndarray, params: ASRParams | None = None,
                warped_views: bool = True, max_pd_patches: int | None = 5000) -> TrainedModel:
    """Learn all projections from aligned reference patches.

    With ``warped_views`` the patch projection is fitted to every simulated
    view of (up to ``max_pd_patches``) reference patches; otherwise only to
    their unwarped central crops.
    """
    params = params or ASRParams()
    refs = _as_rows(reference_patches, params.s_r ** 2) if len(reference_patches) else \
        np.zeros((0, params.s_r ** 2))
    n = refs.shape[0]
    if n < max(params.n_d, params.n_l):
        raise TooFewSamplesError(
            f"{n} training patches, need at least {max(params.n_d, params.n_l)}")

    views = geometry.sample_views(params.T_o, params.n_t)
    maps = [geometry.affine_from_view(v) for v in views] if warped_views else [np.eye(2)]
    pd_refs = refs if max_pd_patches is None else refs[:max_pd_patches]
    acc = CovarianceAccumulator(params.s_l ** 2)
    stack = pd_refs.reshape(-1, params.s_r, params.s_r)
    for a in maps:
        acc.add(warp_patch(stack, a, params.s_l).reshape(len(stack), -1))
    eigvals, rows = top_eigenvectors(acc.covariance(), params.n_d, acc.n)
    proj = PatchProjection(rows)
    total_var = float(np.trace(acc.covariance()))

    ref_basis = train_reference_pca(refs, params.n_l)
    loss = reconstruction_loss(ref_basis, refs)
    stats = {
        "n_reference_patches": n,
        "n_projection_samples": acc.n,
        "patch_pca_retained_variance": float(eigvals.sum() / total_var),
        "reference_pca_mean_loss": float(loss.mean()),
    }
    log.info("trained on %d reference patches (%d projection samples)", n, acc.n)
    return assemble_model(params, proj, ref_basis, stats)


# -- persistence ---------------------------------------------------------------------

def model_to_bytes(m: TrainedModel) -> bytes:
    p = m.params
    parts = [struct.pack("<4sI", MODEL_MAGIC, MODEL_VERSION),
             struct.pack("<6I", p.n_d, p.n_s, p.n_l, p.s_l, p.s_r, m.n_views),
             struct.pack("<ddI", p.c_s, p.T_o, p.n_t)]
    parts.append(f32_bytes([[v.t, v.alpha] for v in m.views]))
    parts.extend(f32_bytes(a) for a in m._arrays())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> TrainedModel:
    r = Reader(data)
    magic, = r.unpack("4s", "magic")
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"not a model file (magic {magic!r})")
    version, = r.unpack("I", "version")
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"model version {version}, expected {MODEL_VERSION}")
    n_d, n_s, n_l, s_l, s_r, n_views = r.unpack("6I", "header")
    c_s, T_o, n_t = r.unpack("ddI", "header")
    try:
        params = ASRParams(n_d=n_d, n_s=n_s, n_l=n_l, s_l=s_l, s_r=s_r, c_s=c_s, T_o=T_o,
                           n_t=n_t)
        views = geometry.sample_views(T_o, n_t)
    except ValueError as exc:
        raise DimensionMismatchError(f"inconsistent model header: {exc}") from None
    if n_views != len(views):
        raise DimensionMismatchError(
            f"header lists {n_views} views, parameters imply {len(views)}")
    stored = r.f32(2 * n_views, "views").reshape(n_views, 2)
    if not np.array_equal(stored, _f32([[v.t, v.alpha] for v in views])):
        raise DimensionMismatchError("stored views differ from the sampled view set")
    basis = r.f32(n_d * s_l * s_l, "patch_projection").reshape(n_d, s_l * s_l)
    mean = r.f32(s_r * s_r, "mean_patch")
    comps = r.f32(n_l * s_r * s_r, "reference_components").reshape(n_l, s_r * s_r)
    d_bar = r.f32(n_views * n_d, "d_bar").reshape(n_views, n_d)
    d_comp = r.f32(n_l * n_views * n_d, "d_comp").reshape(n_l, n_views, n_d)
    r.finish()
    return TrainedModel(params, views, PatchProjection(basis), ReferenceBasis(mean, comps),
                        ViewTables(d_bar, d_comp))


def save_model(m: TrainedModel, path: str | Path) -> None:
    atomic_write_bytes(path, model_to_bytes(m))


def load_model(path: str | Path) -> TrainedModel:
    return model_from_bytes(Path(path).read_bytes())
