"""Keypoint patches: image I/O, bilinear sampling, orientation, warping.

Images are 2-D float arrays indexed ``img[y, x]`` with intensities in [0, 1].
Patches are odd-sided square arrays whose centre pixel sits on the keypoint;
patch coordinates ``(u, v)`` are column/row offsets from that centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

C_S = 7.5
N_P = 60
_RING_RADII = (0.33, 0.66, 1.0)
_RING_SHARES = (15, 20, 25)
_GRAD_STEP = 0.5


class PatchTooSmallError(ValueError):
    """Raised when a reference patch cannot contain every warped sample."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    orientation: float = math.nan

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"keypoint sigma must be > 0, got {self.sigma}")

    @property
    def has_orientation(self) -> bool:
        return not math.isnan(self.orientation)

    def inside(self, img: np.ndarray) -> bool:
        h, w = img.shape
        return 0.0 <= self.x <= w - 1 and 0.0 <= self.y <= h - 1


# -- image I/O ---------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) as float32 in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset)
    return pixels.reshape(h, w).astype(np.float32) / np.float32(maxval)


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img)
    h, w = img.shape
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Read a grayscale image; PGM natively, other formats through Pillow."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"P5":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.float32)
    return gray / np.float32(255.0)


# -- sampling ----------------------------------------------------------------


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at (x, y) with edge replication.

    ``img`` may carry leading batch axes; the sample coordinates broadcast
    against the trailing two (row, column) axes.
    """
    h, w = img.shape[-2:]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    src = np.asarray(img, dtype=np.float64)
    top = src[..., y0, x0] * (1.0 - fx) + src[..., y0, x1] * fx
    bottom = src[..., y1, x0] * (1.0 - fx) + src[..., y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def patch_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    """Centred (u, v) offsets of a side x side patch, row-major."""
    if side % 2 != 1:
        raise ValueError(f"patch side must be odd, got {side}")
    half = (side - 1) // 2
    v, u = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    return u, v


# -- orientation -------------------------------------------------------------


def orientation_pattern(n_p: int = N_P) -> np.ndarray:
    """Unit-radius sampling pattern: points on three concentric rings."""
    total = sum(_RING_SHARES)
    counts = [n_p * s // total for s in _RING_SHARES]
    counts[-1] += n_p - sum(counts)
    pts = []
    for radius, n in zip(_RING_RADII, counts):
        ang = 2.0 * math.pi * np.arange(n) / n
        pts.append(np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1))
    return np.concatenate(pts)


def gradient_probe_offsets(sigma: float, c_s: float = C_S, n_p: int = N_P) -> np.ndarray:
    """Offsets of the 4 * n_p samples feeding the central differences.

    Returned shape is (4, n_p, 2): +x, -x, +y, -y neighbours of each pattern
    point, relative to the keypoint.
    """
    pts = orientation_pattern(n_p) * (c_s * sigma)
    h = _GRAD_STEP * sigma
    shifts = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    return pts[None, :, :] + shifts[:, None, :]


def orientation_from_probes(values: np.ndarray, sigma: float) -> np.ndarray:
    """Dominant orientation from probe samples of shape (..., 4, n_p)."""
    h2 = 2.0 * _GRAD_STEP * sigma
    gx = np.mean(values[..., 0, :] - values[..., 1, :], axis=-1) / h2
    gy = np.mean(values[..., 2, :] - values[..., 3, :], axis=-1) / h2
    theta = np.mod(np.arctan2(gy, gx), 2.0 * math.pi)
    theta = np.where(theta >= 2.0 * math.pi, 0.0, theta)
    return np.where(np.hypot(gx, gy) < 1e-9, 0.0, theta)


def estimate_orientation(img: np.ndarray, kp: Keypoint, c_s: float = C_S,
                         n_p: int = N_P) -> float:
    """Direction of the mean intensity gradient over the sampling pattern."""
    probes = gradient_probe_offsets(kp.sigma, c_s, n_p)
    values = bilinear_sample(img, kp.x + probes[..., 0], kp.y + probes[..., 1])
    return float(orientation_from_probes(values, kp.sigma))


def patch_sigma(s_l: int, c_s: float = C_S) -> float:
    """Keypoint scale, in patch pixels, of a canonical patch of side s_l."""
    return ((s_l - 1) / 2) / c_s


# -- extraction and warping ---------------------------------------------------


def extract_patch(img: np.ndarray, kp: Keypoint, side: int, theta: float,
                  c_s: float = C_S, support_side: int | None = None) -> np.ndarray:
    """Sample a rotated square patch around ``kp``.

    One patch pixel spans ``c_s * sigma / ((support_side - 1) / 2)`` image
    pixels. ``support_side`` defaults to ``side``; passing a smaller value
    yields an enlarged patch at the pixel pitch of the smaller one.
    """
    support = side if support_side is None else support_side
    r = c_s * kp.sigma / ((support - 1) / 2)
    u, v = patch_grid(side)
    c, s = math.cos(theta), math.sin(theta)
    xs = kp.x + r * (u * c - v * s)
    ys = kp.y + r * (u * s + v * c)
    return bilinear_sample(img, xs, ys)


def center_crop(p: np.ndarray, side: int) -> np.ndarray:
    big = p.shape[-1]
    off = (big - side) // 2
    return p[..., off:off + side, off:off + side]


def check_warp_sides(ref_side: int, out_side: int) -> None:
    # A^-1 never lengthens a vector, so output corners must fit in ref
    if ref_side - 1 < math.sqrt(2.0) * (out_side - 1):
        raise PatchTooSmallError(
            f"reference side {ref_side} cannot hold warped patch of side {out_side}")


def warp_coordinates(a: np.ndarray, out_side: int, ref_side: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference-patch sample positions (x, y) of ``out(x) = ref(A^-1 x)``."""
    inv = np.linalg.inv(np.asarray(a, dtype=np.float64))
    u, v = patch_grid(out_side)
    c = (ref_side - 1) / 2
    return c + inv[0, 0] * u + inv[0, 1] * v, c + inv[1, 0] * u + inv[1, 1] * v


def warp_patch(ref: np.ndarray, a: np.ndarray, out_side: int) -> np.ndarray:
    """Warp ``ref`` by ``A`` and keep the central ``out_side`` square."""
    ref_side = ref.shape[-1]
    check_warp_sides(ref_side, out_side)
    xs, ys = warp_coordinates(a, out_side, ref_side)
    return bilinear_sample(ref, xs, ys)
