"""Shared fixtures data: image corpora, synthetic homographies and warps."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

TRAIN_IMAGES = ("brick", "grass", "gravel", "coins", "moon", "hubble_deep_field", "retina",
                "immunohistochemistry", "page", "text", "cell")
EVAL_IMAGES = ("camera", "astronaut", "coffee", "chelsea", "rocket")


def gray(im) -> np.ndarray:
    from skimage.color import rgb2gray

    im = np.asarray(im)
    if im.ndim == 3:
        im = rgb2gray(im[..., :3])
    im = im.astype(np.float64)
    if im.max() > 1.5:
        im = im / 255.0
    return im


def load(name: str) -> np.ndarray:
    import skimage.data

    return gray(getattr(skimage.data, name)())


def centered(h: np.ndarray, shape) -> np.ndarray:
    """Conjugate a 3x3 map so that it acts about the image center."""
    rows, cols = shape
    cx, cy = (cols - 1) / 2, (rows - 1) / 2
    t1 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    t2 = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    return t2 @ h @ t1


def rotation_h(shape, phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return centered(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]), shape)


def tilt_h(shape, t: float = 2.0, phi: float = 0.5, persp: float = 1e-4) -> np.ndarray:
    """Viewpoint homography: compression by ``t`` along direction ``phi`` plus mild perspective."""
    c, s = math.cos(phi), math.sin(phi)
    r = np.array([[c, -s], [s, c]])
    h = np.eye(3)
    h[:2, :2] = r @ np.diag([1.0, 1.0 / t]) @ r.T
    p = np.eye(3)
    p[2, 0] = persp
    return centered(p @ h, shape)


def warp_image(img: np.ndarray, h: np.ndarray, order: int = 3) -> np.ndarray:
    """Image ``b`` with ``b(h x) = img(x)``; outside samples are black."""
    hi = np.linalg.inv(h)
    rows, cols = img.shape
    y, x = np.mgrid[0:rows, 0:cols].astype(np.float64)
    p = hi @ np.stack([x.ravel(), y.ravel(), np.ones(x.size)])
    out = ndimage.map_coordinates(img, [p[1] / p[2], p[0] / p[2]], order=order,
                                  mode="constant", cval=0.0)
    return out.reshape(rows, cols).clip(0.0, 1.0)


def textured(rng: np.random.Generator, shape=(160, 160), smooth: float = 2.0) -> np.ndarray:
    """Smoothed random texture in roughly [0, 1] (float, unclamped)."""
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), smooth)
    return 0.5 + noise / (6 * noise.std())
