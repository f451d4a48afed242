"""2D similarity transforms for images, keypoints and latent point sets.

Coordinates are continuous pixel coordinates ``(x, y)`` with ``x`` along
columns and ``y`` along rows (pointing down); pixel ``(r, c)`` covers
``[c, c+1) x [r, r+1)`` so its center sits at ``(c + 0.5, r + 0.5)`` and the
image center of an ``H x W`` image is ``(W/2, H/2)``.  A positive rotation
maps ``(1, 0)`` to ``(0, 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AffineTransform2D:
    rotation_deg: float = 0.0
    translation: tuple = (0.0, 0.0)
    scale: float = 1.0
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def linear(self) -> np.ndarray:
        th = math.radians(self.rotation_deg)
        c, s = math.cos(th), math.sin(th)
        return self.scale * np.array([[c, -s], [s, c]])

    def to_matrix(self) -> np.ndarray:
        a = self.linear
        ctr = np.array(self.center)
        m = np.eye(3)
        m[:2, :2] = a
        m[:2, 2] = ctr - a @ ctr + np.array(self.translation)
        return m

    def inverse(self) -> "AffineTransform2D":
        # Keep the same pivot: p = A^-1 (q - c - v) + c  =>  A^-1 (q - c) + c - A^-1 v
        inv = AffineTransform2D(-self.rotation_deg, (0.0, 0.0), 1.0 / self.scale, self.center)
        v = -inv.linear @ np.array(self.translation)
        return AffineTransform2D(-self.rotation_deg, tuple(v), 1.0 / self.scale, self.center)

    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.translation == (0.0, 0.0) and self.scale == 1

    @staticmethod
    def from_matrix(m: np.ndarray, center=(0.0, 0.0)) -> "AffineTransform2D":
        a = m[:2, :2]
        scale = math.sqrt(abs(np.linalg.det(a)))
        rot = math.degrees(math.atan2(a[1, 0], a[0, 0]))
        ctr = np.array(center, dtype=float)
        v = m[:2, 2] - ctr + a @ ctr
        return AffineTransform2D(rot, tuple(v), scale, tuple(ctr))


def compose(t1: AffineTransform2D, t2: AffineTransform2D) -> AffineTransform2D:
    """``t1 o t2`` (apply ``t2`` first), expressed about ``t2``'s pivot."""
    return AffineTransform2D.from_matrix(t1.to_matrix() @ t2.to_matrix(), t2.center)


def apply_to_points(t: AffineTransform2D, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    ctr = np.array(t.center)
    return (pts - ctr) @ t.linear.T + ctr + np.array(t.translation)


def apply_to_image(t: AffineTransform2D, img: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Warp ``img`` (H x W x C) by ``t`` using bilinear inverse sampling.

    Output pixels whose source location falls outside the image take ``fill``.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h < 8 or w < 8:
        raise ValueError("image must be at least 8x8")
    if t.is_identity():
        return img.copy()
    ys, xs = np.mgrid[0:h, 0:w]
    dst = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)
    src = apply_to_points(t.inverse(), dst) - 0.5
    return _bilinear(img, src[:, 0], src[:, 1], fill).reshape(img.shape)


def _bilinear(img, sx, sy, fill):
    # one ring of ``fill`` around the image; neighbours outside it clip onto the ring
    h, w = img.shape[:2]
    img = img.reshape(h, w, -1)
    pad = np.full((h + 2, w + 2, img.shape[2]), float(fill))
    pad[1:-1, 1:-1] = img
    x0, y0 = np.floor(sx), np.floor(sy)
    fx, fy = (sx - x0)[:, None], (sy - y0)[:, None]
    x0 = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    y0 = np.clip(y0.astype(np.int64) + 1, 0, h + 1)
    x1, y1 = np.minimum(x0 + 1, w + 1), np.minimum(y0 + 1, h + 1)
    # a coordinate left of the image clips x0 to the ring but x1 must follow it
    x1 = np.where(sx < -1, 0, x1)
    y1 = np.where(sy < -1, 0, y1)
    top = pad[y0, x0] * (1 - fx) + pad[y0, x1] * fx
    bot = pad[y1, x0] * (1 - fx) + pad[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def latent_range(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(z.max() - z.min())


def normalize_translation(v, side: float, z) -> np.ndarray:
    """Map a pixel translation into latent units: ``v / side * range(z)``.

    ``range(z)`` is the spread over all coordinates of the one sample; a
    constant ``z`` gives a zero translation.
    """
    if not side > 0:
        raise ValueError("image side must be positive")
    lz = latent_range(z)
    if lz == 0:
        return np.zeros(2)
    return np.asarray(v, dtype=np.float64) / side * lz


@dataclass
class LatentProjection:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.points.shape[0] < 2:
            raise ValueError("a latent projection needs at least 2 points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("latent projection has non-finite coordinates")

    @classmethod
    def from_flat(cls, z) -> "LatentProjection":
        return cls(np.asarray(z).reshape(-1, 2))

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1)


def invert_in_latent(t_g: AffineTransform2D, z, side: float, normalize: bool = True) -> np.ndarray:
    """Undo the rotation/translation of ``t_g`` on a latent point set.

    Rotation pivots on the centroid of ``z``; the pixel translation is
    rescaled with :func:`normalize_translation` (or used raw when
    ``normalize`` is false); scale is ignored.  Returns an ``m x 2`` array.
    """
    pts = z.points if isinstance(z, LatentProjection) else np.asarray(z, dtype=np.float64).reshape(-1, 2)
    if normalize:
        v = normalize_translation(t_g.translation, side, pts)
    else:
        v = np.asarray(t_g.translation, dtype=np.float64)
    th = math.radians(t_g.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    ctr = pts.mean(axis=0)
    d = pts - ctr
    # z + (R(-th) - I)(z - ctr) - v keeps identity transforms bit-exact
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] + ((c - 1.0) * d[:, 0] + s * d[:, 1]) - v[0]
    out[:, 1] = pts[:, 1] + (-s * d[:, 0] + (c - 1.0) * d[:, 1]) - v[1]
    return out
