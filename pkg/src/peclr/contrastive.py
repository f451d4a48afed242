"""NT-Xent and its equivariant variant, plus a scalar brute-force oracle.

Projections are stacked as a ``(2N, 2m)`` array where rows ``2k`` and
``2k + 1`` are the two views of source image ``k`` and each row is a flat
``m x 2`` point set ``(x0, y0, x1, y1, ...)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import AffineTransform2D, LatentProjection
from .ndiff import Graph, Node

DEFAULT_TAU = 0.5


@dataclass
class ContrastiveBatch:
    projections: np.ndarray
    specs: Optional[Sequence] = None  # TransformSpec or AffineTransform2D per row
    tau: float = DEFAULT_TAU
    side: float = 128.0
    translation_mode: str = "normalized"  # or "direct"

    def __post_init__(self):
        z = self.projections
        if isinstance(z, (list, tuple)) and z and isinstance(z[0], LatentProjection):
            z = np.stack([p.flat() for p in z])
        self.projections = np.asarray(z, dtype=np.float64)
        if self.projections.ndim != 2 or self.projections.shape[0] % 2:
            raise ValueError("projections must be (2N, k) with an even row count")
        if self.projections.shape[1] % 2:
            raise ValueError("projection width must be even (m x 2 points)")
        if self.specs is not None and len(self.specs) != len(self.projections):
            raise ValueError("need one transform per projection")
        if self.translation_mode not in ("normalized", "direct"):
            raise ValueError(f"unknown translation mode {self.translation_mode!r}")

    @property
    def geometric(self) -> list:
        if self.specs is None:
            return [AffineTransform2D()] * len(self.projections)
        return [getattr(s, "geometric", s) for s in self.specs]


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


# -- graph builders -----------------------------------------------------------

def build_nt_xent(g: Graph, z: Node, tau: float) -> Node:
    """Append the mean NT-Xent over all 2N anchors to ``g``.

    Each anchor's term is written as ``log sum_{k != i} exp((s_ik - s_ij) / tau)``,
    the same quantity as ``-log(exp(s_ij/tau) / sum_k exp(s_ik/tau))`` shifted by
    the positive similarity for stability.
    """
    _check_tau(tau)
    n2 = z.shape[0]
    zn = g.l2norm(z, axis=1)
    sim = g.matmul(zn, zn, trans_b=True)
    pos = np.zeros((n2, n2))
    pos[np.arange(n2), np.arange(n2) ^ 1] = 1.0
    s_pos = g.matmul(g.sum(g.mul(sim, pos), axis=1, keepdims=True), np.ones((1, n2)))
    e = g.exp(g.mul(g.sub(sim, s_pos), 1.0 / tau))
    denom = g.sum(g.mul(e, 1.0 - np.eye(n2)), axis=1)
    return g.mean(g.log(denom))


def _row_range(z):
    return (z.max(axis=1) - z.min(axis=1))[:, None]


def build_latent_inversion(g: Graph, z: Node, geometric: Sequence[AffineTransform2D], side: float,
                           translation_mode: str = "normalized") -> Node:
    """Apply ``(t~)^-1`` row-wise; the range used for translation is detached.

    Rows are inverted as ``z + (R(-theta) - I)(z - centroid) - v``, so
    identity rows pass through bit-exactly.
    """
    n2, k = z.shape
    m = k // 2
    th = np.radians([t.rotation_deg for t in geometric])
    c, s = np.cos(th)[:, None], np.sin(th)[:, None]
    ones_row = np.ones((1, m))
    sel_x = np.zeros((k, m))
    sel_y = np.zeros((k, m))
    sel_x[0::2, :] = np.eye(m)
    sel_y[1::2, :] = np.eye(m)
    x = g.matmul(z, sel_x)
    y = g.matmul(z, sel_y)
    # centroids broadcast back over the m points
    cx = g.matmul(g.mean(x, axis=1, keepdims=True), ones_row)
    cy = g.matmul(g.mean(y, axis=1, keepdims=True), ones_row)
    dx, dy = g.sub(x, cx), g.sub(y, cy)
    cm1 = np.broadcast_to(c - 1.0, (n2, m))
    sb = np.broadcast_to(s, (n2, m))
    vx = np.array([t.translation[0] for t in geometric])[:, None]
    vy = np.array([t.translation[1] for t in geometric])[:, None]
    shift_x = g.add(g.mul(dx, cm1), g.mul(dy, sb))
    shift_y = g.add(g.mul(dx, -sb), g.mul(dy, cm1))
    if np.any(vx != 0) or np.any(vy != 0):
        if translation_mode == "normalized":
            lz = g.detached(_row_range, z, shape=(n2, 1))
            tx = g.matmul(g.mul(lz, vx / side), ones_row)
            ty = g.matmul(g.mul(lz, vy / side), ones_row)
        else:
            tx = g.const(np.broadcast_to(vx, (n2, m)))
            ty = g.const(np.broadcast_to(vy, (n2, m)))
        shift_x = g.sub(shift_x, tx)
        shift_y = g.sub(shift_y, ty)
    # interleave back to (x0, y0, x1, y1, ...)
    shift = g.add(g.matmul(shift_x, sel_x.T), g.matmul(shift_y, sel_y.T))
    return g.add(z, shift)


def build_peclr(g: Graph, z: Node, geometric: Sequence[AffineTransform2D], tau: float, side: float,
                translation_mode: str = "normalized") -> Node:
    if all(t.rotation_deg == 0 and t.translation == (0.0, 0.0) for t in geometric):
        return build_nt_xent(g, z, tau)
    return build_nt_xent(g, build_latent_inversion(g, z, geometric, side, translation_mode), tau)


# -- eager entry points ---------------------------------------------------------

def _run(batch: ContrastiveBatch, equivariant: bool):
    _check_tau(batch.tau)
    g = Graph()
    z = g.input("z", batch.projections.shape)
    if equivariant:
        loss = build_peclr(g, z, batch.geometric, batch.tau, batch.side, batch.translation_mode)
    else:
        loss = build_nt_xent(g, z, batch.tau)
    g.output("loss", loss)
    val = float(g.forward({"z": batch.projections})["loss"])
    grad = g.backward({"loss": 1.0})["z"]
    return val, grad


def nt_xent(batch: ContrastiveBatch, with_grad: bool = False):
    val, grad = _run(batch, equivariant=False)
    return (val, grad) if with_grad else val


def peclr_loss(batch: ContrastiveBatch, with_grad: bool = False):
    val, grad = _run(batch, equivariant=True)
    return (val, grad) if with_grad else val


def inverted_projections(batch: ContrastiveBatch) -> np.ndarray:
    """The ``z~`` rows fed to NT-Xent by :func:`peclr_loss`."""
    g = Graph()
    z = g.input("z", batch.projections.shape)
    g.output("zt", build_latent_inversion(g, z, batch.geometric, batch.side, batch.translation_mode))
    return g.forward({"z": batch.projections})["zt"]


def nt_xent_bruteforce(batch: ContrastiveBatch) -> float:
    """Direct double loop over anchors and candidates using only ``math``."""
    tau = batch.tau
    if not tau > 0:
        raise ValueError("temperature must be positive")
    rows = [[float(v) for v in r] for r in batch.projections]

    def sim(a, b):
        dot = sum(p * q for p, q in zip(a, b))
        na = math.sqrt(sum(p * p for p in a))
        nb = math.sqrt(sum(q * q for q in b))
        return dot / (na * nb)

    total = 0.0
    n2 = len(rows)
    for i in range(n2):
        j = i + 1 if i % 2 == 0 else i - 1
        num = math.exp(sim(rows[i], rows[j]) / tau)
        den = 0.0
        for k in range(n2):
            if k != i:
                den += math.exp(sim(rows[i], rows[k]) / tau)
        total += -math.log(num / den)
    return total / n2
