"""2.5D pose losses, root-depth recovery, lifting and evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .geometry import AffineTransform2D, apply_to_points, apply_to_image
from .ndiff import Graph

# middle-finger MCP -> wrist
DEFAULT_REF_BONE = (9, 0)
PCK_THRESHOLDS = np.linspace(0.0, 5.0, 101)[1:]


@dataclass
class Pose25D:
    J2D: np.ndarray
    d_r: np.ndarray

    def __post_init__(self):
        self.J2D = np.asarray(self.J2D, dtype=np.float64)
        self.d_r = np.asarray(self.d_r, dtype=np.float64)
        if self.J2D.shape[-2:] != (self.d_r.shape[-1], 2):
            raise ValueError("J2D and d_r disagree on the joint count")


# -- losses --------------------------------------------------------------------

def build_pose_losses(g: Graph, pred_j2d, pred_dr, gt_j2d, gt_dr):
    """Append the two mean-absolute-error terms to ``g``."""
    l2d = g.mean(g.abs(g.sub(pred_j2d, gt_j2d)))
    ldr = g.mean(g.abs(g.sub(pred_dr, gt_dr)))
    return l2d, ldr


def pose_losses(pred: Pose25D, gt: Pose25D) -> tuple:
    if pred.J2D.shape != gt.J2D.shape or pred.d_r.shape != gt.d_r.shape:
        raise ValueError("prediction and ground truth shapes differ")
    return float(np.mean(np.abs(pred.J2D - gt.J2D))), float(np.mean(np.abs(pred.d_r - gt.d_r)))


# -- 2.5D -> 3D ------------------------------------------------------------------

def _rays(J2D, K):
    uv1 = np.concatenate([np.asarray(J2D, dtype=np.float64), np.ones((len(J2D), 1))], axis=1)
    return uv1 @ np.linalg.inv(K).T


def root_depth_quadratic(J2D, d_r, K, ref_bone=DEFAULT_REF_BONE, ref_len: float = 1.0):
    """Coefficients ``(a, b, c)`` of ``a D^2 + b D + c = 0`` for root depth ``D``."""
    n, m = ref_bone
    x = _rays(J2D, K)
    dn = x[n] - x[m]
    off = x[n] * d_r[n] - x[m] * d_r[m]
    return dn @ dn, 2.0 * (dn @ off), off @ off - ref_len ** 2


def recover_root_depth(J2D, d_r, K, ref_bone=DEFAULT_REF_BONE, ref_len: float = 1.0) -> float:
    """Absolute root depth from a known bone length.

    Solves ``|x_n (d_n + D) - x_m (d_m + D)| = ref_len`` for ``D`` with
    ``x = K^-1 (u, v, 1)`` and returns the larger root.
    """
    if not ref_len > 0:
        raise ValueError("reference length must be positive")
    a, b, c = root_depth_quadratic(J2D, d_r, K, ref_bone, ref_len)
    if a <= 0:
        raise ValueError("reference joints project to the same pixel; root depth is undetermined")
    disc = b * b - 4 * a * c
    if disc < 0:
        raise ValueError(f"negative discriminant ({disc:.3g}): inconsistent 2.5D inputs")
    root = (-b + math.sqrt(disc)) / (2 * a)
    if root <= 0:
        raise ValueError("no positive root depth")
    return root


def recover_root_depth_robust(J2D, d_r, K, ref_bone=DEFAULT_REF_BONE, ref_len: float = 1.0,
                              min_depth: float = 1.0) -> float:
    """Like :func:`recover_root_depth` but falls back to the least-residual depth.

    Used for network predictions, where the quadratic can lose its real roots.
    """
    try:
        return recover_root_depth(J2D, d_r, K, ref_bone, ref_len)
    except ValueError:
        a, b, _ = root_depth_quadratic(J2D, d_r, K, ref_bone, ref_len)
        d = -b / (2 * a) if a > 0 else min_depth
        return max(d, min_depth)


def lift_to_3d(J2D, d_r, d_root: float, K) -> np.ndarray:
    depth = np.asarray(d_r, dtype=np.float64) + d_root
    if np.any(depth <= 0):
        raise ValueError("non-positive absolute depth")
    return _rays(J2D, K) * depth[:, None]


# -- alignment and metrics ---------------------------------------------------------

def procrustes_transform(pred, gt):
    """Scale ``s``, rotation ``R`` and translation ``t`` minimizing ``|s pred R^T + t - gt|``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p, q = pred - mu_p, gt - mu_g
    var_p = np.sum(p * p)
    if len(pred) < 3 or var_p == 0:
        raise ValueError("procrustes needs at least 3 non-coincident points")
    spread = np.linalg.svd(p, compute_uv=False)
    if spread[1] <= 1e-12 * spread[0]:
        raise ValueError("degenerate (collinear) point configuration")
    u, sv, vt = np.linalg.svd(q.T @ p)
    d = np.ones(len(sv))
    d[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    R = u @ np.diag(d) @ vt
    s = float(np.sum(sv * d) / var_p)
    t = mu_g - s * mu_p @ R.T
    return s, R, t


def procrustes_align(pred, gt) -> np.ndarray:
    s, R, t = procrustes_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ R.T + t


@dataclass
class MetricReport:
    epe: float
    pa_epe: float
    auc: float
    pck: list
    epe_2d: float = float("nan")
    pa_auc: float = float("nan")
    space: str = "3d"
    n: int = 0
    thresholds: list = field(default_factory=lambda: PCK_THRESHOLDS.tolist())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False, indent=2)

    def record(self) -> str:
        """Flat ``key=value`` lines (the PCK curve is left to :meth:`pck_csv`)."""
        keys = ("space", "n", "epe", "pa_epe", "auc", "pa_auc", "epe_2d")
        return "\n".join(f"{k}={getattr(self, k)!r}" for k in keys) + "\n"

    CSV_FIELDS = ("space", "n", "epe", "pa_epe", "auc", "pa_auc", "epe_2d")

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    def pck_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "pck"])
        for t, p in zip(self.thresholds, self.pck):
            w.writerow([repr(float(t)), repr(float(p))])
        return buf.getvalue()


def pck_curve(dists, thresholds=PCK_THRESHOLDS) -> np.ndarray:
    d = np.asarray(dists, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("no distances")
    return np.array([np.mean(d < t) for t in thresholds])


def metrics(pred, gt, space: str = "3d", aligned: bool = False, pred_2d=None, gt_2d=None,
            thresholds=PCK_THRESHOLDS) -> MetricReport:
    """Keypoint errors for ``(N, J, D)`` predictions.

    ``epe`` is the mean euclidean distance, ``pa_epe`` the same after per-sample
    similarity alignment (3D only).  ``auc`` is the mean of the PCK values over
    ``thresholds`` (strict ``<``) computed on aligned distances when
    ``aligned`` is set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    dist = np.linalg.norm(pred - gt, axis=-1)
    if space == "3d":
        aligned_pred = np.stack([procrustes_align(p, g) for p, g in zip(pred, gt)])
        pa_dist = np.linalg.norm(aligned_pred - gt, axis=-1)
    elif space == "2d":
        pa_dist = dist
    else:
        raise ValueError(f"unknown space {space!r}")
    pck = pck_curve(dist, thresholds)
    pa_pck = pck_curve(pa_dist, thresholds)
    epe_2d = float("nan")
    if space == "2d":
        epe_2d = float(dist.mean())
    elif pred_2d is not None:
        epe_2d = float(np.linalg.norm(np.asarray(pred_2d) - np.asarray(gt_2d), axis=-1).mean())
    curve = pa_pck if aligned else pck
    return MetricReport(
        epe=float(dist.mean()), pa_epe=float(pa_dist.mean()), auc=float(curve.mean()),
        pck=curve.tolist(), epe_2d=epe_2d, pa_auc=float(pa_pck.mean()), space=space,
        n=int(len(pred)), thresholds=list(map(float, thresholds)))


def lift_predictions(J2D, d_r, K, ref_len, ref_bone=DEFAULT_REF_BONE) -> np.ndarray:
    """Batch lifting with robust root recovery; ``ref_len`` per sample."""
    out = []
    for j, d, k, L in zip(J2D, d_r, K, ref_len):
        root = recover_root_depth_robust(j, d, k, ref_bone, L)
        depth = np.maximum(d + root, 1e-3)
        out.append(_rays(j, k) * depth[:, None])
    return np.stack(out)


# -- equivariance ---------------------------------------------------------------------

Predictor = Callable[[np.ndarray], np.ndarray]  # (B, H, W, 3) -> (B, 21, 2)


def _image_transform(t_g: AffineTransform2D, side: int) -> AffineTransform2D:
    return AffineTransform2D(t_g.rotation_deg, t_g.translation, t_g.scale, (side / 2.0, side / 2.0))


def equivariance_error(model: Predictor, image: np.ndarray, t_g: AffineTransform2D) -> float:
    """``|| t_g f(I) - f(t_g I) ||_2`` over the flattened 2D keypoints (px)."""
    return float(equivariance_errors(model, np.asarray(image)[None], t_g)[0])


def equivariance_errors(model: Predictor, images: np.ndarray, t_g: AffineTransform2D) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    t = _image_transform(t_g, images.shape[1])
    base = np.asarray(model(images))
    warped = np.stack([apply_to_image(t, im) for im in images])
    moved = np.asarray(model(warped))
    expected = np.stack([apply_to_points(t, b) for b in base])
    return np.linalg.norm((expected - moved).reshape(len(images), -1), axis=1)


def rotation_grid(n: int = 17, limit: float = 80.0) -> list:
    return [AffineTransform2D(rotation_deg=float(a)) for a in np.linspace(-limit, limit, n)]


def translation_grid(n: int = 5, limit: float = 25.0) -> list:
    vals = np.linspace(-limit, limit, n)
    return [AffineTransform2D(translation=(float(x), float(y))) for y in vals for x in vals]


@dataclass
class ImprovementRow:
    rotation_deg: float
    tx: float
    ty: float
    l_equiv_a: float
    l_equiv_b: float
    l_improv: float
    n_used: int
    n_skipped: int


def equivariance_improvement(model_a: Predictor, model_b: Predictor, images: np.ndarray,
                             grid: Sequence[AffineTransform2D], eps: float = 1e-9) -> list:
    """Per grid point: mean errors and mean of ``(L_a - L_b) / L_a`` over images.

    Images where ``L_a < eps`` are skipped for the ratio and counted; a grid
    point where every image is skipped gets ``nan`` improvement.
    """
    rows = []
    for t in grid:
        la = equivariance_errors(model_a, images, t)
        lb = la if model_b is model_a else equivariance_errors(model_b, images, t)
        ok = la >= eps
        ratio = (la[ok] - lb[ok]) / la[ok]
        rows.append(ImprovementRow(
            t.rotation_deg, t.translation[0], t.translation[1], float(la.mean()), float(lb.mean()),
            float(ratio.mean()) if ok.any() else float("nan"), int(ok.sum()), int((~ok).sum())))
    return rows
