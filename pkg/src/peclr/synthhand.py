"""Procedural articulated hands with exact 3D / 2D / depth labels.

Joint order follows the usual 21-keypoint convention: wrist, then thumb,
index, middle, ring, pinky, each listed base-to-tip (4 joints per finger).
Lengths are in cm, the camera frame has +z pointing away from the camera
and image ``y`` pointing down.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import zoom

from .seeding import substream

N_JOINTS = 21
ROOT = 0
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
RASTER_MAGIC = b"SHRS"
FORMAT_VERSION = 1


def finger_joints(f: int) -> list:
    return [1 + 4 * f + k for k in range(4)]


PARENTS = np.array([-1] + [0 if k == 0 else 1 + 4 * f + k - 1 for f in range(5) for k in range(4)])


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _rot(axis, angle_rad):
    """Rodrigues rotation matrix."""
    a = _unit(axis)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1 - math.cos(angle_rad)) * (k @ k)


@dataclass
class HandSkeleton:
    """Hand model in its local frame: palm in the x-y plane, fingers along +y.

    ``base`` holds the local position of each finger's first joint,
    ``phalanges`` the three distal bone lengths per finger, ``rest_dir`` the
    straight-finger direction and ``normal`` the axis fingers abduct around.
    Limits are ``(lo, hi)`` degrees for abduction and the three flexions.
    """
    base: np.ndarray = field(default_factory=lambda: np.array([
        [1.9, 2.4, 0.0], [2.4, 8.6, 0.0], [0.7, 9.0, 0.0], [-1.1, 8.6, 0.0], [-2.7, 7.7, 0.0]]))
    phalanges: np.ndarray = field(default_factory=lambda: np.array([
        [4.0, 3.2, 2.6], [4.0, 2.4, 2.0], [4.4, 2.8, 2.1], [4.1, 2.6, 2.0], [3.3, 1.9, 1.8]]))
    rest_dir: np.ndarray = field(default_factory=lambda: np.array([
        [0.75, 0.6, 0.28], [0.1, 1.0, 0.0], [0.0, 1.0, 0.0], [-0.1, 1.0, 0.0], [-0.22, 1.0, 0.0]]))
    normal: np.ndarray = field(default_factory=lambda: np.array([
        [-0.3, 0.3, 0.9], [0, 0, 1.0], [0, 0, 1.0], [0, 0, 1.0], [0, 0, 1.0]]))
    abduction_limits: np.ndarray = field(default_factory=lambda: np.array([
        [-20.0, 25.0], [-15.0, 15.0], [-10.0, 10.0], [-12.0, 12.0], [-18.0, 18.0]]))
    flexion_limits: np.ndarray = field(default_factory=lambda: np.array([
        [[0.0, 50.0], [0.0, 55.0], [0.0, 70.0]],
        [[0.0, 85.0], [0.0, 100.0], [0.0, 70.0]],
        [[0.0, 85.0], [0.0, 100.0], [0.0, 70.0]],
        [[0.0, 85.0], [0.0, 100.0], [0.0, 70.0]],
        [[0.0, 85.0], [0.0, 100.0], [0.0, 70.0]]]))
    parents: np.ndarray = field(default_factory=lambda: PARENTS.copy())

    def __post_init__(self):
        self.rest_dir = np.array([_unit(d) for d in self.rest_dir])
        # make each abduction normal orthogonal to its finger direction
        self.normal = np.array([_unit(n - (n @ d) * d) for n, d in zip(self.normal, self.rest_dir)])
        if np.any(self.phalanges <= 0) or np.any(np.linalg.norm(self.base, axis=1) <= 0):
            raise ValueError("bone lengths must be positive")
        if self.parents[ROOT] != -1 or np.any(self.parents[1:] >= np.arange(1, N_JOINTS)):
            raise ValueError("parents must form a tree rooted at the wrist in topological order")

    @property
    def bone_lengths(self) -> np.ndarray:
        """Length of the bone ending at each joint (0 for the wrist)."""
        out = np.zeros(N_JOINTS)
        for f in range(5):
            j = finger_joints(f)
            out[j[0]] = np.linalg.norm(self.base[f])
            out[j[1:]] = self.phalanges[f]
        return out

    def lateral(self, f: int, abduction_deg: float) -> tuple:
        d = _rot(self.normal[f], math.radians(abduction_deg)) @ self.rest_dir[f]
        return d, _unit(np.cross(d, self.normal[f]))

    def sample_angles(self, rng: np.random.Generator) -> np.ndarray:
        """(5, 4) array: abduction then three flexions per finger, degrees."""
        lo = np.concatenate([self.abduction_limits[:, :1], self.flexion_limits[:, :, 0]], axis=1)
        hi = np.concatenate([self.abduction_limits[:, 1:], self.flexion_limits[:, :, 1]], axis=1)
        return rng.uniform(lo, hi)


def forward_kinematics(skel: HandSkeleton, angles: Optional[np.ndarray] = None) -> np.ndarray:
    """Local-frame joint positions (21 x 3) for ``angles`` from ``sample_angles``."""
    if angles is None:
        angles = np.zeros((5, 4))
    out = np.zeros((N_JOINTS, 3))
    for f in range(5):
        j = finger_joints(f)
        out[j[0]] = skel.base[f]
        d, lat = skel.lateral(f, angles[f, 0])
        bend = 0.0
        for k in range(3):
            bend += angles[f, k + 1]
            # positive flexion curls toward +normal (palm side)
            out[j[k + 1]] = out[j[k]] + skel.phalanges[f, k] * (_rot(lat, math.radians(bend)) @ d)
    return out


def _palm_frame(skel: HandSkeleton, J3D: np.ndarray) -> np.ndarray:
    """Rotation taking local coordinates to the frame of ``J3D`` (Kabsch on palm points)."""
    idx = [ROOT] + [finger_joints(f)[0] for f in range(5)]
    local = forward_kinematics(skel)[idx]
    obs = J3D[idx] - J3D[ROOT]
    u, _, vt = np.linalg.svd(obs.T @ local)
    dfix = np.diag([1, 1, np.sign(np.linalg.det(u @ vt))])
    return u @ dfix @ vt


def joint_angles(skel: HandSkeleton, J3D: np.ndarray) -> np.ndarray:
    """Recover the (5, 4) angle array from global joint positions."""
    rot = _palm_frame(skel, J3D)
    loc = (J3D - J3D[ROOT]) @ rot
    out = np.zeros((5, 4))
    for f in range(5):
        j = finger_joints(f)
        d0, n = skel.rest_dir[f], skel.normal[f]
        dirs = [_unit(loc[j[k + 1]] - loc[j[k]]) for k in range(3)]
        flat = dirs[0] - (dirs[0] @ n) * n
        flat = _unit(flat)
        out[f, 0] = math.degrees(math.atan2(np.cross(d0, flat) @ n, d0 @ flat))
        _, lat = skel.lateral(f, out[f, 0])
        prev = flat
        for k in range(3):
            cur = dirs[k]
            out[f, k + 1] = math.degrees(math.atan2(np.cross(prev, cur) @ lat, prev @ cur))
            prev = cur
    return out


def within_limits(skel: HandSkeleton, angles: np.ndarray, tol: float = 1e-6) -> bool:
    ab_ok = np.all((angles[:, 0] >= skel.abduction_limits[:, 0] - tol) & (angles[:, 0] <= skel.abduction_limits[:, 1] + tol))
    fl = angles[:, 1:]
    fl_ok = np.all((fl >= skel.flexion_limits[:, :, 0] - tol) & (fl <= skel.flexion_limits[:, :, 1] + tol))
    return bool(ab_ok and fl_ok)


# Camera frame: local x -> image right, local y (fingers) -> image up,
# local +z (palm side) -> toward the camera.
_LOCAL_TO_CAMERA = np.diag([1.0, -1.0, -1.0])


def default_intrinsics(size: int) -> np.ndarray:
    f = 1.2 * size
    return np.array([[f, 0.0, size / 2.0], [0.0, f, size / 2.0], [0.0, 0.0, 1.0]])


def sample_pose(rng: np.random.Generator, skel: HandSkeleton, depth_range=(30.0, 60.0),
                tilt_deg: float = 35.0, center_jitter: float = 0.06) -> np.ndarray:
    """Random articulated hand in camera coordinates (21 x 3, cm)."""
    angles = skel.sample_angles(rng)
    local = forward_kinematics(skel, angles)
    roll = rng.uniform(-180.0, 180.0)
    tx, ty = rng.uniform(-tilt_deg, tilt_deg, size=2)
    rot = _rot([0, 0, 1], math.radians(roll)) @ _rot([1, 0, 0], math.radians(tx)) @ _rot([0, 1, 0], math.radians(ty))
    rel = local @ (rot @ _LOCAL_TO_CAMERA).T
    depth = rng.uniform(*depth_range)
    jx, jy = rng.uniform(-center_jitter, center_jitter, size=2)
    c = rel.mean(axis=0)
    root = np.array([-c[0] + jx * depth, -c[1] + jy * depth, depth])
    return rel + root


def project(K: np.ndarray, J3D: np.ndarray) -> np.ndarray:
    J3D = np.asarray(J3D, dtype=np.float64)
    if np.any(J3D[:, 2] <= 0):
        raise ValueError("joint behind camera")
    uvw = J3D @ K.T
    return uvw[:, :2] / uvw[:, 2:3]


@dataclass
class PoseSample:
    image: np.ndarray
    J3D: np.ndarray
    J2D: np.ndarray
    d_r: np.ndarray
    K: np.ndarray
    labeled: bool = True

    @property
    def root_depth(self) -> float:
        return float(self.J3D[ROOT, 2])


# render style; radii are cm for (wrist-MCP, proximal, middle, distal) bones
BONE_RADII = (2.5, 1.7, 1.7, 1.4)
PALM_RADIUS = 2.4
TEXTURE_AMP = (3.0, 15.0)


def _background(rng, size):
    base = rng.uniform(20, 235, size=3)
    coarse = rng.normal(0, 1, size=(4, 4, 3))
    tex = zoom(coarse, (size / 4, size / 4, 1), order=1, mode="nearest")[:size, :size]
    amp = rng.uniform(*TEXTURE_AMP)
    img = base + amp * tex
    # a couple of soft stripes for texture
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(2):
        th = rng.uniform(0, math.pi)
        freq = rng.uniform(1.0, 4.0) * 2 * math.pi / size
        img += rng.uniform(0, 15) * np.sin(freq * (xs * math.cos(th) + ys * math.sin(th)) + rng.uniform(0, 6.3))[..., None]
    return img


_FINGER_TINT = np.array([[18, -6, -10], [0, 10, -8], [-10, 0, 12], [10, -12, 8], [-14, 8, 0]], dtype=float)


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = ab @ ab
    t = np.zeros_like(px) if denom == 0 else np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render(J3D: np.ndarray, K: np.ndarray, size: int, style_seed: int, labeled: bool = True) -> PoseSample:
    """Draw the hand as anti-aliased capsules over a textured background."""
    J3D = np.asarray(J3D, dtype=np.float64)
    J2D = project(K, J3D)
    d_r = J3D[:, 2] - J3D[ROOT, 2]
    rng = np.random.default_rng(style_seed)
    img = _background(rng, size)
    skin = rng.uniform(140, 235)
    skin = np.array([skin, skin * rng.uniform(0.62, 0.8), skin * rng.uniform(0.45, 0.65)])
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    fx = K[0, 0]
    zmin, zmax = J3D[:, 2].min(), J3D[:, 2].max()

    prims = []  # (depth, a2d, b2d, radius_cm, color)
    mcps = [finger_joints(f)[0] for f in range(5)]
    for f in range(5):
        j = [ROOT] + finger_joints(f)
        for k in range(4):
            a, b = j[k], j[k + 1]
            prims.append((0.5 * (J3D[a, 2] + J3D[b, 2]), a, b, BONE_RADII[k], skin + _FINGER_TINT[f]))
    for a, b in zip(mcps[1:-1], mcps[2:]):
        prims.append((0.5 * (J3D[a, 2] + J3D[b, 2]), a, b, PALM_RADIUS, skin))
    prims.sort(key=lambda p: -p[0])
    for depth, a, b, radius, color in prims:
        r_px = fx * radius / depth
        dist = _segment_distance(xs, ys, J2D[a], J2D[b])
        alpha = np.clip(r_px - dist + 0.5, 0.0, 1.0)[..., None]
        shade = 1.0 - 0.35 * (depth - zmin) / max(zmax - zmin, 1e-6)
        img = img * (1 - alpha) + alpha * np.clip(color * shade, 0, 255)
    return PoseSample(np.clip(img, 0, 255), J3D, J2D, d_r, K.copy(), labeled)


# -- on-disk datasets ----------------------------------------------------------

def write_raster(path, img_u8: np.ndarray):
    h, w, c = img_u8.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(img_u8, dtype=np.uint8).tobytes())


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: not a raster file")
    h, w, c = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != h * w * c:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def generate_sample(seed: int, index: int, size: int, skel: Optional[HandSkeleton] = None,
                    labeled: bool = True) -> PoseSample:
    skel = skel or HandSkeleton()
    rng = substream(seed, "dataset", index)
    J3D = sample_pose(rng, skel)
    style = int(rng.integers(0, 2**31 - 1))
    return render(J3D, default_intrinsics(size), size, style, labeled)


def make_dataset(n: int, seed: int, labeled_fraction: float, out, size: int = 64) -> Path:
    """Write ``n`` samples under ``out`` and return the manifest path."""
    if not 0 <= labeled_fraction <= 1:
        raise ValueError("labeled_fraction must lie in [0, 1]")
    if n < 0:
        raise ValueError("n must be non-negative")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_lab = int(math.floor(n * labeled_fraction))
    lines = []
    for i in range(n):
        s = generate_sample(seed, i, size, labeled=i < n_lab)
        write_raster(out / "images" / f"{i:06d}.raw", np.rint(s.image).astype(np.uint8))
        lines.append(json.dumps({
            "index": i, "image": f"images/{i:06d}.raw", "labeled": s.labeled,
            "J3D": s.J3D.tolist(), "J2D": s.J2D.tolist(), "d_r": s.d_r.tolist(), "K": s.K.tolist(),
        }))
    (out / "labels.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    manifest = out / "index.json"
    manifest.write_text(json.dumps({
        "format_version": FORMAT_VERSION, "generator": "synthhand", "n": n, "seed": seed,
        "labeled_fraction": labeled_fraction, "n_labeled": n_lab, "size": size,
        "labels": "labels.jsonl",
    }, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class HandDataset:
    """In-memory dataset; images kept as uint8 to bound memory."""
    images: np.ndarray
    J3D: np.ndarray
    J2D: np.ndarray
    d_r: np.ndarray
    K: np.ndarray
    labeled: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    @property
    def size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, idx) -> "HandDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return HandDataset(self.images[idx], self.J3D[idx], self.J2D[idx], self.d_r[idx],
                           self.K[idx], self.labeled[idx], dict(self.meta))

    def sample(self, i: int) -> PoseSample:
        return PoseSample(self.images[i].astype(np.float64), self.J3D[i], self.J2D[i],
                          self.d_r[i], self.K[i], bool(self.labeled[i]))


def load_dataset(path) -> HandDataset:
    path = Path(path)
    root = path.parent if path.is_file() else path
    manifest = root / "index.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    meta = json.loads(manifest.read_text())
    recs = [json.loads(l) for l in (root / meta["labels"]).read_text().splitlines() if l.strip()]
    size = int(meta["size"])
    images = np.zeros((len(recs), size, size, 3), dtype=np.uint8)
    for k, r in enumerate(recs):
        images[k] = read_raster(root / r["image"])
    arr = lambda key, shape: np.array([r[key] for r in recs], dtype=np.float64).reshape((len(recs),) + shape)
    return HandDataset(images, arr("J3D", (21, 3)), arr("J2D", (21, 2)), arr("d_r", (21,)),
                       arr("K", (3, 3)), np.array([bool(r["labeled"]) for r in recs]), meta)


def generate_in_memory(n: int, seed: int, size: int = 64, labeled_fraction: float = 1.0) -> HandDataset:
    """Same samples as :func:`make_dataset` without touching disk (quantized identically)."""
    n_lab = int(math.floor(n * labeled_fraction))
    samples = [generate_sample(seed, i, size, labeled=i < n_lab) for i in range(n)]
    return HandDataset(
        np.array([np.rint(s.image).astype(np.uint8) for s in samples]).reshape(n, size, size, 3),
        np.array([s.J3D for s in samples]).reshape(n, 21, 3),
        np.array([s.J2D for s in samples]).reshape(n, 21, 2),
        np.array([s.d_r for s in samples]).reshape(n, 21),
        np.array([s.K for s in samples]).reshape(n, 3, 3),
        np.array([s.labeled for s in samples], dtype=bool),
        {"n": n, "seed": seed, "size": size, "labeled_fraction": labeled_fraction},
    )
