"""Sampling and applying composite augmentations ``t = t_g o t_a``.

Images are ``H x W x 3`` float arrays with values in ``[0, 255]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import AffineTransform2D, apply_to_image

# Names usable in compositions; the first four are the ones named in text,
# the remaining three are optional extras.
TRANSFORM_NAMES = ("scale", "rotation", "translation", "color_jitter", "color_drop", "blur", "noise")
GEOMETRIC = ("scale", "rotation", "translation")


@dataclass(frozen=True)
class Appearance:
    hue_scale: float = 1.0
    sat_scale: float = 1.0
    bright_scale: float = 1.0
    bright_bias: float = 0.0
    drop_color: bool = False
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    noise_seed: int = 0

    def is_identity(self) -> bool:
        return (self.hue_scale == 1 and self.sat_scale == 1 and self.bright_scale == 1
                and self.bright_bias == 0 and not self.drop_color
                and self.blur_sigma == 0 and self.noise_std == 0)


@dataclass(frozen=True)
class TransformSpec:
    geometric: AffineTransform2D = field(default_factory=AffineTransform2D)
    appearance: Appearance = field(default_factory=Appearance)


@dataclass
class AugmentConfig:
    scale: bool = True
    rotation: bool = True
    translation: bool = True
    color_jitter: bool = True
    color_drop: bool = False
    blur: bool = False
    noise: bool = False
    rotation_range: tuple = (-45.0, 45.0)
    translation_range: tuple = (-15.0, 15.0)
    scale_range: tuple = (0.6, 2.0)
    hue_range: tuple = (0.01, 1.0)
    sat_range: tuple = (0.01, 1.0)
    bright_scale_range: tuple = (0.5, 1.0)
    bright_bias_range: tuple = (5.0, 20.0)
    color_drop_prob: float = 0.2
    blur_sigma_range: tuple = (0.1, 1.5)
    noise_std_range: tuple = (1.0, 8.0)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            if f.name.endswith("_range"):
                lo, hi = getattr(self, f.name)
                if lo > hi:
                    raise ValueError(f"{f.name}: lower bound {lo} exceeds upper bound {hi}")
                object.__setattr__(self, f.name, (float(lo), float(hi)))
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        if not 0 <= self.color_drop_prob <= 1:
            raise ValueError("color_drop_prob must lie in [0, 1]")

    @property
    def enabled(self) -> tuple:
        return tuple(n for n in TRANSFORM_NAMES if getattr(self, n))

    def only(self, names: Iterable[str]) -> "AugmentConfig":
        """Copy with exactly ``names`` enabled."""
        names = set(names)
        unknown = names - set(TRANSFORM_NAMES)
        if unknown:
            raise ValueError(f"unknown transforms: {sorted(unknown)}")
        return replace(self, **{n: n in names for n in TRANSFORM_NAMES})


def pretrain_config(**overrides) -> AugmentConfig:
    return AugmentConfig(**overrides)


def finetune_config(**overrides) -> AugmentConfig:
    base = dict(rotation_range=(-90.0, 90.0), translation_range=(-20.0, 20.0),
                scale_range=(0.7, 1.3), color_jitter=False)
    base.update(overrides)
    return AugmentConfig(**base)


def sample_transform(rng: np.random.Generator, cfg: AugmentConfig, image_side: float) -> TransformSpec:
    """Draw one composite transform; disabled parts stay at identity.

    The draw order is fixed (and every draw is made whether or not the part
    is enabled) so that toggling one transform does not shift the others.
    """
    u = lambda r: rng.uniform(r[0], r[1])
    rot, tx, ty, sc = u(cfg.rotation_range), u(cfg.translation_range), u(cfg.translation_range), u(cfg.scale_range)
    hue, sat = u(cfg.hue_range), u(cfg.sat_range)
    bs, bb = u(cfg.bright_scale_range), u(cfg.bright_bias_range)
    drop = rng.random() < cfg.color_drop_prob
    sigma, nstd = u(cfg.blur_sigma_range), u(cfg.noise_std_range)
    nseed = int(rng.integers(0, 2**31 - 1))
    geo = AffineTransform2D(
        rotation_deg=rot if cfg.rotation else 0.0,
        translation=(tx, ty) if cfg.translation else (0.0, 0.0),
        scale=sc if cfg.scale else 1.0,
        center=(image_side / 2.0, image_side / 2.0),
    )
    jit = cfg.color_jitter
    app = Appearance(
        hue_scale=hue if jit else 1.0,
        sat_scale=sat if jit else 1.0,
        bright_scale=bs if jit else 1.0,
        bright_bias=bb if jit else 0.0,
        drop_color=bool(drop and cfg.color_drop),
        blur_sigma=sigma if cfg.blur else 0.0,
        noise_std=nstd if cfg.noise else 0.0,
        noise_seed=nseed if cfg.noise else 0,
    )
    return TransformSpec(geo, app)


# -- color -------------------------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] to HSV with all channels in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    h = np.where(r == maxc, ((g - b) / safe) % 6.0,
                 np.where(g == maxc, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6)
    f = h6 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


_LUMA = np.array([0.299, 0.587, 0.114])


def apply_appearance(spec, img: np.ndarray) -> np.ndarray:
    app = spec.appearance if isinstance(spec, TransformSpec) else spec
    out = np.asarray(img, dtype=np.float64)
    if app.hue_scale != 1 or app.sat_scale != 1:
        hsv = rgb_to_hsv(out / 255.0)
        hsv[..., 0] *= app.hue_scale
        hsv[..., 1] *= app.sat_scale
        out = hsv_to_rgb(hsv) * 255.0
    if app.bright_scale != 1 or app.bright_bias != 0:
        out = app.bright_scale * out + app.bright_bias
    if app.drop_color:
        gray = out @ _LUMA
        out = np.repeat(gray[..., None], 3, axis=-1)
    if app.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(app.blur_sigma, app.blur_sigma, 0), mode="nearest")
    if app.noise_std > 0:
        out = out + np.random.default_rng(app.noise_seed).normal(0.0, app.noise_std, out.shape)
    return np.clip(out, 0.0, 255.0)


def apply(spec: TransformSpec, img: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Appearance first, then geometry."""
    out = apply_appearance(spec, img) if not spec.appearance.is_identity() else np.asarray(img, dtype=np.float64).copy()
    if not spec.geometric.is_identity():
        out = apply_to_image(spec.geometric, out, fill=fill)
    return out
