"""Stochastic views: random resized crop, flip, colour jitter, grayscale, blur, normalize.

The transform order is fixed. Every random draw comes from the caller's
``numpy.random.Generator`` so a view is a pure function of
(patch, policy, generator state).
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy import ndimage

from .patch_sampler import box_filter_matrix

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class NormStats:
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]))


def compute_norm_stats(patches) -> NormStats:
    """Per-channel mean/std in [0, 1] units over (N, H, W, 3) uint8 patches."""
    x = np.asarray(patches, np.float64) / 255.0
    return NormStats(tuple(x.mean(axis=(0, 1, 2)).tolist()), tuple(x.std(axis=(0, 1, 2)).tolist()))


@dataclass
class AugmentPolicy:
    output_size: int = 32
    crop_scale_range: tuple = (0.2, 1.0)
    crop_ratio_range: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)
    # sigma range is quoted at this resolution and scaled to output_size
    blur_reference_size: int = 128

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale_range {self.crop_scale_range} must lie in (0, 1]")
        if self.output_size <= 0:
            raise ValueError("output_size must be positive")

    @classmethod
    def disabled(cls, output_size=32):
        return cls(
            output_size=output_size,
            crop_scale_range=(1.0, 1.0),
            crop_ratio_range=(1.0, 1.0),
            flip_prob=0.0,
            jitter_prob=0.0,
            grayscale_prob=0.0,
            blur_prob=0.0,
        )

    def to_text(self):
        """Flat ``key=value`` lines, as embedded in run configs."""
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ValueError(f"unknown augmentation key {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kw[key] = tuple(float(x) for x in val.split(","))
            elif isinstance(default, int):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        return cls(**kw)


def _sample_crop(h, w, policy, rng):
    area = h * w
    lo, hi = policy.crop_scale_range
    rlo, rhi = policy.crop_ratio_range
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(math.log(rlo), math.log(rhi)))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            return y0, x0, ch, cw
    # fallback: centered crop, never zero area
    s = max(1, min(h, w))
    return (h - s) // 2, (w - s) // 2, s, s


@functools.lru_cache(maxsize=4096)
def _bilinear_matrix(src, dst):
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0, src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    f = pos - i0
    m[np.arange(dst), i0] += 1 - f
    m[np.arange(dst), i1] += f
    m.flags.writeable = False
    return m


def _resize_matrix(src, dst):
    return box_filter_matrix(src, dst) if src >= dst else _bilinear_matrix(src, dst)


def resize(img, size):
    """Resize an (H, W, C) float image: box filter when shrinking, bilinear when enlarging."""
    h, w = img.shape[:2]
    if h == size and w == size:
        return img
    ry = _resize_matrix(h, size)
    rx = _resize_matrix(w, size)
    return np.tensordot(np.tensordot(ry, img, axes=(1, 0)), rx, axes=(1, 1)).transpose(0, 2, 1)


def _gray(x):
    return x @ GRAY_WEIGHTS


def rgb_to_hsv(x):
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    maxc = x.max(-1)
    minc = x.min(-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], -1)


def hsv_to_rgb(x):
    h, s, v = x[..., 0], x[..., 1], x[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], -1)


def _color_jitter(x, policy, rng):
    fb = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    fc = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
    fs = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
    dh = rng.uniform(-policy.hue, policy.hue)
    x = np.clip(x * fb, 0, 1)
    m = _gray(x).mean()
    x = np.clip((x - m) * fc + m, 0, 1)
    g = _gray(x)[..., None]
    x = np.clip((x - g) * fs + g, 0, 1)
    if dh != 0:
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        x = hsv_to_rgb(hsv)
    return x


def apply_policy(patch, policy: AugmentPolicy, rng, stats: Optional[NormStats] = None):
    """Return one normalized (3, S, S) float32 view of an (H, W, 3) uint8 patch."""
    stats = stats or NormStats()
    img = np.asarray(patch, np.float64) / 255.0
    h, w = img.shape[:2]
    y0, x0, ch, cw = _sample_crop(h, w, policy, rng)
    x = resize(img[y0:y0 + ch, x0:x0 + cw], policy.output_size)
    if rng.random() < policy.flip_prob:
        x = x[:, ::-1]
    if rng.random() < policy.jitter_prob:
        x = _color_jitter(x, policy, rng)
    if rng.random() < policy.grayscale_prob:
        x = np.repeat(_gray(x)[..., None], 3, axis=2)
    if rng.random() < policy.blur_prob:
        lo, hi = policy.blur_sigma_range
        sigma = rng.uniform(lo, hi) * policy.output_size / policy.blur_reference_size
        x = ndimage.gaussian_filter(x, (sigma, sigma, 0), mode="reflect")
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


@dataclass
class AugmentedTriplet:
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray


def make_triplet(m1, m2, policy, rng, stats=None) -> AugmentedTriplet:
    """Two views of the anchor ``m1`` and one of the neighbour ``m2``."""
    r1, r2, r3 = rng.spawn(3)
    return AugmentedTriplet(
        apply_policy(m1, policy, r1, stats),
        apply_policy(m1, policy, r2, stats),
        apply_policy(m2, policy, r3, stats),
    )


def make_pair_views(patch, policy, rng, stats=None):
    r1, r2 = rng.spawn(2)
    return apply_policy(patch, policy, r1, stats), apply_policy(patch, policy, r2, stats)


def to_view(patch, size, stats: Optional[NormStats] = None):
    """Deterministic evaluation view: resize and normalize only."""
    return apply_policy(patch, AugmentPolicy.disabled(size), np.random.default_rng(0), stats)
