"""Fourteen seeded common corruptions for small images.

All functions take an ``H x W x C`` float image in ``[0, 1]`` and return a
new image of the same shape, also in ``[0, 1]``.  Randomness comes only from
``CorruptionSpec.seed`` so identical specs give bitwise-identical outputs.

Severity tables are sized for 32x32 images.  The noise, blur, brightness,
contrast and JPEG kinds get monotonically stronger with severity; the
weather overlays (rain, snow, frost, fog) are procedural and only roughly so.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, ShapeError

# The first five are the kinds named explicitly in the method description.
REGISTRY = (
    "rain",
    "snow",
    "frost",
    "gaussian_noise",
    "elastic_transform",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "zoom_blur",
    "fog",
    "brightness",
    "contrast",
    "jpeg_compression",
)

SEVERITIES = (1, 2, 3, 4, 5)

SEVERITY_TABLE = {
    "gaussian_noise": {"sigma": (0.04, 0.08, 0.12, 0.15, 0.18)},
    "shot_noise": {"photons": (60, 25, 12, 5, 3)},
    "impulse_noise": {"fraction": (0.01, 0.03, 0.06, 0.10, 0.17)},
    "defocus_blur": {"radius_px": (1, 2, 3, 4, 6)},
    "motion_blur": {"length_px": (3, 5, 7, 9, 11)},
    "zoom_blur": {"max_scale": (1.06, 1.11, 1.16, 1.21, 1.26)},
    "snow": {"flake_density": (0.02, 0.035, 0.05, 0.07, 0.09),
             "whitening": (0.1, 0.2, 0.3, 0.4, 0.5)},
    "frost": {"image_weight": (1.0, 0.8, 0.7, 0.65, 0.6),
              "frost_weight": (0.4, 0.6, 0.7, 0.7, 0.75)},
    "fog": {"opacity": (0.15, 0.25, 0.35, 0.45, 0.55)},
    "rain": {"drops": (20, 35, 50, 70, 95), "length_px": (3, 4, 5, 6, 8)},
    "brightness": {"offset": (0.05, 0.10, 0.15, 0.20, 0.30)},
    "contrast": {"factor": (0.75, 0.6, 0.45, 0.3, 0.2)},
    "elastic_transform": {"displacement_px": (2, 3, 4, 6, 8), "smoothing_sigma_px": (4, 4, 4, 4, 4)},
    "jpeg_compression": {"quality": (80, 65, 50, 35, 20)},
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in REGISTRY:
            raise ConfigurationError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ConfigurationError(f"severity must be in 1..5, got {self.severity}")

    def as_dict(self):
        return {"kind": self.kind, "severity": int(self.severity), "seed": int(self.seed)}


def corruption_registry():
    """The 14 corruption kinds in their fixed selection order."""
    return list(REGISTRY)


def pick_random_corruption(rng) -> CorruptionSpec:
    """Uniform kind, uniform severity, and a fresh 63-bit seed, all from ``rng``."""
    kind = REGISTRY[int(rng.integers(len(REGISTRY)))]
    severity = int(rng.integers(1, 6))
    seed = int(rng.integers(0, 2**63 - 1))
    return CorruptionSpec(kind, severity, seed)


def param(kind, name, severity):
    return SEVERITY_TABLE[kind][name][severity - 1]


# --- shared helpers --------------------------------------------------------

def _convolve(image, kernel):
    return ndimage.convolve(image, kernel[:, :, None], mode="nearest")


def _resample(image, rows, cols):
    """Bilinear lookup at fractional ``(rows, cols)`` with replicate edges."""
    return np.stack([
        ndimage.map_coordinates(image[:, :, c], [rows, cols], order=1, mode="nearest")
        for c in range(image.shape[2])
    ], axis=-1)


def _splat_line(canvas, r0, c0, length, angle, value=1.0):
    """Accumulate an anti-aliased line segment into ``canvas`` in place."""
    h, w = canvas.shape
    n = max(2, int(4 * length))
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, n)
    rr = r0 + t * math.sin(angle)
    cc = c0 + t * math.cos(angle)
    r_lo, c_lo = np.floor(rr).astype(int), np.floor(cc).astype(int)
    fr, fc = rr - r_lo, cc - c_lo
    per_point = value * length / n
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            ri, ci = r_lo + dr, c_lo + dc
            ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            np.add.at(canvas, (ri[ok], ci[ok]), (per_point * wr * wc)[ok])
    return canvas


def disk_kernel(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = ((yy ** 2 + xx ** 2) <= r ** 2).astype(np.float64)
    return k / k.sum()


def motion_kernel(length, angle):
    size = int(length) if length % 2 else int(length) + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2
    _splat_line(k, c, c, length, angle)
    return k / k.sum()


def plasma_fractal(size, rng, roughness=0.6):
    """Diamond-square height map on a ``(2^n + 1)``-sized grid, scaled to ``[0, 1]``."""
    n = 1
    while n + 1 < size:
        n *= 2
    grid = np.zeros((n + 1, n + 1))
    grid[::n, ::n] = rng.random((2, 2))
    step, scale = n, 1.0
    while step > 1:
        half = step // 2
        # diamond step: square centres
        centres = (grid[0:-1:step, 0:-1:step] + grid[0:-1:step, step::step]
                   + grid[step::step, 0:-1:step] + grid[step::step, step::step]) / 4
        grid[half::step, half::step] = centres + scale * (rng.random(centres.shape) - 0.5)
        # square step: edge midpoints
        for r0, c0 in ((0, half), (half, 0)):
            rows = np.arange(r0, n + 1, step)
            cols = np.arange(c0, n + 1, step)
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            total = np.zeros(rr.shape)
            count = np.zeros(rr.shape)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                r, c = rr + dr, cc + dc
                ok = (r >= 0) & (r <= n) & (c >= 0) & (c <= n)
                total[ok] += grid[r[ok], c[ok]]
                count[ok] += 1
            grid[rr, cc] = total / count + scale * (rng.random(rr.shape) - 0.5)
        step = half
        scale *= roughness
    grid -= grid.min()
    peak = grid.max()
    return grid / peak if peak > 0 else grid


def _gray(image):
    return image.mean(axis=2, keepdims=True)


# --- the fourteen kinds ----------------------------------------------------

def gaussian_noise(image, severity, rng):
    sigma = param("gaussian_noise", "sigma", severity)
    return image + sigma * rng.standard_normal(image.shape)


def shot_noise(image, severity, rng):
    lam = param("shot_noise", "photons", severity)
    return rng.poisson(image * lam) / lam


def impulse_noise(image, severity, rng):
    frac = param("impulse_noise", "fraction", severity)
    hit = rng.random(image.shape) < frac
    salt = (rng.random(image.shape) < 0.5).astype(np.float64)
    return np.where(hit, salt, image)


def defocus_blur(image, severity, rng):
    return _convolve(image, disk_kernel(param("defocus_blur", "radius_px", severity)))


def motion_blur(image, severity, rng):
    angle = rng.uniform(0.0, math.pi)
    return _convolve(image, motion_kernel(param("motion_blur", "length_px", severity), angle))


def zoom_blur(image, severity, rng):
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros_like(image)
    scales = np.linspace(1.0, param("zoom_blur", "max_scale", severity), 5)
    for s in scales:
        acc += _resample(image, cy + (rows - cy) / s, cx + (cols - cx) / s)
    return acc / len(scales)


def elastic_transform(image, severity, rng):
    h, w = image.shape[:2]
    mag = param("elastic_transform", "displacement_px", severity)
    sigma = param("elastic_transform", "smoothing_sigma_px", severity)
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma, mode="reflect")
        peak = np.abs(f).max()
        fields.append(mag * f / peak if peak > 0 else f)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    return _resample(image, rows + fields[0], cols + fields[1])


def snow(image, severity, rng):
    h, w = image.shape[:2]
    density = param("snow", "flake_density", severity)
    whitening = param("snow", "whitening", severity)
    flakes = np.where(rng.random((h, w)) < density, rng.uniform(0.6, 1.0, (h, w)), 0.0)
    streak = motion_kernel(3, rng.uniform(math.pi / 3, 2 * math.pi / 3))
    flakes = ndimage.convolve(flakes, streak, mode="constant") * 2.0
    base = (1 - whitening) * image + whitening * np.maximum(image, _gray(image) * 1.5 + 0.5)
    return base + flakes[:, :, None]


def frost(image, severity, rng):
    h, w = image.shape[:2]
    a = param("frost", "image_weight", severity)
    b = param("frost", "frost_weight", severity)
    crystals = np.zeros((h, w))
    for _ in range(int(0.08 * h * w)):
        _splat_line(crystals, rng.uniform(0, h), rng.uniform(0, w),
                    rng.uniform(2.0, 5.0), rng.uniform(0, math.pi), rng.uniform(0.3, 1.0))
    texture = 0.5 * ndimage.gaussian_filter(rng.random((h, w)), 1.0) + crystals
    texture = ndimage.gaussian_filter(texture, 0.5)
    texture = texture / max(texture.max(), 1e-12)
    tint = np.array([0.85, 0.92, 1.0][: image.shape[2]] + [1.0] * max(0, image.shape[2] - 3))
    return a * image + b * texture[:, :, None] * tint


def fog(image, severity, rng):
    h, w = image.shape[:2]
    opacity = param("fog", "opacity", severity)
    haze = plasma_fractal(max(h, w), rng)[:h, :w]
    return (1 - opacity) * image + opacity * haze[:, :, None]


def rain(image, severity, rng):
    h, w = image.shape[:2]
    drops = param("rain", "drops", severity)
    length = param("rain", "length_px", severity)
    slant = math.pi / 2 + rng.uniform(-0.35, 0.35)
    streaks = np.zeros((h, w))
    for _ in range(drops):
        _splat_line(streaks, rng.uniform(0, h), rng.uniform(0, w),
                    length * rng.uniform(0.7, 1.3), slant, rng.uniform(0.4, 0.9))
    streaks = np.clip(ndimage.gaussian_filter(streaks, 0.4), 0.0, 1.0)
    darkened = image * (1.0 - 0.03 * severity)
    return darkened * (1 - streaks[:, :, None]) + 0.85 * streaks[:, :, None]


def brightness(image, severity, rng):
    return image + param("brightness", "offset", severity)


def contrast(image, severity=None, rng=None, factor=None):
    """Scale deviations from each channel's mean; ``factor=1`` is the identity."""
    c = param("contrast", "factor", severity) if factor is None else factor
    means = image.mean(axis=(0, 1), keepdims=True)
    return (image - means) * c + means


def jpeg_compression(image, severity=None, rng=None, quality=None):
    q = param("jpeg_compression", "quality", severity) if quality is None else quality
    return jpeg_roundtrip(image, q)


def jpeg_roundtrip(image, quality):
    channels = image.shape[2]
    if channels not in (1, 3):
        raise ShapeError("JPEG needs 1 or 3 channels")
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    pil = Image.fromarray(u8[:, :, 0] if channels == 1 else u8, mode="L" if channels == 1 else "RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf), dtype=np.float64) / 255.0
    return out.reshape(image.shape)


_DISPATCH = {
    "gaussian_noise": gaussian_noise,
    "shot_noise": shot_noise,
    "impulse_noise": impulse_noise,
    "defocus_blur": defocus_blur,
    "motion_blur": motion_blur,
    "zoom_blur": zoom_blur,
    "snow": snow,
    "frost": frost,
    "fog": fog,
    "rain": rain,
    "brightness": brightness,
    "contrast": contrast,
    "elastic_transform": elastic_transform,
    "jpeg_compression": jpeg_compression,
}


def apply_corruption(image, spec: CorruptionSpec):
    """Corrupt one ``H x W x C`` image according to ``spec``.

    Raises:
        ConfigurationError: ``spec.kind`` is not in the registry.
    """
    fn = _DISPATCH.get(getattr(spec, "kind", None))
    if fn is None:
        raise ConfigurationError(f"unknown corruption kind {getattr(spec, 'kind', spec)!r}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got {image.shape}")
    rng = np.random.default_rng(spec.seed)
    return np.clip(fn(image, spec.severity, rng), 0.0, 1.0)


def severity_table_text():
    """Human-readable dump of every severity table (used by the CLI)."""
    lines = []
    for kind in REGISTRY:
        for name, values in SEVERITY_TABLE[kind].items():
            lines.append(f"{kind:18s} {name:20s} " + "  ".join(str(v) for v in values))
    return "\n".join(lines)
