"""Procedural 10-class 32x32x3 image dataset in the CIFAR layout.

Each class is a shape family (disk, square, triangle, ...) drawn with a
random colour, size, position and rotation over a cluttered, textured
background.  It is a seeded stand-in for CIFAR-10 when the real files are
not available, and is hard enough that a small CNN trained for a few epochs
is both accurate on clean images and brittle under small perturbations.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

CLASS_NAMES = (
    "disk", "square", "triangle", "cross", "ring",
    "hbars", "vbars", "diagonal_x", "checker", "dots",
)

_SUPERSAMPLE = 3


def _shape_mask(cls, rr, cc, size, angle, rng):
    """Boolean mask of the class shape in coordinates centred on the object."""
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * cc + sa * rr
    v = -sa * cc + ca * rr
    r = np.hypot(u, v)
    s = size / 2
    if cls == 0:
        return r <= s
    if cls == 1:
        return (np.abs(u) <= s * 0.85) & (np.abs(v) <= s * 0.85)
    if cls == 2:
        return (v <= s * 0.7) & (v >= -s * 0.9 + 1.9 * np.abs(u))
    if cls == 3:
        arm = s * 0.3
        return ((np.abs(u) <= arm) & (np.abs(v) <= s)) | ((np.abs(v) <= arm) & (np.abs(u) <= s))
    if cls == 4:
        return (r <= s) & (r >= s * 0.55)
    if cls in (5, 6):
        along = v if cls == 5 else u
        across = u if cls == 5 else v
        period = max(size / 3.0, 2.5)
        return (np.abs(across) <= s) & (np.abs(along) <= s) & (np.mod(along + s, period) < period / 2)
    if cls == 7:
        arm = s * 0.25
        return (r <= s) & ((np.abs(u - v) <= arm * 1.4) | (np.abs(u + v) <= arm * 1.4))
    if cls == 8:
        cell = max(size / 4.0, 2.0)
        inside = (np.abs(u) <= s) & (np.abs(v) <= s)
        return inside & ((np.floor((u + s) / cell) + np.floor((v + s) / cell)) % 2 == 0)
    if cls == 9:
        off = s * 0.55
        rad = s * 0.38
        return (np.hypot(u - off, v) <= rad) | (np.hypot(u + off, v) <= rad)
    raise ValueError(cls)


def render_image(cls, rng, size=32):
    """One ``size x size x 3`` image of class ``cls``."""
    # background: smooth colour field plus clutter strokes
    base = rng.uniform(0.15, 0.85, 3)
    field = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), (4, 4, 0)) * 2.5
    img = np.clip(base + 0.35 * field, 0, 1)
    img += 0.04 * rng.standard_normal((size, size, 3))
    n = size * _SUPERSAMPLE
    grid = (np.arange(n) + 0.5) / _SUPERSAMPLE
    rr, cc = np.meshgrid(grid, grid, indexing="ij")
    for _ in range(int(rng.integers(1, 4))):
        colour = rng.uniform(0, 1, 3)
        r0, c0 = rng.uniform(0, size, 2)
        ang = rng.uniform(0, math.pi)
        d = np.abs(-(rr - r0) * math.cos(ang) + (cc - c0) * math.sin(ang))
        along = np.abs((rr - r0) * math.sin(ang) + (cc - c0) * math.cos(ang))
        stroke = ((d < 0.8) & (along < rng.uniform(4, 10))).reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
        img = img * (1 - 0.6 * stroke[..., None]) + 0.6 * stroke[..., None] * colour
    # foreground object, colour kept away from the background mean
    colour = rng.uniform(0, 1, 3)
    gap = colour - base
    if np.linalg.norm(gap) < 0.45:
        colour = np.clip(base - np.sign(gap + 1e-9) * 0.45, 0, 1)
    obj_size = rng.uniform(13, 20)
    cy, cx = size / 2 + rng.uniform(-4, 4, 2)
    angle = rng.uniform(-0.4, 0.4) if cls in (5, 6, 8) else rng.uniform(0, 2 * math.pi)
    mask = _shape_mask(cls, rr - cy, cc - cx, obj_size, angle, rng)
    cover = mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))[..., None]
    shade = 1.0 + 0.15 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 2)[..., None]
    img = img * (1 - cover) + cover * np.clip(colour * shade, 0, 1)
    img += 0.02 * rng.standard_normal((size, size, 3))
    return np.clip(img, 0, 1)


def make_shapes_dataset(n, seed=0, num_classes=10, size=32, balanced=True):
    """``n`` images and labels; balanced round-robin classes, then shuffled.

    Returns:
        ``(pixels, labels)`` with pixels quantised to multiples of 1/255 in
        float32 so that they survive a byte round trip exactly.
    """
    rng = np.random.default_rng(seed)
    if balanced:
        labels = np.arange(n) % num_classes
        rng.shuffle(labels)
    else:
        labels = rng.integers(0, num_classes, n)
    pixels = np.empty((n, size, size, 3), dtype=np.float32)
    for i, cls in enumerate(labels):
        pixels[i] = np.rint(render_image(int(cls), rng, size) * 255) / 255
    return pixels, labels.astype(np.int64)
