"""Transferable projected-gradient attack.

One iteration does, in order:

1. random resize-and-pad of ``x + delta`` (input diversification),
2. gradient of the ensemble logit loss ``-Z[t]`` at the transformed image,
   pulled back through the (linear) transform onto ``delta``,
3. momentum accumulation of the l1-normalised gradient,
4. Gaussian smoothing of the accumulated direction,
5. a sign (l-inf) or l2-normalised (l2) step and projection onto the budget.

With ``momentum_mu=0``, ``kernel_size=1`` and ``diversify_prob=0`` this is
plain PGD.  Images are never clipped to ``[0, 1]`` inside the loop; the
l2 and l-inf perturbations are summed and clipped once in
:func:`combine_dual_norm`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ShapeError
from .models import ImageBatch, as_ensemble, input_gradient

Norm = Literal["linf", "l2"]
NORMS = ("linf", "l2")


@dataclass(frozen=True)
class PerturbationBudget:
    """Norm ball and step schedule, in ``[0, 1]`` pixel units."""

    norm: Norm = "linf"
    epsilon: float = 8 / 255
    step_alpha: float = 2 / 255
    iterations: int = 20

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigurationError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be >= 0")
        if not self.step_alpha > 0:
            raise ConfigurationError("step_alpha must be > 0")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigurationError("iterations must be a non-negative integer")


# Full-fidelity settings; the desk preset only lowers ``iterations``.
FULL_LINF = PerturbationBudget("linf", 8 / 255, 2 / 255, 300)
FULL_L2 = PerturbationBudget("l2", 1.0, 0.025, 300)
DESK_LINF = PerturbationBudget("linf", 8 / 255, 2 / 255, 20)
DESK_L2 = PerturbationBudget("l2", 1.0, 0.025, 20)


@dataclass(frozen=True)
class AttackConfig:
    momentum_mu: float = 1.0
    kernel_size: int = 5
    kernel_sigma: float = 3.0
    diversify_prob: float = 0.7
    resize_low_fraction: float = 0.9
    loss: str = "logit"
    seed: int = 0

    def __post_init__(self):
        if self.momentum_mu < 0:
            raise ConfigurationError("momentum_mu must be >= 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be an odd integer >= 1")
        if not self.kernel_sigma > 0:
            raise ConfigurationError("kernel_sigma must be > 0")
        if not 0.0 <= self.diversify_prob <= 1.0:
            raise ConfigurationError("diversify_prob must lie in [0, 1]")
        if not 0.0 < self.resize_low_fraction <= 1.0:
            raise ConfigurationError("resize_low_fraction must lie in (0, 1]")
        if self.loss not in ("logit", "cross_entropy"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")


# --- norms and projections -------------------------------------------------

def _sample_axes(a):
    """Reduction axes: everything but the leading sample axis (1-D = one sample)."""
    return tuple(range(1, a.ndim)) if a.ndim > 1 else (0,)


def _per_sample(values, a):
    return values.reshape(values.shape + (1,) * (a.ndim - values.ndim)) if a.ndim > 1 else values


def perturbation_norm(delta, norm):
    delta = np.asarray(delta, dtype=np.float64)
    axes = _sample_axes(delta)
    if norm == "linf":
        return np.abs(delta).max(axis=axes) if delta.size else np.zeros(len(delta))
    if norm == "l2":
        return np.sqrt((delta ** 2).sum(axis=axes))
    raise ConfigurationError(f"unknown norm {norm!r}")


def project_linf(delta, epsilon):
    """Clamp every coordinate to ``[-epsilon, epsilon]``."""
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def project_l2(delta, epsilon):
    """Rescale samples whose l2 norm exceeds ``epsilon`` back onto the sphere."""
    delta = np.asarray(delta, dtype=np.float64)
    norms = perturbation_norm(delta, "l2")
    scale = np.ones_like(norms)
    outside = norms > epsilon
    scale[outside] = epsilon / norms[outside]
    return delta * _per_sample(scale, delta)


def project(delta, budget: PerturbationBudget):
    if budget.norm == "linf":
        return project_linf(delta, budget.epsilon)
    return project_l2(delta, budget.epsilon)


def step_direction(gradient, norm):
    """``sign(g)`` for l-inf, ``g / ||g||_2`` per sample for l2; zero maps to zero."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if norm == "linf":
        return np.sign(gradient)
    if norm == "l2":
        norms = perturbation_norm(gradient, "l2")
        safe = np.where(norms > 0, norms, 1.0)
        return np.where(_per_sample(norms, gradient) > 0, gradient / _per_sample(safe, gradient), 0.0)
    raise ConfigurationError(f"unknown norm {norm!r}")


def momentum_update(g_prev, gradient, mu):
    """``mu * g_prev + gradient / ||gradient||_1`` with the l1 norm taken per sample."""
    gradient = np.asarray(gradient, dtype=np.float64)
    l1 = np.abs(gradient).sum(axis=_sample_axes(gradient))
    safe = np.where(l1 > 0, l1, 1.0)
    normalized = np.where(_per_sample(l1, gradient) > 0, gradient / _per_sample(safe, gradient), 0.0)
    return mu * np.asarray(g_prev, dtype=np.float64) + normalized


# --- smoothing -------------------------------------------------------------

def gaussian_kernel(size, sigma):
    """Normalised ``size x size`` Gaussian centred on the middle tap."""
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise ConfigurationError("sigma must be > 0")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def smooth_gradient(gradient, kernel):
    """Per-channel same-size convolution with replicate edges.

    Accepts a single ``H x W x C`` field or an ``N x H x W x C`` batch.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape == (1, 1):
        return gradient * kernel[0, 0]
    h, w = gradient.shape[-3:-1]
    if kernel.shape[0] > h or kernel.shape[1] > w:
        raise ConfigurationError(f"kernel {kernel.shape} larger than image {(h, w)}")
    weights = kernel.reshape((1,) * (gradient.ndim - 3) + kernel.shape + (1,))
    return ndimage.convolve(gradient, weights, mode="nearest")


# --- input diversification ------------------------------------------------

@lru_cache(maxsize=256)
def _resize_matrix(out_size, in_size):
    """Bilinear resampling matrix with half-pixel centres and edge clamping.

    Rows sum to one, so resampling keeps values inside the input's range.
    """
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class DiversityDraw:
    apply: bool
    height: int
    width: int
    top: int
    left: int


def sample_diversity(image_shape, prob, resize_low_fraction, rng):
    """Draw one resize-and-pad transform; always consumes four variates."""
    h, w = image_shape[:2]
    low = max(1, math.ceil(resize_low_fraction * h - 1e-9))
    u = rng.random()
    side = int(rng.integers(low, h + 1))
    new_w = max(1, min(w, round(side * w / h)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - new_w + 1))
    return DiversityDraw(bool(u < prob), side, new_w, top, left)


def apply_diversity(image, draw: DiversityDraw):
    if not draw.apply:
        return image
    h, w = image.shape[:2]
    rows = _resize_matrix(draw.height, h)
    cols = _resize_matrix(draw.width, w)
    c = image.shape[2]
    small = np.matmul(cols, (rows @ image.reshape(h, w * c)).reshape(draw.height, w, c))
    out = np.zeros_like(image, dtype=np.result_type(image, np.float64))
    out[draw.top:draw.top + draw.height, draw.left:draw.left + draw.width] = small
    return out


def diversity_adjoint(grad, draw: DiversityDraw):
    """Transpose of :func:`apply_diversity`; maps output gradients onto the input."""
    if not draw.apply:
        return grad
    h, w = grad.shape[:2]
    rows = _resize_matrix(draw.height, h)
    cols = _resize_matrix(draw.width, w)
    crop = grad[draw.top:draw.top + draw.height, draw.left:draw.left + draw.width]
    c = grad.shape[2]
    back = np.matmul(cols.T, crop).reshape(draw.height, w * c)
    return (rows.T @ back).reshape(h, w, c)


def _rng_list(rng, n):
    if isinstance(rng, np.random.Generator):
        return [rng] * n
    rngs = list(rng)
    if len(rngs) != n:
        raise ConfigurationError(f"{len(rngs)} generators for {n} images")
    return rngs


def diversify_input(batch, prob, resize_low_fraction, rng):
    """Randomly shrink each image and zero-pad it back at a random offset.

    Args:
        batch: ``N x H x W x C`` array or :class:`ImageBatch`.
        prob: chance that a given image is transformed.
        resize_low_fraction: smallest side as a fraction of ``H``.
        rng: one ``np.random.Generator`` shared by the batch (images drawn in
            order) or a sequence with one generator per image.

    Returns:
        Array (or ImageBatch, matching the input) of the same shape.
    """
    pixels = batch.pixels if isinstance(batch, ImageBatch) else np.asarray(batch)
    rngs = _rng_list(rng, len(pixels))
    out = np.stack([
        apply_diversity(img, sample_diversity(img.shape, prob, resize_low_fraction, r))
        for img, r in zip(pixels, rngs)
    ]) if len(pixels) else pixels.copy()
    if isinstance(batch, ImageBatch):
        return ImageBatch(out, batch.labels, batch.num_classes)
    return out


# --- the composed iteration ------------------------------------------------

def attack_iteration(x, delta, g_prev, labels, ensemble, budget: PerturbationBudget,
                     config: AttackConfig, rng, kernel=None):
    """One transferable-attack step.

    Returns:
        ``(delta_next, g)`` where ``g`` is the unsmoothed momentum buffer.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ShapeError(f"x {x.shape} and delta {delta.shape} differ")
    ensemble = as_ensemble(ensemble)
    if kernel is None:
        kernel = gaussian_kernel(config.kernel_size, config.kernel_sigma)
    rngs = _rng_list(rng, len(x))
    draws = [sample_diversity(x.shape[1:], config.diversify_prob, config.resize_low_fraction, r)
             for r in rngs]
    adv = x + delta
    transformed = np.stack([apply_diversity(a, d) for a, d in zip(adv, draws)])
    grad_t = np.asarray(input_gradient(ensemble, transformed, config.loss, labels), dtype=np.float64)
    grad = np.stack([diversity_adjoint(g, d) for g, d in zip(grad_t, draws)])
    g = momentum_update(g_prev, grad, config.momentum_mu)
    direction = step_direction(smooth_gradient(g, kernel), budget.norm)
    return project(delta + budget.step_alpha * direction, budget), g


def sample_rng(seed, index, stream=0):
    """Independent generator for one sample: keyed on ``(seed, stream, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream), int(index)]))


_NORM_STREAM = {"linf": 1, "l2": 2}


def random_init(shape, budget: PerturbationBudget, rng):
    """Uniform sample from the budget's ball for a single image."""
    if budget.norm == "linf":
        return rng.uniform(-budget.epsilon, budget.epsilon, size=shape)
    d = int(np.prod(shape))
    direction = rng.standard_normal(shape)
    nrm = np.linalg.norm(direction)
    radius = budget.epsilon * rng.random() ** (1.0 / d)
    return direction / nrm * radius if nrm > 0 else np.zeros(shape)


def run_attack(batch, ensemble, budget: PerturbationBudget, config: AttackConfig,
               sample_ids: Optional[Sequence[int]] = None, chunk_size=256):
    """Run ``budget.iterations`` attack steps from a random start in the ball.

    Each sample gets its own generator derived from ``(config.seed, norm,
    sample_id)``, so results do not depend on how a dataset is chunked.

    Returns:
        ``N x H x W x C`` float64 perturbations with norm at most ``epsilon``.
    """
    if not isinstance(batch, ImageBatch):
        raise ConfigurationError("run_attack needs an ImageBatch (labels are required)")
    pixels = np.asarray(batch.pixels, dtype=np.float64)
    labels = batch.labels
    if sample_ids is None:
        sample_ids = np.arange(len(pixels))
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    ensemble = as_ensemble(ensemble)
    kernel = gaussian_kernel(config.kernel_size, config.kernel_sigma)
    out = np.empty_like(pixels)
    for start in range(0, len(pixels), chunk_size):
        sl = slice(start, start + chunk_size)
        x = pixels[sl]
        rngs = [sample_rng(config.seed, i, _NORM_STREAM[budget.norm]) for i in sample_ids[sl]]
        delta = project(np.stack([random_init(x.shape[1:], budget, r) for r in rngs]), budget)
        g = np.zeros_like(x)
        for _ in range(budget.iterations):
            delta, g = attack_iteration(x, delta, g, labels[sl], ensemble, budget, config, rngs, kernel)
        out[sl] = delta
    return out


def combine_dual_norm(x, delta_l2, delta_linf) -> ImageBatch:
    """``clip(x + delta_l2 + delta_linf, 0, 1)``, labels carried over."""
    pixels = x.pixels if isinstance(x, ImageBatch) else np.asarray(x)
    if not (pixels.shape == np.shape(delta_l2) == np.shape(delta_linf)):
        raise ShapeError("image and perturbation shapes differ")
    adv = np.clip(pixels.astype(np.float64) + delta_l2 + delta_linf, 0.0, 1.0)
    if isinstance(x, ImageBatch):
        return ImageBatch(adv, x.labels.copy(), x.num_classes)
    return ImageBatch(adv, np.zeros(len(adv), dtype=np.int64))


def dual_norm_attack(batch: ImageBatch, ensemble, budget_l2, budget_linf, config, sample_ids=None):
    """Independent l2 and l-inf attacks on the same images, fused and clipped."""
    d2 = run_attack(batch, ensemble, budget_l2, config, sample_ids)
    dinf = run_attack(batch, ensemble, budget_linf, config, sample_ids)
    return combine_dual_norm(batch, d2, dinf), d2, dinf


def dump_perturbations(path, deltas, budget: PerturbationBudget, sample_ids=None):
    """Write raw float32 perturbations plus a JSON-lines audit manifest.

    Produces ``<path>.npy`` and ``<path>.jsonl`` (one record per sample with
    its index, norm, epsilon and achieved norm).
    """
    path = Path(path)
    deltas = np.asarray(deltas)
    if sample_ids is None:
        sample_ids = range(len(deltas))
    np.save(path.with_suffix(".npy"), deltas.astype(np.float32))
    achieved = perturbation_norm(deltas, budget.norm)
    with open(path.with_suffix(".jsonl"), "w", encoding="utf-8") as fh:
        for sid, a in zip(sample_ids, achieved):
            fh.write(json.dumps({"sample_index": int(sid), "norm": budget.norm,
                                 "epsilon": budget.epsilon, "achieved_norm": float(a)}) + "\n")
    return path.with_suffix(".npy"), path.with_suffix(".jsonl")


def budget_dict(budget):
    return asdict(budget)
