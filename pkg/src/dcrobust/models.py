"""Differentiable classifier contract, reference models and gradient oracles.

Every classifier maps an ``N x H x W x C`` float array to ``N x k`` logits.
Differentiable ones additionally implement ``logits_vjp``: the product of a
logit-space cotangent with the Jacobian of the logits with respect to the
input pixels.  Loss gradients, ensembles and attacks are all built on that
single primitive, so a numpy stub and a torch CNN are interchangeable.

Example:
    >>> cnn = ReferenceCNN(num_classes=10, seed=0)
    >>> x = np.random.default_rng(0).random((2, 32, 32, 3))
    >>> forward_logits(cnn, x).shape
    (2, 10)
"""

from __future__ import annotations

import copy
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    ConfigurationError,
    DataFormatError,
    ShapeError,
    UnsupportedOperationError,
)
from .losses import loss_logit_gradient, per_sample_loss

CIFAR_SHAPE = (32, 32, 3)


@dataclass
class ImageBatch:
    """``N`` labelled images with pixels in ``[0, 1]``, stored ``N x H x W x C``."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.pixels.ndim != 4 or min(self.pixels.shape[1:], default=0) < 1:
            raise ShapeError(f"pixels must be N x H x W x C, got {self.pixels.shape}")
        if not np.issubdtype(self.pixels.dtype, np.floating):
            raise DataFormatError(f"pixels must be floating point, got {self.pixels.dtype}")
        if len(self.labels) != len(self.pixels):
            raise ShapeError(
                f"{len(self.labels)} labels for {len(self.pixels)} images"
            )
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataFormatError("pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise DataFormatError("labels must be non-negative")
        if self.num_classes is not None and self.labels.size and self.labels.max() >= self.num_classes:
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.pixels)

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[1:])

    def one_hot(self, num_classes=None):
        k = num_classes or self.num_classes or int(self.labels.max()) + 1
        out = np.zeros((len(self.labels), k))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    def subset(self, index):
        return ImageBatch(self.pixels[index], self.labels[index], self.num_classes)


def _pixels_of(batch):
    return batch.pixels if isinstance(batch, ImageBatch) else np.asarray(batch)


class GradientClassifier(ABC):
    """A pure function from pixels to logits, optionally differentiable.

    Subclasses are treated as immutable once constructed; training returns a
    new instance instead of updating one in place.
    """

    name: str
    num_classes: int
    input_shape: Optional[tuple] = None

    @abstractmethod
    def logits(self, pixels: np.ndarray) -> np.ndarray:
        """Pre-softmax scores, ``N x k``."""

    def logits_vjp(self, pixels: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """``sum_j cotangent[n, j] * d logits[n, j] / d pixels[n]``, shaped like ``pixels``."""
        raise UnsupportedOperationError(f"{type(self).__name__} is not differentiable")

    def check_input(self, pixels):
        if pixels.ndim != 4:
            raise ShapeError(f"expected an N x H x W x C array, got shape {pixels.shape}")
        if self.input_shape is not None and tuple(pixels.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"{self.name} expects images of shape {tuple(self.input_shape)}, "
                f"got {tuple(pixels.shape[1:])}"
            )


class ConstantClassifier(GradientClassifier):
    """Returns the same logit row for every image; its input gradient is zero."""

    def __init__(self, logit_row, name="constant", input_shape=None):
        self.row = np.asarray(logit_row, dtype=np.float64).reshape(-1)
        self.num_classes = len(self.row)
        self.name = name
        self.input_shape = input_shape

    def logits(self, pixels):
        pixels = np.asarray(pixels)
        self.check_input(pixels)
        return np.tile(self.row, (len(pixels), 1))

    def logits_vjp(self, pixels, cotangent):
        pixels = np.asarray(pixels)
        self.check_input(pixels)
        return np.zeros(pixels.shape, dtype=np.float64)


class LinearClassifier(GradientClassifier):
    """``z = flatten(x) @ weight + bias`` in float64; the analytic test model."""

    def __init__(self, weight, bias=None, input_shape=None, name="linear"):
        self.weight = np.asarray(weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError("weight must be d x k")
        self.num_classes = self.weight.shape[1]
        self.bias = (
            np.zeros(self.num_classes) if bias is None else np.asarray(bias, dtype=np.float64)
        )
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.name = name

    def check_input(self, pixels):
        super().check_input(pixels)
        if int(np.prod(pixels.shape[1:])) != self.weight.shape[0]:
            raise ShapeError(
                f"{self.name} expects {self.weight.shape[0]} input values per image, "
                f"got {int(np.prod(pixels.shape[1:]))}"
            )

    def logits(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        self.check_input(pixels)
        return pixels.reshape(len(pixels), -1) @ self.weight + self.bias

    def logits_vjp(self, pixels, cotangent):
        pixels = np.asarray(pixels)
        self.check_input(pixels)
        return (np.asarray(cotangent) @ self.weight.T).reshape(pixels.shape)


class TorchClassifier(GradientClassifier):
    """Adapter exposing an ``nn.Module`` (NCHW) through the NHWC numpy contract."""

    chunk_size = 512

    def __init__(self, module: nn.Module, num_classes, input_shape, name):
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.name = name

    @property
    def dtype(self):
        return next(self.module.parameters()).dtype

    def _to_tensor(self, pixels):
        arr = np.ascontiguousarray(np.transpose(pixels, (0, 3, 1, 2)))
        return torch.from_numpy(arr).to(self.dtype)

    def logits(self, pixels):
        pixels = np.asarray(pixels)
        self.check_input(pixels)
        out = []
        with torch.no_grad():
            for start in range(0, len(pixels), self.chunk_size):
                out.append(self.module(self._to_tensor(pixels[start:start + self.chunk_size])).numpy())
        if not out:
            return np.zeros((0, self.num_classes))
        return np.concatenate(out)

    def logits_vjp(self, pixels, cotangent):
        pixels = np.asarray(pixels)
        self.check_input(pixels)
        cotangent = np.asarray(cotangent)
        grads = []
        for start in range(0, len(pixels), self.chunk_size):
            x = self._to_tensor(pixels[start:start + self.chunk_size]).requires_grad_(True)
            z = self.module(x)
            cot = torch.from_numpy(np.ascontiguousarray(cotangent[start:start + self.chunk_size])).to(z.dtype)
            (g,) = torch.autograd.grad(z, x, grad_outputs=cot)
            grads.append(g.permute(0, 2, 3, 1).numpy())
        if not grads:
            return np.zeros(pixels.shape)
        return np.concatenate(grads)

    def with_dtype(self, dtype):
        """Copy of this classifier whose parameters are cast to ``dtype``."""
        clone = copy.copy(self)
        clone.module = copy.deepcopy(self.module).to(dtype)
        return clone

    def parameters_numpy(self):
        return {k: v.detach().cpu().numpy() for k, v in self.module.state_dict().items()}


class Standardize(nn.Module):
    """Fixed ``(x - 0.5) / 0.25`` input scaling; no parameters."""

    def forward(self, x):
        return (x - 0.5) * 4.0


def build_reference_network(num_classes, input_shape=CIFAR_SHAPE, channels=(16, 32), hidden=64):
    h, w, c = input_shape
    c1, c2 = channels
    return nn.Sequential(
        Standardize(),
        nn.Conv2d(c, c1, kernel_size=3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(c1, c2, kernel_size=3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(c2 * (h // 4) * (w // 4), hidden),
        nn.ReLU(),
        nn.Linear(hidden, num_classes),
    )


class ReferenceCNN(TorchClassifier):
    """Small two-block convnet used for every desk-scale experiment.

    standardize - conv3x3(16) - relu - maxpool2 - conv3x3(32) - relu - maxpool2 - dense(64) - relu - dense(k).
    For 32x32x3 inputs and k=10 that is 136,874 parameters.  Weights are
    initialised from ``seed`` without touching torch's global RNG.
    """

    def __init__(self, num_classes=10, input_shape=CIFAR_SHAPE, channels=(16, 32),
                 hidden=64, seed=0, name="reference_cnn", dtype=torch.float32, module=None):
        self.architecture = {
            "kind": "reference_cnn",
            "input_shape": list(input_shape),
            "channels": list(channels),
            "hidden": int(hidden),
        }
        if module is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                module = build_reference_network(num_classes, input_shape, channels, hidden)
            module = module.to(dtype)
        super().__init__(module, num_classes, input_shape, name)


class EnsembleClassifier(GradientClassifier):
    """Arithmetic mean of member logits; all members must share ``k``."""

    def __init__(self, members: Sequence[GradientClassifier], name=None):
        self.members = list(members)
        if not self.members:
            raise ConfigurationError("an ensemble needs at least one member")
        ks = {m.num_classes for m in self.members}
        if len(ks) != 1:
            raise ConfigurationError(f"ensemble members disagree on class count: {sorted(ks)}")
        self.num_classes = ks.pop()
        shapes = {tuple(m.input_shape) for m in self.members if m.input_shape is not None}
        if len(shapes) > 1:
            raise ConfigurationError(f"ensemble members disagree on input shape: {sorted(shapes)}")
        self.input_shape = shapes.pop() if shapes else None
        self.name = name or "ensemble(" + ",".join(m.name for m in self.members) + ")"

    def logits(self, pixels):
        total = None
        for m in self.members:
            z = np.asarray(m.logits(pixels), dtype=np.float64)
            total = z if total is None else total + z
        return total / len(self.members)

    def logits_vjp(self, pixels, cotangent):
        # d(mean_f z_f)/dx applied to a cotangent is the mean of member VJPs.
        total = None
        for m in self.members:
            g = np.asarray(m.logits_vjp(pixels, cotangent), dtype=np.float64)
            total = g if total is None else total + g
        return total / len(self.members)


def as_ensemble(model):
    """Wrap a classifier, or a list or tuple of classifiers, as an ensemble."""
    if isinstance(model, EnsembleClassifier):
        return model
    if isinstance(model, (list, tuple)):
        return EnsembleClassifier(list(model))
    return EnsembleClassifier([model])


def forward_logits(model: GradientClassifier, batch) -> np.ndarray:
    """Logits of ``model`` on an :class:`ImageBatch` or a raw pixel array."""
    pixels = _pixels_of(batch)
    if isinstance(batch, ImageBatch) and batch.labels.size and batch.labels.max() >= model.num_classes:
        raise ShapeError(f"labels exceed the {model.num_classes} classes of {model.name}")
    return model.logits(pixels)


def ensemble_logits(ensemble: EnsembleClassifier, batch) -> np.ndarray:
    return ensemble.logits(_pixels_of(batch))


def input_gradient(model: GradientClassifier, batch, loss="logit", labels=None) -> np.ndarray:
    """Gradient of each sample's own loss with respect to its pixels.

    Args:
        model: any classifier implementing ``logits_vjp`` (ensembles included).
        batch: :class:`ImageBatch` or raw ``N x H x W x C`` array.  Raw arrays
            may leave ``[0, 1]``, which attacks rely on.
        loss: ``"logit"`` for ``-z[t]`` or ``"cross_entropy"``.
        labels: true classes; defaults to ``batch.labels``.

    Returns:
        Array shaped like the pixels.
    """
    pixels = _pixels_of(batch)
    if labels is None:
        if not isinstance(batch, ImageBatch):
            raise ConfigurationError("labels are required for raw pixel arrays")
        labels = batch.labels
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if loss == "logit":
        # -z[t] has a constant logit-space derivative, so no forward pass is needed.
        z_like = np.zeros((len(labels), model.num_classes))
    else:
        z_like = model.logits(pixels)
    cotangent = loss_logit_gradient(z_like, labels, loss)
    return model.logits_vjp(pixels, cotangent)


def finite_difference_gradient(model, image, loss, label, pixel_indices, step=1e-4):
    """Central-difference estimate of dJ/dx at selected pixels of one image.

    Probes are taken on the raw array and may leave ``[0, 1]``.

    Args:
        image: ``H x W x C`` array.
        pixel_indices: iterable of ``(h, w, c)`` tuples or flat indices.
        step: probe half-width ``s``; the estimate is ``(J(x+s e) - J(x-s e)) / 2s``.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    image = np.asarray(image, dtype=np.float64)
    flat = []
    for idx in pixel_indices:
        flat.append(np.ravel_multi_index(tuple(idx), image.shape) if np.ndim(idx) else int(idx))
    flat = np.asarray(flat, dtype=np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= image.size):
        raise IndexError("pixel index out of range")
    probes = np.repeat(image.reshape(1, -1), 2 * len(flat), axis=0)
    rows = np.arange(len(flat))
    probes[2 * rows, flat] += step
    probes[2 * rows + 1, flat] -= step
    z = model.logits(probes.reshape((-1,) + image.shape))
    j = per_sample_loss(np.asarray(z, dtype=np.float64), np.full(len(probes), label), loss)
    return (j[0::2] - j[1::2]) / (2.0 * step)


# --- checkpoints -----------------------------------------------------------

def save_model(model: GradientClassifier, path):
    """Write a self-describing ``.npz`` checkpoint (descriptor + flat arrays)."""
    if isinstance(model, ReferenceCNN):
        arrays = {f"param/{k}": v for k, v in model.parameters_numpy().items()}
        descriptor = dict(model.architecture)
        descriptor["dtype"] = str(model.dtype).replace("torch.", "")
    elif isinstance(model, LinearClassifier):
        arrays = {"param/weight": model.weight, "param/bias": model.bias}
        descriptor = {"kind": "linear",
                      "input_shape": list(model.input_shape) if model.input_shape else None}
    elif isinstance(model, ConstantClassifier):
        arrays = {"param/row": model.row}
        descriptor = {"kind": "constant",
                      "input_shape": list(model.input_shape) if model.input_shape else None}
    else:
        raise UnsupportedOperationError(f"cannot serialise {type(model).__name__}")
    descriptor.update(num_classes=int(model.num_classes), name=model.name, format_version=1)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __descriptor__=np.frombuffer(json.dumps(descriptor).encode(), dtype=np.uint8), **arrays)
    return path


def load_model(path) -> GradientClassifier:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            descriptor = json.loads(data["__descriptor__"].tobytes().decode())
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: not a model checkpoint ({exc})") from exc
    kind = descriptor.get("kind")
    if kind == "reference_cnn":
        dtype = getattr(torch, descriptor.get("dtype", "float32"))
        module = build_reference_network(
            descriptor["num_classes"], tuple(descriptor["input_shape"]),
            tuple(descriptor["channels"]), descriptor["hidden"],
        ).to(dtype)
        module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
        return ReferenceCNN(
            descriptor["num_classes"], tuple(descriptor["input_shape"]),
            tuple(descriptor["channels"]), descriptor["hidden"],
            name=descriptor["name"], module=module,
        )
    shape = descriptor.get("input_shape")
    shape = tuple(shape) if shape else None
    if kind == "linear":
        return LinearClassifier(params["weight"], params["bias"], shape, descriptor["name"])
    if kind == "constant":
        return ConstantClassifier(params["row"], descriptor["name"], shape)
    raise DataFormatError(f"{path}: unknown model kind {kind!r}")
