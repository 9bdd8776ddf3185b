"""Dataset I/O, seeded splitting and the dataset-enhancement algorithm.

Binary layout (CIFAR-10): each record is one label byte followed by 3072
pixel bytes, channel-major (1024 R, 1024 G, 1024 B), row-major inside each
channel.  Saved datasets use the same layout plus a JSON-lines sidecar
manifest ``<file>.manifest.jsonl`` with one record per sample.

Seeds: every random decision is drawn from a generator keyed on
``(master_seed, stream, counter)`` through ``np.random.SeedSequence``:

====================  =======  ====================================
stream                id       counter
====================  =======  ====================================
cap                   1        0
split                 2        0
attack (l2, l-inf)    3        0, then per sample ``source_index``
corruption            4        sample ``source_index``
====================  =======  ====================================

so re-running any part of the pipeline on the same inputs reproduces the
same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .attack import (
    DESK_L2,
    DESK_LINF,
    AttackConfig,
    PerturbationBudget,
    combine_dual_norm,
    perturbation_norm,
    run_attack,
)
from .corruptions import apply_corruption, pick_random_corruption
from .errors import ConfigurationError, DataFormatError, PipelineError
from .models import EnsembleClassifier, ImageBatch, load_model

log = logging.getLogger(__name__)

RECORD_BYTES = 3073
IMAGE_SHAPE = (32, 32, 3)
NUM_CLASSES = 10

CLEAN, ADVERSARIAL, CORRUPTED = "clean", "adversarial", "corrupted"

STREAM_CAP, STREAM_SPLIT, STREAM_ATTACK, STREAM_CORRUPT = 1, 2, 3, 4


def stream_rng(master_seed, stream, counter=0):
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(stream), int(counter)]))


def stream_seed(master_seed, stream, counter=0):
    """A 63-bit integer seed derived the same way as :func:`stream_rng`."""
    return int(np.random.SeedSequence([int(master_seed), int(stream), int(counter)])
               .generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass
class LabeledDataset:
    """Images with labels and per-sample provenance.

    ``source_index`` is each sample's position in the dataset it was first
    loaded from; subsets and enhanced copies keep it.  ``meta`` holds one
    dict per sample (corruption spec or attack budgets).
    """

    images: np.ndarray
    labels: np.ndarray
    provenance: List[str] = None
    source_index: np.ndarray = None
    meta: List[dict] = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = len(self.images)
        if self.provenance is None:
            self.provenance = [CLEAN] * n
        if self.source_index is None:
            self.source_index = np.arange(n, dtype=np.int64)
        self.source_index = np.asarray(self.source_index, dtype=np.int64).reshape(-1)
        if self.meta is None:
            self.meta = [{} for _ in range(n)]
        self.provenance = list(self.provenance)
        self.meta = list(self.meta)
        if not (len(self.labels) == len(self.provenance) == len(self.source_index) == len(self.meta) == n):
            raise DataFormatError("images, labels, provenance, source_index and meta lengths differ")
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def pixels(self):
        return self.images

    def batch(self, num_classes=None):
        return ImageBatch(self.images, self.labels, num_classes)

    def subset(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDataset(
            self.images[positions], self.labels[positions],
            [self.provenance[i] for i in positions], self.source_index[positions],
            [dict(self.meta[i]) for i in positions],
        )

    def counts(self):
        return {k: self.provenance.count(k) for k in (CLEAN, ADVERSARIAL, CORRUPTED)}

    @classmethod
    def concatenate(cls, parts: Sequence["LabeledDataset"]):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0,) + IMAGE_SHAPE, dtype=np.float32), np.zeros(0, dtype=np.int64))
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [t for p in parts for t in p.provenance],
            np.concatenate([p.source_index for p in parts]),
            [m for p in parts for m in p.meta],
        )


# --- binary format ---------------------------------------------------------

def decode_records(raw: bytes, origin="<bytes>", offset=0):
    if len(raw) % RECORD_BYTES:
        bad = offset + (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise DataFormatError(
            f"{origin}: truncated record at byte offset {bad} "
            f"({len(raw)} bytes is not a multiple of {RECORD_BYTES})"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise DataFormatError(
            f"{origin}: label byte {labels[bad[0]]} > 9 at byte offset {offset + int(bad[0]) * RECORD_BYTES}"
        )
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def to_bytes(images):
    """Quantise ``[0, 1]`` pixels to uint8 with ``round(p * 255)``."""
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_records(images, labels) -> bytes:
    u8 = to_bytes(images).transpose(0, 3, 1, 2).reshape(len(images), -1)
    rec = np.empty((len(images), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = u8
    return rec.tobytes()


def load_cifar10_binary(paths) -> LabeledDataset:
    """Read one or more CIFAR-10 binary batch files into a clean dataset."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        p = Path(p)
        try:
            raw = p.read_bytes()
        except OSError as exc:
            raise DataFormatError(f"{p}: cannot read ({exc.strerror})") from exc
        im, lb = decode_records(raw, str(p))
        images.append(im)
        labels.append(lb)
    images = np.concatenate(images) if images else np.zeros((0,) + IMAGE_SHAPE, np.uint8)
    labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return LabeledDataset(images.astype(np.float32) / np.float32(255.0), labels)


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.jsonl")


def save_dataset(dataset: LabeledDataset, path):
    """Write records plus the sidecar manifest; returns the two paths."""
    path = Path(path)
    if len(dataset) and tuple(dataset.images.shape[1:]) != IMAGE_SHAPE:
        raise DataFormatError(f"the binary format stores {IMAGE_SHAPE} images only")
    try:
        path.write_bytes(encode_records(dataset.images, dataset.labels))
        with open(manifest_path(path), "w", encoding="utf-8") as fh:
            for i in range(len(dataset)):
                fh.write(json.dumps({
                    "index": i,
                    "source_index": int(dataset.source_index[i]),
                    "label": int(dataset.labels[i]),
                    "provenance": dataset.provenance[i],
                    "meta": dataset.meta[i],
                }, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataFormatError(f"{exc.filename or path}: cannot write ({exc.strerror})") from exc
    return path, manifest_path(path)


def load_dataset(path) -> LabeledDataset:
    """Load a saved dataset; provenance comes from the manifest when present."""
    ds = load_cifar10_binary(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        return ds
    records = [json.loads(line) for line in mpath.read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(records) != len(ds):
        raise DataFormatError(f"{mpath}: {len(records)} manifest lines for {len(ds)} records")
    ds.provenance = [r["provenance"] for r in records]
    ds.source_index = np.array([r["source_index"] for r in records], dtype=np.int64)
    ds.meta = [r.get("meta", {}) for r in records]
    return ds


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- cap and split ---------------------------------------------------------

def cap_dataset(dataset: LabeledDataset, n, rng) -> LabeledDataset:
    """Keep a uniform random subset of ``n`` samples, in their original order."""
    if n > len(dataset) or n < 0:
        raise ConfigurationError(f"cannot keep {n} of {len(dataset)} samples")
    keep = np.sort(rng.choice(len(dataset), size=n, replace=False))
    return dataset.subset(keep)


@dataclass(frozen=True)
class SplitRatio:
    clean: float = 0.0
    adversarial: float = 1.0
    corrupted: float = 4.0

    def __post_init__(self):
        parts = (self.clean, self.adversarial, self.corrupted)
        if any(not (p >= 0) for p in parts) or sum(parts) <= 0:
            raise ConfigurationError(f"split ratio must be non-negative and not all zero, got {parts}")

    @classmethod
    def parse(cls, text):
        """``"0:1:4"`` -> ``SplitRatio(0, 1, 4)``."""
        try:
            parts = [float(p) for p in str(text).split(":")]
        except ValueError as exc:
            raise ConfigurationError(f"bad ratio {text!r}") from exc
        if len(parts) != 3:
            raise ConfigurationError(f"ratio needs three parts, got {text!r}")
        return cls(*parts)

    def as_tuple(self):
        return (self.clean, self.adversarial, self.corrupted)

    def __str__(self):
        return ":".join(f"{p:g}" for p in self.as_tuple())


def split_sizes(n, ratio: SplitRatio):
    """Largest-remainder apportionment of ``n`` samples; ties go to the lower part."""
    weights = [Fraction(a) for a in ratio.as_tuple()]
    total = sum(weights)
    quotas = [n * w / total for w in weights]
    sizes = [int(q) for q in quotas]
    left = n - sum(sizes)
    order = sorted(range(3), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return tuple(sizes)


def split_positions(n, ratio: SplitRatio, rng):
    """Sorted positions of the three parts of a random split of ``range(n)``."""
    sizes = split_sizes(n, ratio)
    perm = rng.permutation(n)
    bounds = np.cumsum((0,) + sizes)
    return tuple(np.sort(perm[bounds[i]:bounds[i + 1]]) for i in range(3))


def split_dataset(dataset: LabeledDataset, ratio: SplitRatio, rng):
    """Random disjoint split into (clean, adversarial, corrupted) parts."""
    return tuple(dataset.subset(p) for p in split_positions(len(dataset), ratio, rng))


# --- enhancement -----------------------------------------------------------

@dataclass
class EnhancementConfig:
    ratio: SplitRatio = field(default_factory=SplitRatio)
    budget_linf: PerturbationBudget = DESK_LINF
    budget_l2: PerturbationBudget = DESK_L2
    attack: AttackConfig = field(default_factory=AttackConfig)
    ensemble_paths: List[str] = field(default_factory=list)
    master_seed: int = 0
    cap: Optional[int] = None
    workers: int = 1
    chunk_size: int = 64


def _attack_chunk(d2, positions, ensemble, config, attack_cfg):
    sub = d2.subset(positions)
    batch = ImageBatch(sub.images.astype(np.float64), sub.labels)
    ids = sub.source_index
    dl2 = run_attack(batch, ensemble, config.budget_l2, attack_cfg, ids)
    dinf = run_attack(batch, ensemble, config.budget_linf, attack_cfg, ids)
    return combine_dual_norm(batch, dl2, dinf), dl2, dinf


def _locate_failure(d2, positions, ensemble, config, attack_cfg, exc):
    for p in positions:
        try:
            _attack_chunk(d2, [p], ensemble, config, attack_cfg)
        except Exception as inner:  # noqa: BLE001
            raise PipelineError(f"attack failed: {inner}", int(d2.source_index[p])) from inner
    raise PipelineError(f"attack failed: {exc}", int(d2.source_index[positions[0]])) from exc


def adversarial_part(d2: LabeledDataset, ensemble, config: EnhancementConfig) -> LabeledDataset:
    """Replace every sample by its clipped l2 + l-inf adversarial version."""
    if not len(d2):
        return d2
    attack_cfg = AttackConfig(**{**config.attack.__dict__,
                                 "seed": stream_seed(config.master_seed, STREAM_ATTACK)})
    chunks = [np.arange(s, min(s + config.chunk_size, len(d2))) for s in range(0, len(d2), config.chunk_size)]

    def work(positions):
        try:
            return _attack_chunk(d2, positions, ensemble, config, attack_cfg)
        except PipelineError:
            raise
        except Exception as exc:  # noqa: BLE001
            _locate_failure(d2, positions, ensemble, config, attack_cfg, exc)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, chunks))  # map keeps source order
    else:
        results = [work(c) for c in chunks]
    images = np.concatenate([r[0].pixels for r in results]).astype(np.float32)
    dl2 = np.concatenate([r[1] for r in results])
    dinf = np.concatenate([r[2] for r in results])
    n2 = perturbation_norm(dl2, "l2")
    ninf = perturbation_norm(dinf, "linf")
    meta = [{
        "eps_l2": config.budget_l2.epsilon, "eps_linf": config.budget_linf.epsilon,
        "iterations": config.budget_linf.iterations,
        "achieved_l2": round(float(a), 6), "achieved_linf": round(float(b), 6),
    } for a, b in zip(n2, ninf)]
    return LabeledDataset(np.clip(images, 0, 1), d2.labels.copy(), [ADVERSARIAL] * len(d2),
                          d2.source_index.copy(), meta)


def corrupted_part(d3: LabeledDataset, master_seed, workers=1) -> LabeledDataset:
    """Apply one randomly chosen corruption to each sample (labels unchanged)."""
    def work(i):
        sid = int(d3.source_index[i])
        spec = pick_random_corruption(stream_rng(master_seed, STREAM_CORRUPT, sid))
        try:
            return apply_corruption(d3.images[i], spec), spec.as_dict()
        except Exception as exc:  # noqa: BLE001
            raise PipelineError(f"corruption {spec.kind} failed: {exc}", sid) from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, range(len(d3))))
    else:
        results = [work(i) for i in range(len(d3))]
    if not results:
        return d3
    images = np.stack([r[0] for r in results]).astype(np.float32)
    return LabeledDataset(np.clip(images, 0, 1), d3.labels.copy(), [CORRUPTED] * len(d3),
                          d3.source_index.copy(), [r[1] for r in results])


def load_ensemble(paths):
    if not paths:
        raise ConfigurationError("the adversarial part needs at least one ensemble checkpoint")
    return EnsembleClassifier([load_model(p) for p in paths])


def enhance(dataset: LabeledDataset, config: EnhancementConfig, ensemble=None,
            return_parts=False):
    """Clean / adversarial / corrupted enhancement of a training set.

    The output has exactly ``len(dataset)`` samples and the same label
    multiset; every sample stays at its input position.

    Args:
        dataset: input samples (after any capping).
        config: split ratio, budgets, attack settings and master seed.
        ensemble: surrogate classifier(s) for the attack; loaded from
            ``config.ensemble_paths`` when omitted and needed.
        return_parts: also return the three partitions before merging.
    """
    positions = split_positions(len(dataset), config.ratio, stream_rng(config.master_seed, STREAM_SPLIT))
    d1, d2, d3 = (dataset.subset(p) for p in positions)
    if len(d2) and ensemble is None:
        ensemble = load_ensemble(config.ensemble_paths)
    t0 = time.perf_counter()
    adv = adversarial_part(d2, ensemble, config)
    t1 = time.perf_counter()
    cor = corrupted_part(d3, config.master_seed, config.workers)
    log.info("enhance: %d clean, %d adversarial (%.1fs), %d corrupted (%.1fs)",
             len(d1), len(adv), t1 - t0, len(cor), time.perf_counter() - t1)
    merged = LabeledDataset.concatenate([d1, adv, cor])
    if len(merged):
        merged = merged.subset(np.argsort(np.concatenate(positions), kind="stable"))
    if return_parts:
        return merged, (d1, adv, cor)
    return merged
