"""ERM training, the three-part evaluation suite, the robustness score R, and reports.

R is the unweighted mean of the per-subset accuracies over the clean,
adversarial and corrupted subsets, so each subset counts equally whatever
its size.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attack import DESK_L2, DESK_LINF, AttackConfig, PerturbationBudget, dual_norm_attack
from .corruptions import apply_corruption, pick_random_corruption
from .data import CORRUPTED, ADVERSARIAL, LabeledDataset, stream_rng, stream_seed
from .errors import ConfigurationError, ReportValidationError, TrainingError
from .models import GradientClassifier, ImageBatch, ReferenceCNN, TorchClassifier

log = logging.getLogger(__name__)

SUBSETS = ("ori", "adv", "cor")
R_TOLERANCE = 0.005  # percentage points


@dataclass(frozen=True)
class TrainConfig:
    """Plain SGD with momentum and step decay.

    ``weight_seed`` initialises a fresh model in :func:`train_reference_cnn`;
    ``order_seed`` fixes the minibatch order.
    """

    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step_epochs: int = 8
    lr_gamma: float = 0.2
    weight_seed: int = 0
    order_seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_step_epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")


def erm_train(model: TorchClassifier, dataset, config: TrainConfig) -> TorchClassifier:
    """Minimise mean cross-entropy over ``dataset`` starting from ``model``'s weights.

    The input model is left untouched; a trained copy is returned with a
    ``history`` attribute holding the mean loss and accuracy of every epoch.

    Raises:
        TrainingError: the loss became non-finite.
    """
    if not isinstance(model, TorchClassifier):
        raise ConfigurationError("erm_train needs a torch-backed classifier")
    if len(dataset.labels) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    trained = model.with_dtype(model.dtype)
    net = trained.module
    for p in net.parameters():
        p.requires_grad_(True)
    x_all = torch.from_numpy(np.ascontiguousarray(np.transpose(np.asarray(dataset.pixels), (0, 3, 1, 2)))).to(trained.dtype)
    y_all = torch.from_numpy(np.asarray(dataset.labels, dtype=np.int64))
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_step_epochs, gamma=config.lr_gamma)
    order_rng = np.random.default_rng(config.order_seed)
    history = []
    step = 0
    net.train()
    for epoch in range(1, config.epochs + 1):
        perm = torch.from_numpy(order_rng.permutation(len(y_all)))
        total, correct = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            logits = net(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError("loss became non-finite", epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y_all[idx]).sum())
        sched.step()
        history.append({"epoch": epoch, "loss": total / len(perm), "accuracy": correct / len(perm)})
        log.info("epoch %d: loss %.4f acc %.4f", epoch, history[-1]["loss"], history[-1]["accuracy"])
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    trained.history = history
    return trained


def train_reference_cnn(dataset, config: TrainConfig, name="reference_cnn", num_classes=10,
                        channels=(16, 32), hidden=64):
    """Fresh :class:`ReferenceCNN` (seeded by ``weight_seed``) trained with :func:`erm_train`."""
    shape = tuple(np.asarray(dataset.pixels).shape[1:])
    model = ReferenceCNN(num_classes, shape, channels, hidden, seed=config.weight_seed, name=name)
    return erm_train(model, dataset, config)


def predict(model: GradientClassifier, pixels):
    """Argmax class; ties go to the lowest index."""
    return np.argmax(model.logits(np.asarray(pixels)), axis=1)


def accuracy(model: GradientClassifier, dataset) -> float:
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ConfigurationError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, dataset.pixels) == labels))


@dataclass
class EvaluationSuite:
    """Index-aligned clean, adversarial and corrupted test subsets."""

    ori: LabeledDataset
    adv: LabeledDataset
    cor: LabeledDataset

    def __post_init__(self):
        for name in SUBSETS:
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"suite subset {name!r} is empty")

    def subsets(self) -> Dict[str, LabeledDataset]:
        return {name: getattr(self, name) for name in SUBSETS}


def score_from_accuracies(accuracies: Sequence[float]) -> float:
    """Unweighted mean over subsets (not over pooled samples)."""
    accuracies = list(accuracies)
    if not accuracies:
        raise ConfigurationError("need at least one subset accuracy")
    return sum(accuracies) / len(accuracies)


def subset_accuracies(model, suite: EvaluationSuite) -> Dict[str, float]:
    return {name: accuracy(model, ds) for name, ds in suite.subsets().items()}


def robustness_score(model, suite: EvaluationSuite) -> float:
    return score_from_accuracies(subset_accuracies(model, suite).values())


@dataclass
class SuiteConfig:
    budget_l2: PerturbationBudget = DESK_L2
    budget_linf: PerturbationBudget = DESK_LINF
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 1


def build_evaluation_suite(clean_test: LabeledDataset, attacker_ensemble, config: SuiteConfig = None,
                           corrupt: Optional[Callable] = None) -> EvaluationSuite:
    """Clean, dual-norm adversarial, and randomly corrupted copies of ``clean_test``.

    ``corrupt(image, rng) -> (image, spec_dict)`` overrides the default random
    corruption choice; it receives one generator per sample.
    """
    config = config or SuiteConfig()
    if len(clean_test) == 0:
        raise ConfigurationError("clean test set is empty")
    batch = ImageBatch(np.asarray(clean_test.images, dtype=np.float64), clean_test.labels)
    attack_cfg = AttackConfig(**{**config.attack.__dict__, "seed": stream_seed(config.seed, 3)})
    adv, _, _ = dual_norm_attack(batch, attacker_ensemble, config.budget_l2, config.budget_linf,
                                 attack_cfg, clean_test.source_index)
    if corrupt is None:
        def corrupt(image, rng):
            spec = pick_random_corruption(rng)
            return apply_corruption(image, spec), spec.as_dict()
    cor_imgs, cor_meta = [], []
    for img, sid in zip(clean_test.images, clean_test.source_index):
        out, meta = corrupt(np.asarray(img, dtype=np.float64), stream_rng(config.seed, 4, int(sid)))
        cor_imgs.append(out)
        cor_meta.append(meta)
    n = len(clean_test)
    return EvaluationSuite(
        ori=clean_test,
        adv=LabeledDataset(adv.pixels.astype(np.float32), clean_test.labels.copy(), [ADVERSARIAL] * n,
                           clean_test.source_index.copy()),
        cor=LabeledDataset(np.stack(cor_imgs).astype(np.float32), clean_test.labels.copy(), [CORRUPTED] * n,
                           clean_test.source_index.copy(), cor_meta),
    )


# --- reporting -------------------------------------------------------------

@dataclass
class ReportRow:
    """Accuracies in percent; ``r`` is optional and only used for validation."""

    model: str
    dataset: str
    acc_ori: float
    acc_adv: float
    acc_cor: float
    r: Optional[float] = None

    @property
    def score(self):
        return score_from_accuracies([self.acc_ori, self.acc_adv, self.acc_cor])

    def validate(self, tolerance=R_TOLERANCE):
        values = [self.acc_ori, self.acc_adv, self.acc_cor]
        if any(not (0.0 <= v <= 100.0) for v in values):
            raise ReportValidationError(f"{self.model}/{self.dataset}: accuracies must lie in [0, 100]")
        if self.r is not None and abs(self.r - self.score) > tolerance:
            raise ReportValidationError(
                f"{self.model}/{self.dataset}: R={self.r:.2f} but mean of accuracies is {self.score:.4f}"
            )


def row_from_model(model, suite, dataset_name="") -> ReportRow:
    accs = subset_accuracies(model, suite)
    return ReportRow(model.name, dataset_name, 100 * accs["ori"], 100 * accs["adv"], 100 * accs["cor"])


def render_report(rows: Sequence[ReportRow], path=None, delimiter=","):
    """Text table plus delimiter-separated machine file.

    R is always recomputed from the three accuracies.  Rows carrying an ``r``
    that disagrees by more than 0.005 points are rejected.

    Returns:
        ``(table_text, machine_text)``; ``machine_text`` is also written to
        ``path`` when given.
    """
    rows = list(rows)
    if not rows:
        raise ConfigurationError("report needs at least one row")
    for row in rows:
        row.validate()
    header = ("model", "dataset", "ACC(P_ori)", "ACC(P_adv)", "ACC(P_cor)", "R")
    body = [(r.model, r.dataset, f"{r.acc_ori:.2f}", f"{r.acc_adv:.2f}", f"{r.acc_cor:.2f}", f"{r.score:.2f}")
            for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) if i < 2 else str(c).rjust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
    table = "\n".join(lines)
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["model", "dataset", "acc_ori", "acc_adv", "acc_cor", "r"])
    writer.writerows(body)
    machine = buf.getvalue()
    if path is not None:
        Path(path).write_text(machine, encoding="utf-8")
    return table, machine


def read_report_rows(path, delimiter=","):
    """Parse rows from a delimited file with columns model, dataset, acc_ori, acc_adv, acc_cor[, r]."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh, delimiter=delimiter):
            try:
                r = rec.get("r")
                rows.append(ReportRow(rec["model"], rec.get("dataset", ""), float(rec["acc_ori"]),
                                      float(rec["acc_adv"]), float(rec["acc_cor"]),
                                      float(r) if r not in (None, "") else None))
            except (KeyError, ValueError) as exc:
                raise ConfigurationError(f"{path}: bad report row {rec} ({exc})") from exc
    return rows
