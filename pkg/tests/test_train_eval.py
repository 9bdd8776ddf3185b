from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcrobust.attack import AttackConfig, PerturbationBudget
from dcrobust.corruptions import contrast
from dcrobust.data import LabeledDataset
from dcrobust.errors import ConfigurationError, ReportValidationError, TrainingError
from dcrobust.models import ConstantClassifier, GradientClassifier, LinearClassifier, ReferenceCNN
from dcrobust.train_eval import (
    EvaluationSuite,
    ReportRow,
    SuiteConfig,
    TrainConfig,
    accuracy,
    build_evaluation_suite,
    erm_train,
    predict,
    read_report_rows,
    render_report,
    robustness_score,
    score_from_accuracies,
)

TABLE = Path(__file__).parent / "data" / "table1.csv"


class LabelReader(GradientClassifier):
    """Predicts the class written into pixel (0, 0, 0) as ``label / 10``."""

    name = "reader"
    num_classes = 10

    def logits(self, pixels):
        cls = np.rint(np.asarray(pixels)[:, 0, 0, 0] * 10).astype(int)
        z = np.zeros((len(pixels), 10))
        z[np.arange(len(pixels)), cls] = 1.0
        return z


def subset_with_accuracy(n, correct, rng):
    """``n`` samples of which exactly ``correct`` are classified right by :class:`LabelReader`."""
    labels = rng.integers(0, 10, n)
    shown = labels.copy()
    shown[correct:] = (labels[correct:] + 1) % 10
    images = np.zeros((n, 2, 2, 1), dtype=np.float32)
    images[:, 0, 0, 0] = shown / 10
    return LabeledDataset(images, labels)


def table_rows():
    return read_report_rows(TABLE)


# --- R arithmetic ---------------------------------------------------------------

def test_table_rows_reproduce_published_scores():
    rows = table_rows()
    assert len(rows) == 12
    for row in rows:
        assert abs(score_from_accuracies([row.acc_ori, row.acc_adv, row.acc_cor]) - row.r) <= 0.005


def test_robustness_score_on_suites_built_to_table_accuracies(rng):
    model = LabelReader()
    for row in table_rows():
        parts = [subset_with_accuracy(10_000, int(round(a * 100)), rng)
                 for a in (row.acc_ori, row.acc_adv, row.acc_cor)]
        suite = EvaluationSuite(*parts)
        assert abs(100 * robustness_score(model, suite) - row.r) <= 0.005


def test_score_is_unweighted_over_subsets(rng):
    suite = EvaluationSuite(subset_with_accuracy(10, 10, rng), subset_with_accuracy(1000, 0, rng),
                            subset_with_accuracy(100, 50, rng))
    assert robustness_score(LabelReader(), suite) == pytest.approx(0.5)  # pooled would be ~0.054


def test_all_correct_model_scores_one(rng):
    suite = EvaluationSuite(*[subset_with_accuracy(30, 30, rng) for _ in range(3)])
    assert robustness_score(LabelReader(), suite) == 1.0


def test_empty_inputs_rejected(rng):
    with pytest.raises(ConfigurationError):
        score_from_accuracies([])
    with pytest.raises(ConfigurationError):
        EvaluationSuite(subset_with_accuracy(3, 3, rng), subset_with_accuracy(0, 0, rng),
                        subset_with_accuracy(3, 3, rng))


# --- accuracy -------------------------------------------------------------------------

def test_constant_class_zero_on_balanced_set():
    ds = LabeledDataset(np.zeros((100, 2, 2, 1)), np.arange(100) % 10)
    assert accuracy(ConstantClassifier(np.eye(10)[0]), ds) == pytest.approx(0.1)


def test_ties_go_to_lowest_index():
    assert list(predict(ConstantClassifier([1.0, 3.0, 3.0]), np.zeros((2, 1, 1, 1)))) == [1, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0), st.floats(-3, 3))
def test_accuracy_ignores_monotone_logit_maps(seed, scale, shift):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((12, 4))
    base = LinearClassifier(w, input_shape=(2, 2, 3))
    mapped = LinearClassifier(w * scale, np.full(4, shift), input_shape=(2, 2, 3))
    ds = LabeledDataset(rng.random((25, 2, 2, 3)), rng.integers(0, 4, 25))
    a = accuracy(base, ds)
    assert 0.0 <= a <= 1.0
    assert a == accuracy(mapped, ds)


# --- training -------------------------------------------------------------------------

def separable_toy():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 10)
    images = np.where(labels[:, None, None, None] == 1, 0.7, 0.3) + rng.uniform(-0.1, 0.1, (20, 8, 8, 1))
    return LabeledDataset(images.astype(np.float32), labels)


def tiny_net(seed=0):
    return ReferenceCNN(num_classes=2, input_shape=(8, 8, 1), seed=seed, name="tiny")


def test_separable_toy_reaches_full_training_accuracy():
    ds = separable_toy()
    cfg = TrainConfig(epochs=50, batch_size=4, learning_rate=0.02, lr_step_epochs=40)
    model = erm_train(tiny_net(), ds, cfg)
    assert accuracy(model, ds) == 1.0
    assert model.history[-1]["loss"] < model.history[0]["loss"]
    assert len(model.history) == 50


def test_training_is_reproducible_and_leaves_input_untouched():
    ds = separable_toy()
    start = tiny_net(3)
    before = {k: v.copy() for k, v in start.parameters_numpy().items()}
    cfg = TrainConfig(epochs=3, batch_size=5, order_seed=4)
    a = erm_train(start, ds, cfg).parameters_numpy()
    b = erm_train(start, ds, cfg).parameters_numpy()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
        assert np.array_equal(start.parameters_numpy()[k], before[k])
    c = erm_train(start, ds, TrainConfig(epochs=3, batch_size=5, order_seed=5)).parameters_numpy()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_divergence_raises_training_error():
    with pytest.raises(TrainingError) as info:
        erm_train(tiny_net(), separable_toy(), TrainConfig(epochs=5, batch_size=4, learning_rate=1e30))
    assert info.value.epoch >= 1 and info.value.step >= 0


def test_training_argument_errors():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        erm_train(ConstantClassifier([0, 1]), separable_toy(), TrainConfig())


# --- evaluation suite -----------------------------------------------------------------

def small_clean(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.random((n, 32, 32, 3)).astype(np.float32), rng.integers(0, 10, n),
                          source_index=np.arange(50, 50 + n))


def test_degenerate_suite_is_three_copies():
    clean = small_clean()
    zero = SuiteConfig(PerturbationBudget("l2", 0.0, 0.025, 2), PerturbationBudget("linf", 0.0, 2 / 255, 2))
    identity = lambda img, rng: (contrast(img, factor=1.0), {"kind": "contrast", "factor": 1.0})  # noqa: E731
    suite = build_evaluation_suite(clean, ReferenceCNN(seed=0), zero, corrupt=identity)
    assert np.array_equal(suite.adv.images, clean.images)
    assert np.allclose(suite.cor.images, clean.images, atol=1e-7)
    for part in suite.subsets().values():
        assert len(part) == len(clean)
        assert np.array_equal(part.source_index, clean.source_index)
        assert np.array_equal(part.labels, clean.labels)


def test_default_suite_is_seeded_and_bounded():
    clean = small_clean(6)
    cfg = SuiteConfig(PerturbationBudget("l2", 1.0, 0.025, 2), PerturbationBudget("linf", 8 / 255, 2 / 255, 2),
                      AttackConfig(), seed=5)
    a = build_evaluation_suite(clean, ReferenceCNN(seed=1), cfg)
    b = build_evaluation_suite(clean, ReferenceCNN(seed=1), cfg)
    assert np.array_equal(a.adv.images, b.adv.images) and np.array_equal(a.cor.images, b.cor.images)
    assert a.cor.meta == b.cor.meta and all("kind" in m for m in a.cor.meta)
    l2 = np.linalg.norm((a.adv.images.astype(np.float64) - clean.images).reshape(6, -1), axis=1)
    assert np.all(l2 <= 1.0 + 8 / 255 * np.sqrt(3072) + 1e-5)
    assert a.adv.images.min() >= 0 and a.adv.images.max() <= 1


# --- reports ------------------------------------------------------------------------------

def test_table_report_renders_all_rows(tmp_path):
    table, machine = render_report(table_rows(), tmp_path / "t.csv")
    assert len(table.splitlines()) == 14
    assert len(machine.splitlines()) == 13
    assert "62.16" in table and "68.10" in table
    back = read_report_rows(tmp_path / "t.csv")
    assert [r.r for r in back] == [r.r for r in table_rows()]


def test_perfect_row_renders_100():
    table, machine = render_report([ReportRow("m", "d", 100, 100, 100)])
    assert machine.splitlines()[1].endswith("100.00,100.00,100.00,100.00")
    assert "100.00" in table


def test_inconsistent_row_rejected():
    with pytest.raises(ReportValidationError):
        render_report([ReportRow("m", "d", 98.64, 32.73, 55.12, 63.16)])
    with pytest.raises(ReportValidationError):
        render_report([ReportRow("m", "d", 101.0, 32.73, 55.12)])
    with pytest.raises(ConfigurationError):
        render_report([])


def test_r_is_recomputed_not_copied():
    _, machine = render_report([ReportRow("m", "d", 98.64, 32.73, 55.12, 62.164)])
    assert machine.splitlines()[1].split(",")[-1] == "62.16"


def test_bad_report_file(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("model,dataset,acc_ori\nx,y,notanumber\n")
    with pytest.raises(ConfigurationError):
        read_report_rows(p)
