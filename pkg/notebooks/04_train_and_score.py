"""
Training on enhanced data and scoring robustness
================================================

A model's robustness score R is the plain mean of its accuracy on three
copies of the test set: clean, adversarial (attacked by a separate
ensemble) and corrupted.
"""

# %%
from dataclasses import replace

import numpy as np

from dcrobust.attack import PerturbationBudget
from dcrobust.data import EnhancementConfig, LabeledDataset, SplitRatio, enhance
from dcrobust.synthetic import make_shapes_dataset
from dcrobust.train_eval import (
    SuiteConfig,
    TrainConfig,
    build_evaluation_suite,
    render_report,
    row_from_model,
    train_reference_cnn,
)

pixels, labels = make_shapes_dataset(4200, seed=0)
train = LabeledDataset(pixels[:4000], labels[:4000])
test = LabeledDataset(pixels[4000:], labels[4000:])
tconf = TrainConfig(epochs=8, lr_step_epochs=6)
budgets = dict(budget_l2=PerturbationBudget("l2", 1.0, 0.1, 5),
               budget_linf=PerturbationBudget("linf", 8 / 255, 2 / 255, 5))

# %%
# Surrogates for enhancement and a disjoint pair for building the suite.
def cnn(seed):
    return train_reference_cnn(train, replace(tconf, weight_seed=seed, order_seed=seed), name=f"cnn{seed}")


surrogate = [cnn(1), cnn(2)]
suite_attackers = [cnn(4), cnn(5)]
suite = build_evaluation_suite(test, suite_attackers, SuiteConfig(**budgets))

# %%
# Baseline on clean data, then the same recipe on the enhanced set.
baseline = train_reference_cnn(train, tconf, name="baseline")
enhanced_set = enhance(train, EnhancementConfig(ratio=SplitRatio.parse("0:1:4"), **budgets),
                       ensemble=surrogate)
enhanced = train_reference_cnn(enhanced_set, tconf, name="enhanced")

rows = [row_from_model(baseline, suite, "shapes"), row_from_model(enhanced, suite, "shapes")]
table, machine = render_report(rows)
print(table)
print(machine)

# %%
# R is unweighted: every subset counts one third regardless of its size.
print("R check:", np.isclose(rows[0].score, np.mean([rows[0].acc_ori, rows[0].acc_adv, rows[0].acc_cor])))
