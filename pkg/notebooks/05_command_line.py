"""
The ``dcrobust`` command line
=============================

Everything above is also reachable from the shell.  This script drives the
same entry point in-process with :func:`dcrobust.cli.main`; each call is
equivalent to typing ``dcrobust <args>``.
"""

# %%
import tempfile
from pathlib import Path

from dcrobust.cli import main

work = Path(tempfile.mkdtemp(prefix="dcrobust_"))


def run(*args):
    print("$ dcrobust", " ".join(str(a) for a in args))
    code = main([str(a) for a in args])
    print("exit", code)
    return code


# %%
# Settings come from layers: packaged defaults, a preset, a YAML file,
# ``--set key=value`` and finally dedicated flags.
run("show-config", "--set", "data.ratio=1:1:3", "--seed", "5")

# %%
# Synthetic data in CIFAR binary format, two small models, and an
# enhanced copy of the training set.
run("make-synthetic", "--n", 2000, "--seed", 0, "--out", work / "train.bin")
run("make-synthetic", "--n", 100, "--seed", 1, "--out", work / "test.bin")
fast = ["--set", "train.epochs=6", "--set", "train.lr_step_epochs=5"]
run("train", "--in", work / "train.bin", "--out", work / "s1.npz", "--seed", 1, *fast)
run("train", "--in", work / "train.bin", "--out", work / "s2.npz", "--seed", 2, *fast)
short = ["--set", "budget_l2.iterations=3", "--set", "budget_linf.iterations=3"]
run("enhance", "--in", work / "train.bin", "--out", work / "enh.bin", "--ratio", "1:1:3",
    "--ensemble", work / "s1.npz", work / "s2.npz", *short)

# %%
# Train on the enhanced set, build a suite with the surrogates, and score.
run("train", "--in", work / "enh.bin", "--out", work / "model.npz", *fast)
run("build-suite", "--in", work / "test.bin", "--out-dir", work / "suite",
    "--ensemble", work / "s1.npz", work / "s2.npz", *short)
run("evaluate", "--model", work / "model.npz", "--suite", work / "suite", "--row-out", work / "row.csv")
run("report", "--rows", work / "row.csv")

# %%
# Bad input gives a clear message and a non-zero exit code.
run("enhance", "--in", work / "missing.bin", "--out", work / "x.bin")
