"""Command-line entry point: ``dcrobust <command> [options]``.

Every command is a thin wrapper over the library and reads the layered
configuration described in :mod:`dcrobust.config`.  Exit codes: 0 success,
2 configuration error, 3 data-format error, 4 runtime or model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .attack import combine_dual_norm, dump_perturbations, run_attack
from .config import (
    attack_config,
    describe_keys,
    dump_config,
    enhancement_config,
    resolve_config,
    suite_config,
    train_config,
)
from .corruptions import REGISTRY, CorruptionSpec, apply_corruption, severity_table_text
from .data import (
    STREAM_ATTACK,
    STREAM_CAP,
    LabeledDataset,
    cap_dataset,
    enhance,
    file_digest,
    load_dataset,
    load_ensemble,
    save_dataset,
    split_sizes,
    stream_rng,
    stream_seed,
)
from .errors import ConfigurationError, DataFormatError, DcrobustError
from .models import ImageBatch, load_model, save_model
from .synthetic import make_shapes_dataset
from .train_eval import (
    EvaluationSuite,
    build_evaluation_suite,
    read_report_rows,
    render_report,
    row_from_model,
    train_reference_cnn,
)

log = logging.getLogger("dcrobust")

SUITE_FILES = {"ori": "ori.bin", "adv": "adv.bin", "cor": "cor.bin"}


# --- helpers -------------------------------------------------------------------

def _config(args, **flags):
    overrides = list(getattr(args, "set", None) or [])
    flags = {"seed": getattr(args, "seed", None), "workers": getattr(args, "workers", None), **flags}
    return resolve_config(getattr(args, "config", None), overrides, flags, getattr(args, "preset", None))


def _ensemble(cfg, paths):
    paths = list(paths or cfg["ensemble"]["checkpoints"] or [])
    expected = cfg["ensemble"]["expected_size"]
    if expected and len(paths) != expected:
        log.warning("ensemble has %d members; the %s preset expects %d", len(paths), cfg["preset"], expected)
    return load_ensemble(paths)


def _load_inputs(paths):
    parts = [load_dataset(p) for p in paths]
    if len(parts) == 1:
        return parts[0]
    ds = LabeledDataset.concatenate(parts)
    ds.source_index = np.arange(len(ds))
    return ds


def read_image(path):
    """PNG (8-bit) or ``.npy`` float image as ``H x W x C`` in ``[0, 1]``."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            img = np.load(path).astype(np.float64)
        else:
            img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{path}: cannot read image ({exc})") from exc
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.min() < 0 or img.max() > 1:
        raise DataFormatError(f"{path}: expected an H x W x C image in [0, 1]")
    return img


def write_image(path, image):
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.asarray(image, dtype=np.float32))
        return
    u8 = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8[:, :, 0] if u8.shape[2] == 1 else u8).save(path, format="PNG")


def load_suite(directory) -> EvaluationSuite:
    directory = Path(directory)
    missing = [f for f in SUITE_FILES.values() if not (directory / f).exists()]
    if missing:
        raise DataFormatError(f"{directory}: missing suite files {missing}")
    return EvaluationSuite(**{k: load_dataset(directory / f) for k, f in SUITE_FILES.items()})


def mosaic(rows):
    """Stack equally sized image rows into one image: row r, column c."""
    return np.concatenate([np.concatenate(list(r), axis=1) for r in rows], axis=0)


# --- commands -----------------------------------------------------------------------

def cmd_show_config(args):
    cfg = _config(args)
    print(dump_config(cfg), end="")
    if args.severities:
        print(severity_table_text())


def cmd_make_synthetic(args):
    images, labels = make_shapes_dataset(args.n, seed=args.seed if args.seed is not None else 0)
    path, _ = save_dataset(LabeledDataset(images, labels), args.out)
    print(f"wrote {args.n} samples to {path} sha256={file_digest(path)}")


def cmd_enhance(args):
    cfg = _config(args, **{"data.ratio": args.ratio, "data.cap": args.cap})
    econf = enhancement_config(cfg)
    t0 = time.perf_counter()
    ds = _load_inputs(args.inputs)
    if econf.cap is not None:
        if econf.cap > len(ds):
            raise ConfigurationError(f"data.cap={econf.cap} exceeds the {len(ds)} input samples")
        ds = cap_dataset(ds, econf.cap, stream_rng(econf.master_seed, STREAM_CAP))
    sizes = split_sizes(len(ds), econf.ratio)
    ensemble = _ensemble(cfg, args.ensemble) if sizes[1] else None
    out = enhance(ds, econf, ensemble=ensemble)
    path, mpath = save_dataset(out, args.out)
    print(f"partition clean/adversarial/corrupted: {sizes[0]}/{sizes[1]}/{sizes[2]}")
    print(f"samples: {len(out)}  time: {time.perf_counter() - t0:.1f}s")
    print(f"wrote {path} and {mpath}")
    print(f"sha256 {file_digest(path)}")


def cmd_train(args):
    cfg = _config(args)
    tconf = train_config(cfg)
    ds = _load_inputs(args.inputs)
    m = cfg["model"]
    t0 = time.perf_counter()
    model = train_reference_cnn(ds, tconf, name=args.name, num_classes=int(m["num_classes"]),
                                channels=tuple(m["channels"]), hidden=int(m["hidden"]))
    save_model(model, args.out)
    for h in model.history:
        print(f"epoch {h['epoch']}: loss {h['loss']:.4f} train-acc {100 * h['accuracy']:.2f}")
    print(f"wrote {args.out}  time: {time.perf_counter() - t0:.1f}s")


def cmd_build_suite(args):
    cfg = _config(args)
    clean = _load_inputs(args.inputs)
    if args.limit is not None:
        clean = clean.subset(np.arange(min(args.limit, len(clean))))
    suite = build_evaluation_suite(clean, _ensemble(cfg, args.ensemble), suite_config(cfg))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key, name in SUITE_FILES.items():
        save_dataset(getattr(suite, key), out / name)
    print(f"wrote suite of 3 x {len(clean)} samples to {out}")


def cmd_evaluate(args):
    model = load_model(args.model)
    suite = load_suite(args.suite)
    row = row_from_model(model, suite, args.dataset_name)
    print(f"ACC(ori) {row.acc_ori:.2f}")
    print(f"ACC(adv) {row.acc_adv:.2f}")
    print(f"ACC(cor) {row.acc_cor:.2f}")
    print(f"R={row.score:.2f}")
    if args.row_out:
        render_report([row], args.row_out)


def cmd_report(args):
    rows = []
    for path in args.rows:
        rows.extend(read_report_rows(path, args.delimiter))
    table, _ = render_report(rows, args.out, args.delimiter)
    print(table)


def cmd_corrupt_one(args):
    image = read_image(args.image)
    out = apply_corruption(image, CorruptionSpec(args.kind, args.severity, args.seed or 0))
    write_image(args.out, out)
    print(f"{args.kind} severity {args.severity} -> {args.out}")


def cmd_attack_one(args):
    cfg = _config(args)
    image = read_image(args.image)
    ensemble = _ensemble(cfg, args.ensemble)
    econf = enhancement_config(cfg)
    attack = attack_config(cfg, stream_seed(econf.master_seed, STREAM_ATTACK))
    batch = ImageBatch(image[None], [args.label])
    d2 = run_attack(batch, ensemble, econf.budget_l2, attack) if args.norm in ("both", "l2") else 0 * batch.pixels
    dinf = run_attack(batch, ensemble, econf.budget_linf, attack) if args.norm in ("both", "linf") \
        else 0 * batch.pixels
    adv = combine_dual_norm(batch, d2, dinf)
    write_image(args.out, adv.pixels[0])
    before = int(np.argmax(ensemble.logits(batch.pixels)[0]))
    after = int(np.argmax(ensemble.logits(adv.pixels)[0]))
    if args.dump:
        if args.norm in ("both", "l2"):
            dump_perturbations(Path(args.dump + "_l2"), d2, econf.budget_l2)
        if args.norm in ("both", "linf"):
            dump_perturbations(Path(args.dump + "_linf"), dinf, econf.budget_linf)
    print(json.dumps({"label": args.label, "ensemble_before": before, "ensemble_after": after,
                      "linf_change": float(np.abs(adv.pixels[0] - image).max())}))


def cmd_sample_grid(args):
    if args.suite:
        suite = load_suite(args.suite)
        n = min(args.n, len(suite.ori))
        rows = [getattr(suite, k).images[:n] for k in ("ori", "adv", "cor")]
    else:
        if not args.inputs:
            raise ConfigurationError("sample-grid needs --suite or --in")
        cfg = _config(args)
        clean = _load_inputs(args.inputs)
        clean = clean.subset(np.arange(min(args.n, len(clean))))
        suite = build_evaluation_suite(clean, _ensemble(cfg, args.ensemble), suite_config(cfg))
        rows = [suite.ori.images, suite.adv.images, suite.cor.images]
    grid = mosaic(rows)
    write_image(args.out, grid)
    print(f"wrote {grid.shape[1]}x{grid.shape[0]} mosaic to {args.out}")


# --- parser -------------------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--config", help="YAML config file (overrides the packaged defaults)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one dotted config key, e.g. --set attack.momentum_mu=0.5")
    p.add_argument("--preset", choices=("desk", "paper"), help="fidelity preset (default: desk)")
    p.add_argument("--workers", type=int, help="sample-level parallelism (output is unchanged)")
    if seed:
        p.add_argument("--seed", type=int, help="master seed for every random decision")


def build_parser():
    epilog = "configuration keys and defaults:\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="dcrobust", description=__doc__.splitlines()[0], epilog=epilog,
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("enhance", cmd_enhance, "split, attack and corrupt a training set (cap is optional)")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="CIFAR-layout binary file(s)")
    p.add_argument("--out", required=True, help="output binary file; a .manifest.jsonl is written beside it")
    p.add_argument("--ensemble", nargs="+", help="surrogate checkpoints (default: ensemble.checkpoints)")
    p.add_argument("--ratio", help="clean:adversarial:corrupted, e.g. 0:1:4")
    p.add_argument("--cap", type=int, help="keep a random subset of this many samples first")
    _common(p)

    p = add("train", cmd_train, "train the reference CNN on a dataset file")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--name", default="reference_cnn", help="model name stored in the checkpoint")
    _common(p)

    p = add("build-suite", cmd_build_suite, "write clean, adversarial and corrupted test subsets")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="clean held-out test file(s)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ensemble", nargs="+", help="attacker checkpoints")
    p.add_argument("--limit", type=int, help="use only the first N clean samples")
    _common(p)

    p = add("evaluate", cmd_evaluate, "print ACC on each subset and R for one checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--suite", required=True, help="directory written by build-suite")
    p.add_argument("--dataset-name", default="", help="label for the dataset column of --row-out")
    p.add_argument("--row-out", help="also write the result as a one-row report file")

    p = add("report", cmd_report, "validate report rows and render a table plus a machine file")
    p.add_argument("--rows", nargs="+", required=True,
                   help="delimited files with model,dataset,acc_ori,acc_adv,acc_cor[,r] (percent)")
    p.add_argument("--out", help="machine-readable output file")
    p.add_argument("--delimiter", default=",")

    p = add("corrupt-one", cmd_corrupt_one, "apply one corruption to one image")
    p.add_argument("--image", required=True, help="PNG or .npy image")
    p.add_argument("--kind", required=True, choices=REGISTRY)
    p.add_argument("--severity", type=int, default=3, choices=range(1, 6))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("attack-one", cmd_attack_one, "dual-norm attack on one image")
    p.add_argument("--image", required=True, help="PNG or .npy image")
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--ensemble", nargs="+")
    p.add_argument("--norm", choices=("both", "l2", "linf"), default="both")
    p.add_argument("--dump", help="prefix for raw perturbation arrays and their audit manifest")
    p.add_argument("--out", required=True)
    _common(p)

    p = add("sample-grid", cmd_sample_grid, "mosaic of clean / adversarial / corrupted rows")
    p.add_argument("--suite", help="directory written by build-suite")
    p.add_argument("--in", dest="inputs", nargs="+", help="clean images to attack and corrupt on the fly")
    p.add_argument("--ensemble", nargs="+")
    p.add_argument("--n", type=int, default=8, help="images per row")
    p.add_argument("--out", required=True, help="lossless PNG output")
    _common(p)

    p = add("make-synthetic", cmd_make_synthetic, "write the procedural 10-class stand-in dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("show-config", cmd_show_config, "print the fully resolved configuration")
    p.add_argument("--severities", action="store_true", help="also print the corruption severity tables")
    _common(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DcrobustError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return DataFormatError.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
