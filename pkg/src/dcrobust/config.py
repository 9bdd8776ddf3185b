"""Layered pipeline configuration.

A configuration is a nested dict with the keys of ``default_config.yaml``.
Layers are merged in this order, later winning: packaged defaults, the
preset, a user YAML file, ``--set dotted.key=value`` overrides, then
dedicated command-line flags.  Unknown keys are rejected so typos do not
pass silently.
"""

from __future__ import annotations

import copy
import re
from importlib import resources
from pathlib import Path

import yaml

from .attack import AttackConfig, PerturbationBudget
from .corruptions import SEVERITY_TABLE
from .data import EnhancementConfig, SplitRatio
from .errors import ConfigurationError
from .train_eval import SuiteConfig, TrainConfig

PRESETS = {
    "desk": {
        "budget_linf": {"iterations": 20},
        "budget_l2": {"iterations": 20},
        "ensemble": {"expected_size": 2},
    },
    "paper": {
        "budget_linf": {"iterations": 300},
        "budget_l2": {"iterations": 300},
        "ensemble": {"expected_size": 5},
    },
}

READ_ONLY = ("corruption_severity",)


class _Loader(yaml.SafeLoader):
    """Safe loader with YAML 1.2 numbers: ``1:1:3`` stays a string, ``1e-3`` is a float."""


_Loader.yaml_implicit_resolvers = {
    ch: [(tag, rx) for tag, rx in rules if tag not in ("tag:yaml.org,2002:int", "tag:yaml.org,2002:float")]
    for ch, rules in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:int", re.compile(r"^[-+]?(0|[1-9][0-9_]*)$"), list("-+0123456789"))
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^(?=[-+]?\.?[0-9])[-+]?([0-9][0-9_]*)?\.?[0-9_]*([eE][-+]?[0-9]+)?$|^[-+]?\.(inf|Inf|INF)$|^\.(nan|NaN|NAN)$"),
    list("-+0123456789."))


def load_yaml(text):
    return yaml.load(text, Loader=_Loader)  # noqa: S506  (a SafeLoader subclass)


def default_config() -> dict:
    text = resources.files(__package__).joinpath("default_config.yaml").read_text(encoding="utf-8")
    return load_yaml(text)


def flatten(cfg, prefix=""):
    """``{"a": {"b": 1}}`` -> ``{"a.b": 1}``; lists and scalars are leaves."""
    out = {}
    for key, value in cfg.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and value:
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _merge(base, layer, where="config"):
    for key, value in layer.items():
        if key not in base:
            raise ConfigurationError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where}: {key!r} must be a mapping")
            _merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value
    return base


def _nest(dotted, value):
    out = node = {}
    parts = dotted.split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return out


def parse_override(text):
    """``"attack.momentum_mu=0.5"`` -> ``{"attack": {"momentum_mu": 0.5}}`` (values parsed as YAML)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    try:
        value = load_yaml(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"--set {key}: cannot parse {raw!r}") from exc
    return _nest(key.strip(), value)


def read_config_file(path):
    try:
        data = load_yaml(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc.strerror})") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def resolve_config(path=None, overrides=(), flags=None, preset=None) -> dict:
    """Merge every layer and validate the result.

    Args:
        path: optional user YAML file.
        overrides: ``key=value`` strings from ``--set``.
        flags: dotted keys set by dedicated flags (``None`` values are skipped).
        preset: preset name from the command line; otherwise taken from the
            file or the overrides, defaulting to ``desk``.
    """
    user = read_config_file(path) if path else {}
    layers = [(str(path), user)] + [(f"--set {o}", parse_override(o)) for o in overrides]
    flag_layers = [("flag", _nest(k, v)) for k, v in (flags or {}).items() if v is not None]
    if preset is None:
        for _, layer in layers:
            preset = layer.get("preset", preset)
    preset = preset or "desk"
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = default_config()
    _merge(cfg, PRESETS[preset], f"preset {preset}")
    for where, layer in layers + flag_layers:
        _merge(cfg, layer, where)
    cfg["preset"] = preset
    validate(cfg)
    return cfg


def validate(cfg):
    """Build every typed object once so bad values fail early with a clear message."""
    enhancement_config(cfg)
    train_config(cfg)
    suite_config(cfg)
    if cfg["workers"] < 1:
        raise ConfigurationError("workers must be >= 1")
    if cfg["data"]["chunk_size"] < 1:
        raise ConfigurationError("data.chunk_size must be >= 1")
    table = {k: {n: tuple(v) for n, v in d.items()} for k, d in cfg["corruption_severity"].items()}
    if table != {k: {n: tuple(v) for n, v in d.items()} for k, d in SEVERITY_TABLE.items()}:
        raise ConfigurationError("corruption_severity is read-only and must match the built-in tables")


def _budget(cfg, key, norm):
    b = cfg[key]
    try:
        return PerturbationBudget(norm, float(b["epsilon"]), float(b["step_alpha"]), int(b["iterations"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"{key}: {exc}") from exc


def attack_config(cfg, seed=0) -> AttackConfig:
    a = cfg["attack"]
    try:
        return AttackConfig(float(a["momentum_mu"]), int(a["kernel_size"]), float(a["kernel_sigma"]),
                            float(a["diversify_prob"]), float(a["resize_low_fraction"]), str(a["loss"]),
                            int(seed))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"attack: {exc}") from exc


def enhancement_config(cfg) -> EnhancementConfig:
    cap = cfg["data"]["cap"]
    if cap is not None and (int(cap) != cap or cap < 0):
        raise ConfigurationError("data.cap must be a non-negative integer or null")
    return EnhancementConfig(
        ratio=SplitRatio.parse(cfg["data"]["ratio"]),
        budget_linf=_budget(cfg, "budget_linf", "linf"),
        budget_l2=_budget(cfg, "budget_l2", "l2"),
        attack=attack_config(cfg),
        ensemble_paths=list(cfg["ensemble"]["checkpoints"] or []),
        master_seed=int(cfg["seed"]),
        cap=None if cap is None else int(cap),
        workers=int(cfg["workers"]),
        chunk_size=int(cfg["data"]["chunk_size"]),
    )


def train_config(cfg) -> TrainConfig:
    t = dict(cfg["train"])
    for key in ("weight_seed", "order_seed"):
        if t[key] is None:
            t[key] = cfg["seed"]
    try:
        return TrainConfig(int(t["epochs"]), int(t["batch_size"]), float(t["learning_rate"]),
                           float(t["momentum"]), float(t["weight_decay"]), int(t["lr_step_epochs"]),
                           float(t["lr_gamma"]), int(t["weight_seed"]), int(t["order_seed"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"train: {exc}") from exc


def suite_config(cfg) -> SuiteConfig:
    return SuiteConfig(_budget(cfg, "budget_l2", "l2"), _budget(cfg, "budget_linf", "linf"),
                       attack_config(cfg), int(cfg["suite"]["seed"]))


def dump_config(cfg) -> str:
    return yaml.safe_dump(copy.deepcopy(cfg), sort_keys=False, default_flow_style=None)


def describe_keys() -> str:
    """One line per configuration key with its default, for ``--help``."""
    lines = []
    for key, value in flatten(default_config()).items():
        if key.split(".")[0] in READ_ONLY:
            continue
        lines.append(f"  {key} = {yaml.safe_dump(value, default_flow_style=True).strip().removesuffix('...').strip()}")
    lines.append("  corruption_severity.* (read-only; see show-config)")
    return "\n".join(lines)
