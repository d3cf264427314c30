"""Run configuration: YAML tree, dotted overrides and typed sections."""

from __future__ import annotations

import copy
from dataclasses import fields
from importlib import resources
from pathlib import Path

import yaml

from . import signal_pipeline as sp
from .dataio.synth import SynthConfig
from .errors import ConfigError
from .leadbridge import PretrainConfig
from .profine.harness import ScenarioConfig
from .profine.model import ModelConfig

BUILTIN = ("default", "desk")
SECTIONS = ("seed", "synth", "windowing", "augment", "model", "pretrain", "train")
_PRETRAIN_EXTRA = ("val_fraction", "normalize_inputs")
_TRAIN_KEYS = ("split", "scenario", "k", "val_fraction", "K", "xi", "lr_mode",
               "adapter_trainable", "weight_decay", "warmup_ratio", "patience", "gamma",
               "scenario_overrides")


def _builtin(name: str) -> dict:
    text = resources.files("cogadapt.configs").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text) or {}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "scenario_overrides":
            out[k] = deep_merge(out[k], v)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            merged = copy.deepcopy(out[k])
            for s, sv in v.items():
                merged[s] = {**merged.get(s, {}), **sv}
            out[k] = merged
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source: str | None = None) -> dict:
    """Builtin name ("default", "desk") or path; layered on top of the defaults."""
    tree = _builtin("default")
    if source is None or source == "default":
        return tree
    if source in BUILTIN:
        return deep_merge(tree, _builtin(source))
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        over = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(over, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return deep_merge(tree, over)


def apply_override(tree: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` in place; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = yaml.safe_load(raw)


def _section(tree: dict, name: str) -> dict:
    sec = tree.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _build(cls, values: dict, section: str, skip=()):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed - set(skip))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {unknown}")
    try:
        return cls(**{k: v for k, v in values.items() if k in allowed})
    except TypeError as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def windowing_config(tree) -> sp.WindowingConfig:
    w = dict(_section(tree, "windowing"))
    if "band" in w:
        w["band"] = tuple(w["band"])
    return _build(sp.WindowingConfig, w, "windowing")


def augment_config(tree) -> sp.AugmentConfig:
    a = dict(_section(tree, "augment"))
    a.setdefault("seed", int(tree.get("seed", 0)))
    return _build(sp.AugmentConfig, a, "augment")


def synth_config(tree) -> SynthConfig:
    s = dict(_section(tree, "synth"))
    s.setdefault("seed", int(tree.get("seed", 0)))
    return _build(SynthConfig, s, "synth")


def model_config(tree) -> ModelConfig:
    return _build(ModelConfig, _section(tree, "model"), "model")


def pretrain_config(tree) -> PretrainConfig:
    return _build(PretrainConfig, _section(tree, "pretrain"), "pretrain", skip=_PRETRAIN_EXTRA)


def train_section(tree) -> dict:
    t = _section(tree, "train")
    unknown = sorted(set(t) - set(_TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown key(s) in train: {unknown}")
    if t.get("split") not in ("kfold", "loso"):
        raise ConfigError(f"train.split must be kfold or loso, got {t.get('split')!r}")
    return t


def scenario_config(tree, scenario: str | None = None, split: str | None = None) -> ScenarioConfig:
    """Preset for (scenario, split) with config-level overrides."""
    t = train_section(tree)
    scenario = scenario or t["scenario"]
    split = split or t["split"]
    over = {k: t[k] for k in ("K", "xi", "lr_mode", "adapter_trainable", "weight_decay",
                              "warmup_ratio", "patience", "gamma") if k in t}
    over["augment_cfg"] = augment_config(tree)
    extra = (t.get("scenario_overrides") or {}).get(scenario, {}) or {}
    allowed = {f.name for f in fields(ScenarioConfig)}
    bad = sorted(set(extra) - allowed)
    if bad:
        raise ConfigError(f"unknown scenario override key(s): {bad}")
    over.update(extra)
    return ScenarioConfig.preset(scenario, split, **over)


def validate(tree: dict) -> None:
    """Build every typed section once so bad values fail before any work starts."""
    unknown = sorted(set(tree) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    if not isinstance(tree.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    windowing_config(tree)
    augment_config(tree)
    synth_config(tree)
    model_config(tree)
    pretrain_config(tree)
    p = _section(tree, "pretrain")
    if not 0.0 < float(p.get("val_fraction", 0.2)) < 1.0:
        raise ConfigError("pretrain.val_fraction must lie in (0, 1)")
    for s in ("A", "B", "C"):
        scenario_config(tree, s)


def dump(tree: dict) -> str:
    return yaml.safe_dump(tree, sort_keys=True, default_flow_style=False)
