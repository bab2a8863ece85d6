"""Run configuration: one INI document covering every stage of the pipeline.

Precedence is flags > file > defaults. Unknown sections or keys are
rejected rather than ignored so a typo cannot silently fall back to a
default. The resolved document has a canonical rendering; its sha256 is
the config hash stamped on every artifact a run produces.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, fields, replace

from .analysis import ProbeConfig
from .data import SynthConfig
from .distill import TASKS, DistillConfig
from .encoders import EncoderConfig
from .errors import ConfigError, MissingInput
from .pretrain import AugmentConfig, PretrainConfig
from .similarity import WeightSpec

_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class EncoderSettings:
    """Encoder shape minus the data-dependent dimensions.

    input_channels and max_timesteps always come from the cohort at hand,
    so the config file cannot pin them to a mismatched value.
    """

    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    pooling: str = "mean"
    ffn_factor: int = 4

    def materialize(self, input_channels: int, max_timesteps: int) -> EncoderConfig:
        return EncoderConfig(layers=self.layers, heads=self.heads,
                             model_dim=self.model_dim,
                             input_channels=input_channels,
                             max_timesteps=max_timesteps,
                             pooling=self.pooling, ffn_factor=self.ffn_factor)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    synth: SynthConfig
    fractions: tuple[float, float, float]
    stratify_task: str | None
    weights: WeightSpec
    encoder: EncoderSettings
    augment: AugmentConfig
    pretrain: PretrainConfig
    distill: DistillConfig
    probe: ProbeConfig
    probe_task: str
    label_fraction: float
    neighbors_k: int
    n_random_pairs: int | None
    n_resamples: int
    ci_level: float
    eval_split: str


def _dataclass_keys(cls, skip=("seed",)) -> list[str]:
    return [f.name for f in fields(cls) if f.name not in skip]

# section -> ordered keys; sub-config sections mirror their dataclasses so
# the schema cannot drift from the types it feeds
_SCHEMA: dict[str, list[str]] = {
    "run": ["seed", "output_dir"],
    "synth": _dataclass_keys(SynthConfig),
    "split": ["train", "val", "test", "stratify_task"],
    "weights": _dataclass_keys(WeightSpec),
    "encoder": _dataclass_keys(EncoderSettings),
    "augment": _dataclass_keys(AugmentConfig),
    "pretrain": [k for k in _dataclass_keys(PretrainConfig) if k != "weight_spec"],
    "distill": _dataclass_keys(DistillConfig),
    "probe": _dataclass_keys(ProbeConfig) + ["label_fraction", "task"],
    "neighbors": ["k", "n_random_pairs"],
    "eval": ["n_resamples", "level", "split"],
}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults() -> dict[tuple[str, str], str]:
    d: dict[tuple[str, str], str] = {}

    def pull(section, obj):
        for key in _SCHEMA[section]:
            d[(section, key)] = _fmt(getattr(obj, key))

    d[("run", "seed")] = "0"
    d[("run", "output_dir")] = "runs/out"
    pull("synth", SynthConfig())
    d[("split", "train")] = "0.7"
    d[("split", "val")] = "0.15"
    d[("split", "test")] = "0.15"
    d[("split", "stratify_task")] = "binary"
    pull("weights", WeightSpec())
    pull("encoder", EncoderSettings())
    pull("augment", AugmentConfig())
    pull("pretrain", PretrainConfig())
    pull("distill", DistillConfig())
    for key in _dataclass_keys(ProbeConfig):
        d[("probe", key)] = _fmt(getattr(ProbeConfig(), key))
    d[("probe", "label_fraction")] = "1.0"
    d[("probe", "task")] = "binary"
    d[("neighbors", "k")] = "5"
    d[("neighbors", "n_random_pairs")] = "auto"
    d[("eval", "n_resamples")] = "1000"
    d[("eval", "level")] = "0.95"
    d[("eval", "split")] = "test"
    return d


def parse_override(text: str) -> tuple[tuple[str, str], str]:
    """Split a `section.key=value` flag into its schema address and value."""
    head, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    section, dot, key = head.strip().partition(".")
    if not dot:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    _check_key(section.strip(), key.strip())
    return (section.strip(), key.strip()), value.strip()


def _check_key(section: str, key: str) -> None:
    if section not in _SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in _SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")


def _read_file(path: str) -> dict[tuple[str, str], str]:
    if not os.path.exists(path):
        raise MissingInput(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out: dict[tuple[str, str], str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            _check_key(section, key)
            out[(section, key)] = value.strip()
    return out


def _to_int(raw: str, where: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None


def _to_float(raw: str, where: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {raw!r}") from None


def resolve_config(path: str | None = None,
                   overrides=()) -> RunConfig:
    """Defaults, then the file, then overrides; returns validated configs.

    `overrides` is an iterable of `section.key=value` strings (or
    pre-parsed pairs from parse_override).
    """
    merged = _defaults()
    if path is not None:
        merged.update(_read_file(path))
    for item in overrides:
        addr, value = item if isinstance(item, tuple) else parse_override(item)
        _check_key(*addr)
        merged[addr] = value

    def get(section, key):
        return merged[(section, key)]

    def geti(section, key):
        return _to_int(get(section, key), f"[{section}] {key}")

    def getf(section, key):
        return _to_float(get(section, key), f"[{section}] {key}")

    seed = geti("run", "seed")

    def build(cls, section, **extra):
        kwargs = {}
        for key in _SCHEMA[section]:
            if key in extra or key not in {f.name for f in fields(cls)}:
                continue
            kind = cls.__dataclass_fields__[key].type
            kind = kind if isinstance(kind, str) else kind.__name__
            raw = get(section, key)
            if kind == "int":
                kwargs[key] = _to_int(raw, f"[{section}] {key}")
            elif kind == "float":
                kwargs[key] = _to_float(raw, f"[{section}] {key}")
            else:
                kwargs[key] = raw
        kwargs.update(extra)
        return cls(**kwargs)

    stratify = get("split", "stratify_task")
    if stratify not in ("none",) + TASKS:
        raise ConfigError(f"[split] stratify_task must be none or one of {TASKS}")
    probe_task = get("probe", "task")
    if probe_task not in TASKS:
        raise ConfigError(f"[probe] task must be one of {TASKS}")
    eval_split = get("eval", "split")
    if eval_split not in _SPLITS:
        raise ConfigError(f"[eval] split must be one of {_SPLITS}")
    raw_pairs = get("neighbors", "n_random_pairs")
    n_random = None if raw_pairs == "auto" else _to_int(
        raw_pairs, "[neighbors] n_random_pairs")

    weights = build(WeightSpec, "weights")
    return RunConfig(
        seed=seed,
        output_dir=get("run", "output_dir"),
        synth=build(SynthConfig, "synth", seed=seed),
        fractions=(getf("split", "train"), getf("split", "val"),
                   getf("split", "test")),
        stratify_task=None if stratify == "none" else stratify,
        weights=weights,
        encoder=build(EncoderSettings, "encoder"),
        augment=build(AugmentConfig, "augment", seed=seed),
        pretrain=build(PretrainConfig, "pretrain", seed=seed,
                       weight_spec=weights),
        distill=build(DistillConfig, "distill", seed=seed),
        probe=build(ProbeConfig, "probe", seed=seed),
        probe_task=probe_task,
        label_fraction=getf("probe", "label_fraction"),
        neighbors_k=geti("neighbors", "k"),
        n_random_pairs=n_random,
        n_resamples=geti("eval", "n_resamples"),
        ci_level=getf("eval", "level"),
        eval_split=eval_split,
    )


def render_config(cfg: RunConfig) -> str:
    """Canonical INI text: schema order, normalized value formatting."""
    values = {
        ("run", "seed"): cfg.seed,
        ("run", "output_dir"): cfg.output_dir,
        ("split", "train"): cfg.fractions[0],
        ("split", "val"): cfg.fractions[1],
        ("split", "test"): cfg.fractions[2],
        ("split", "stratify_task"): cfg.stratify_task or "none",
        ("probe", "label_fraction"): cfg.label_fraction,
        ("probe", "task"): cfg.probe_task,
        ("neighbors", "k"): cfg.neighbors_k,
        ("neighbors", "n_random_pairs"):
            "auto" if cfg.n_random_pairs is None else cfg.n_random_pairs,
        ("eval", "n_resamples"): cfg.n_resamples,
        ("eval", "level"): cfg.ci_level,
        ("eval", "split"): cfg.eval_split,
    }
    objs = {"synth": cfg.synth, "weights": cfg.weights, "encoder": cfg.encoder,
            "augment": cfg.augment, "pretrain": cfg.pretrain,
            "distill": cfg.distill, "probe": cfg.probe}
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key in keys:
            if (section, key) in values:
                value = values[(section, key)]
            else:
                value = getattr(objs[section], key)
            out.write(f"{key} = {_fmt(value)}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical rendering, ignoring where artifacts land.

    Two runs that differ only in output_dir are the same experiment, so
    they stamp the same hash.
    """
    lines = [line for line in render_config(cfg).splitlines(keepends=True)
             if not line.startswith("output_dir = ")]
    return hashlib.sha256("".join(lines).encode("utf-8")).hexdigest()


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """The same run at a different seed, reseeding every sub-config."""
    return replace(
        cfg, seed=seed,
        synth=replace(cfg.synth, seed=seed),
        augment=replace(cfg.augment, seed=seed),
        pretrain=replace(cfg.pretrain, seed=seed),
        distill=replace(cfg.distill, seed=seed),
        probe=replace(cfg.probe, seed=seed),
    )
