"""Declarative run configuration.

A run configuration is a flat ``key = value`` text file (``#`` comments,
comma-separated lists). Schema version 1 keys:

    schema_version     1 (required)
    dataset_root       directory with one subdirectory per class (required)
    output_dir         results root; runs land in <output_dir>/<run_id>/ (default "results")
    backbones          registry names, comma-separated (required)
    strategies         strategy names, comma-separated (required)
    unfreeze.<STRAT>   U for a strategy needing one; several values form a search grid
    unfreeze.<STRAT>.<Backbone>   per-backbone U or grid, overriding the line above
    intermediate_root  multi-class dataset for HAM-style strategies (optional)
    weights            imagenet | none | path to a backbone .weights.h5 (default imagenet)
    input_size         square input override, e.g. 64 for quick runs (optional)
    k                  number of folds (default 5)
    seed               master seed (default 0)
    val_fraction       stratified validation share of each training rotation (default 0.10)
    dedup_threshold    dHash Hamming threshold for duplicate removal, -1 disables (default 0)
    augment            true | false (default true)
    expansion_factor   augmented replicas per training image (default 20)
    dropout            classifier-head dropout (default 0.2)
    hp.<field>         any TrainingHyperparams field, e.g. hp.max_epochs = 30

Unknown keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import BackboneError, available, describe
from .transfer import Strategy, TrainingHyperparams

SCHEMA_VERSION = 1
_SECTION = "run"
_SCALAR_KEYS = {
    "schema_version", "dataset_root", "output_dir", "backbones", "strategies", "intermediate_root",
    "weights", "input_size", "k", "seed", "val_fraction", "dedup_threshold", "augment",
    "expansion_factor", "dropout",
}
_HP_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainingHyperparams)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str
    backbones: tuple[str, ...]
    strategies: tuple[Strategy, ...]
    unfreeze: dict[str, tuple[int, ...]] = field(default_factory=dict)
    output_dir: str = "results"
    intermediate_root: str | None = None
    weights: str = "imagenet"
    input_size: int | None = None
    k: int = 5
    seed: int = 0
    val_fraction: float = 0.10
    dedup_threshold: int = 0
    augment: bool = True
    expansion_factor: int = 20
    dropout: float = 0.2
    hyperparams: TrainingHyperparams = TrainingHyperparams()
    source_bytes: bytes = b""

    def run_id(self, seed: int | None = None) -> str:
        """Short hash of the configuration text and the seed."""
        h = hashlib.sha256(self.source_bytes)
        h.update(f"\0seed={self.seed if seed is None else seed}".encode())
        return h.hexdigest()[:12]

    def descriptor(self, backbone: str):
        d = describe(backbone, self.weights)
        return d.with_input_size(self.input_size) if self.input_size else d

    def u_values(self, strategy: Strategy, backbone: str) -> tuple[int, ...]:
        return self.unfreeze.get(f"{strategy.value}.{backbone}", self.unfreeze.get(strategy.value, ()))


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]


def _bool(key: str, value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {value!r}")


def _num(key: str, value: str, kind):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def parse_config(text: str | bytes, base_dir: str | os.PathLike = ".") -> RunConfig:
    raw = text if isinstance(text, bytes) else text.encode()
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + raw.decode())
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    kv = dict(cp[_SECTION])

    unknown = [k for k in kv if k not in _SCALAR_KEYS and not k.startswith(("unfreeze.", "hp."))]
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    for req in ("schema_version", "dataset_root", "backbones", "strategies"):
        if req not in kv:
            raise ConfigError(f"missing required key {req!r}")
    if _num("schema_version", kv["schema_version"], int) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {kv['schema_version']}; this build reads {SCHEMA_VERSION}")

    base = Path(base_dir)
    resolve = lambda p: str(p if os.path.isabs(p) else base / p)

    backbones = tuple(_split(kv["backbones"]))
    if not backbones:
        raise ConfigError("backbones list is empty")
    for b in backbones:
        try:
            if not available(b):
                raise ConfigError(f"backbone {b} has no implementation available")
        except BackboneError as exc:
            raise ConfigError(str(exc)) from None

    try:
        strategies = tuple(Strategy(s) for s in _split(kv["strategies"]))
    except ValueError as exc:
        raise ConfigError(f"{exc}; valid strategies: {', '.join(s.value for s in Strategy)}") from None
    if not strategies:
        raise ConfigError("strategies list is empty")

    unfreeze: dict[str, tuple[int, ...]] = {}
    for key, value in kv.items():
        if key.startswith("unfreeze."):
            _, name, *rest = key.split(".", 2)
            if rest and rest[0] not in backbones:
                raise ConfigError(f"{key}: backbone {rest[0]!r} is not in the backbones list")
            try:
                s = Strategy(name)
            except ValueError:
                raise ConfigError(f"{key}: unknown strategy {name!r}") from None
            if not s.needs_u:
                raise ConfigError(f"{key}: strategy {name} takes no unfreeze depth")
            unfreeze[key.split(".", 1)[1]] = tuple(_num(key, v, int) for v in _split(value))
    for s in strategies:
        for b in backbones:
            if s.needs_u and not unfreeze.get(f"{s.value}.{b}", unfreeze.get(s.value)):
                raise ConfigError(f"strategy {s.value} needs unfreeze.{s.value} (a U value or a grid) for {b}")
        if s.needs_intermediate and "intermediate_root" not in kv:
            raise ConfigError(f"strategy {s.value} needs intermediate_root")

    hp_over = {}
    for key, value in kv.items():
        if key.startswith("hp."):
            name = key[3:]
            if name not in _HP_FIELDS:
                raise ConfigError(f"{key}: unknown hyperparameter; valid: {', '.join(_HP_FIELDS)}")
            kind = int if _HP_FIELDS[name] in (int, "int") else float
            hp_over[name] = _num(key, value, kind)
    try:
        hp = TrainingHyperparams(**hp_over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    weights = kv.get("weights", "imagenet").strip()
    if weights not in ("imagenet", "none"):
        weights = resolve(weights)

    cfg = RunConfig(
        dataset_root=resolve(kv["dataset_root"]),
        backbones=backbones,
        strategies=strategies,
        unfreeze=unfreeze,
        output_dir=resolve(kv.get("output_dir", "results")),
        intermediate_root=resolve(kv["intermediate_root"]) if "intermediate_root" in kv else None,
        weights=weights,
        input_size=_num("input_size", kv["input_size"], int) if "input_size" in kv else None,
        k=_num("k", kv.get("k", "5"), int),
        seed=_num("seed", kv.get("seed", "0"), int),
        val_fraction=_num("val_fraction", kv.get("val_fraction", "0.10"), float),
        dedup_threshold=_num("dedup_threshold", kv.get("dedup_threshold", "0"), int),
        augment=_bool("augment", kv.get("augment", "true")),
        expansion_factor=_num("expansion_factor", kv.get("expansion_factor", "20"), int),
        dropout=_num("dropout", kv.get("dropout", "0.2"), float),
        hyperparams=hp,
        source_bytes=raw,
    )
    if cfg.k < 2:
        raise ConfigError("k must be >= 2")
    if not 0.0 < cfg.val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in (0, 1)")
    if cfg.expansion_factor < 1:
        raise ConfigError("expansion_factor must be >= 1")
    for b in backbones:
        n = describe(b).total_layers
        for s in strategies:
            bad = [u for u in cfg.u_values(s, b) if not 0 <= u <= n]
            if bad:
                raise ConfigError(f"unfreeze.{s.value}: {bad} outside [0, {n}] for {b}")
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    p = Path(path)
    return parse_config(p.read_bytes(), p.parent)
