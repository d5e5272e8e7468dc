"""One validated, hashable configuration tree for every subsystem.

A single JSON file (or dict) drives dataset generation, model dimensions,
the three training stages, evaluation protocols, and part-transfer
thresholds.  Unknown keys anywhere are rejected so a typo cannot silently
fall back to a default, and the canonical serialization is hashable for
reproducibility manifests.
"""

import dataclasses
import hashlib
import json

from .dataset import DatasetConfig
from .evaluation import K_LIST_DEFAULT, MAX_EVAL_PIXELS, PROTOCOLS
from .model import ModelConfig
from .parttransfer import TransferThresholds
from .training import (DEFAULT_EPOCH_MULTIPLIER, StageConfig,
                       default_stage_configs)


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainingSection:
    seed: int = 0
    epoch_multiplier: int = DEFAULT_EPOCH_MULTIPLIER

    def __post_init__(self):
        if self.epoch_multiplier < 1:
            raise ValueError("epoch_multiplier must be at least 1")


@dataclasses.dataclass(frozen=True)
class EvalSection:
    seed: int = 0
    protocols: tuple = PROTOCOLS
    k_list: tuple = tuple(K_LIST_DEFAULT)
    max_pixels: int = MAX_EVAL_PIXELS

    def __post_init__(self):
        object.__setattr__(self, "protocols", tuple(self.protocols))
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        unknown = set(self.protocols) - set(PROTOCOLS)
        if unknown:
            raise ValueError(f"unknown protocols {sorted(unknown)}")
        if self.max_pixels < 1:
            raise ValueError("max_pixels must be at least 1")
        if any(k < 1 for k in self.k_list):
            raise ValueError("k values must be positive")


@dataclasses.dataclass
class Config:
    dataset: DatasetConfig
    model: ModelConfig
    stages: list
    training: TrainingSection
    eval: EvalSection
    transfer: TransferThresholds


def default_config() -> Config:
    dataset = DatasetConfig()
    return Config(dataset=dataset, model=ModelConfig(),
                  stages=default_stage_configs(dataset.resolution),
                  training=TrainingSection(), eval=EvalSection(),
                  transfer=TransferThresholds())


# ---------------------------------------------------------------------------
# dict <-> config
# ---------------------------------------------------------------------------


def _build(cls, defaults: dict, updates, path: str):
    if not isinstance(updates, dict):
        raise ConfigError(f"section '{path}' must be an object")
    unknown = set(updates) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under '{path}'")
    merged = {**defaults, **updates}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{path}' section: {exc}") from exc


def _stage_from_dict(default: StageConfig, updates: dict, path: str) -> StageConfig:
    base = dataclasses.asdict(default)
    if not isinstance(updates, dict):
        raise ConfigError(f"'{path}' must be an object")
    unknown = set(updates) - set(base)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under '{path}'")
    updates = dict(updates)
    if "lr_scales" in updates:
        scales = updates["lr_scales"]
        if not isinstance(scales, dict):
            raise ConfigError(f"'{path}.lr_scales' must be an object")
        bad = set(scales) - set(base["lr_scales"])
        if bad:
            raise ConfigError(
                f"unknown group(s) {sorted(bad)} under '{path}.lr_scales'")
        updates["lr_scales"] = {**base["lr_scales"], **scales}
    merged = {**base, **updates}
    try:
        return StageConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{path}': {exc}") from exc


def from_dict(raw: dict) -> Config:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be an object")
    known = {"dataset", "model", "stages", "training", "eval", "transfer"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level section(s) {sorted(unknown)}")

    dataset = _build(DatasetConfig, dataclasses.asdict(DatasetConfig()),
                     raw.get("dataset", {}), "dataset")
    model = _build(ModelConfig, dataclasses.asdict(ModelConfig()),
                   raw.get("model", {}), "model")

    stage_defaults = default_stage_configs(dataset.resolution)
    stage_updates = raw.get("stages", [])
    if not isinstance(stage_updates, list) or len(stage_updates) > 3:
        raise ConfigError("'stages' must be a list of at most 3 objects")
    stages = [
        _stage_from_dict(stage_defaults[i],
                         stage_updates[i] if i < len(stage_updates) else {},
                         f"stages.{i}")
        for i in range(3)
    ]

    training = _build(TrainingSection,
                      dataclasses.asdict(TrainingSection()),
                      raw.get("training", {}), "training")
    eval_section = _build(EvalSection, dataclasses.asdict(EvalSection()),
                          raw.get("eval", {}), "eval")
    transfer = _build(TransferThresholds,
                      dataclasses.asdict(TransferThresholds()),
                      raw.get("transfer", {}), "transfer")
    return Config(dataset=dataset, model=model, stages=stages,
                  training=training, eval=eval_section, transfer=transfer)


def to_dict(config: Config) -> dict:
    out = {
        "dataset": dataclasses.asdict(config.dataset),
        "model": dataclasses.asdict(config.model),
        "stages": [dataclasses.asdict(s) for s in config.stages],
        "training": dataclasses.asdict(config.training),
        "eval": dataclasses.asdict(config.eval),
        "transfer": dataclasses.asdict(config.transfer),
    }
    out["eval"]["protocols"] = list(config.eval.protocols)
    out["eval"]["k_list"] = list(config.eval.k_list)
    return out


def canonical_json(config: Config) -> str:
    return json.dumps(to_dict(config), sort_keys=True,
                      separators=(",", ":"))


def config_hash(config: Config) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def load_config(path: str | None, overrides=()) -> Config:
    """Config from an optional JSON file plus dotted-path overrides."""
    if path is None:
        raw = {}
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config '{path}': {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config '{path}' is not valid JSON: {exc}") \
                from exc
    for assignment in overrides:
        raw = apply_override(raw, assignment)
    return from_dict(raw)


# ---------------------------------------------------------------------------
# dotted-path overrides
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply one 'a.b.0.c=value' assignment, creating intermediate nodes.

    Numeric path components index lists (extended with empty objects when
    short); values parse as JSON with a plain-string fallback.  Key
    validation happens later in from_dict, so a typo in the path is still
    rejected.
    """
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of form key=value")
    dotted, text = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override '{assignment}' has an empty path part")
    value = _parse_value(text)

    def descend(node, idx):
        key = parts[idx]
        last = idx == len(parts) - 1
        if isinstance(node, list):
            if not key.isdigit():
                raise ConfigError(
                    f"'{'.'.join(parts[:idx + 1])}' indexes a list and must "
                    f"be a number")
            pos = int(key)
            while len(node) <= pos:
                node.append({})
            if last:
                node[pos] = value
            else:
                node[pos] = _ensure_container(node[pos], parts, idx + 1)
                descend(node[pos], idx + 1)
        elif isinstance(node, dict):
            if last:
                node[key] = value
            else:
                node[key] = _ensure_container(node.get(key), parts,
                                              idx + 1)
                descend(node[key], idx + 1)

    root = json.loads(json.dumps(raw))  # deep copy, JSON types only
    descend(root, 0)
    return root


def _ensure_container(existing, parts, next_idx: int):
    if isinstance(existing, (dict, list)):
        return existing
    if existing is not None:
        raise ConfigError(
            f"cannot descend into scalar at '{'.'.join(parts[:next_idx])}'")
    return [] if parts[next_idx].isdigit() else {}
