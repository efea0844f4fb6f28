"""Run configuration: dataclass tree, generated JSON schema, strict loading.

Config files are JSON. Every key is schema-checked (unknown keys are errors,
never silently ignored) and defaults come from the dataclasses, so dumping the
effective config and reloading it round-trips exactly. Environment variables
override paths only: GROUNDGEN_OUT_DIR replaces out_dir, GROUNDGEN_DATA_DIR
replaces data.root.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .backbone import BackboneConfig
from .codec import CodecConfig
from .scorer import ScorerConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""  # default: <out_dir>/dataset
    scenes: int = 5000
    seed_start: int = 0
    max_objects: int = 4
    aux_scenes: int = 0  # extra slice for scorer/codec pretraining when > 0
    aux_seed_start: int = 10_000_000


@dataclass
class EvalConfig:
    prompts: int = 200
    min_objects: int = 2
    heldout_seed_start: int = 5_000_000
    k: int = 4
    sampler_steps: int = 0  # 0: use stage2.sampler_steps
    base_seed: int = 0
    use_train_subset: int = 0  # evaluate on the first N training scenes instead
    guidance: float = 1.0


@dataclass
class AblationConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    variants: list[str] = field(
        default_factory=lambda: ["full", "no_grounding", "no_consistency", "no_icp"]
    )
    jobs: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    device: str = "cpu"
    torch_threads: int = 2
    overfit_scenes: int = 0  # restrict stage-2 training to N distinct-caption scenes
    data: DataConfig = field(default_factory=DataConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def dataset_dir(self) -> Path:
        if self.data.root:
            return Path(self.data.root)
        return Path(self.out_dir) / "dataset"

    def aux_dataset_dir(self) -> Path:
        return self.dataset_dir().parent / "aux_dataset"


_SECTION_TYPES = {
    "data": DataConfig,
    "scorer": ScorerConfig,
    "codec": CodecConfig,
    "backbone": BackboneConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}

_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _field_schema(f: dataclasses.Field) -> dict:
    if f.type in ("int", int):
        return {"type": "integer"}
    if f.type in ("float", float):
        return {"type": "number"}
    if f.type in ("str", str):
        return {"type": "string"}
    if f.type in ("bool", bool):
        return {"type": "boolean"}
    if "list[int]" in str(f.type):
        return {"type": "array", "items": {"type": "integer"}}
    if "list[str]" in str(f.type):
        return {"type": "array", "items": {"type": "string"}}
    raise TypeError(f"unsupported config field type {f.type!r} for {f.name}")


def _dataclass_schema(cls) -> dict:
    props = {f.name: _field_schema(f) for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def config_schema() -> dict:
    props: dict = {}
    for f in dataclasses.fields(RunConfig):
        if f.name in _SECTION_TYPES:
            props[f.name] = _dataclass_schema(_SECTION_TYPES[f.name])
        else:
            props[f.name] = _field_schema(f)
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "properties": props,
        "additionalProperties": False,
    }


def validate_config_dict(data: dict) -> None:
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(msgs))


def config_from_dict(data: dict) -> RunConfig:
    validate_config_dict(data)
    kwargs: dict = {}
    for f in dataclasses.fields(RunConfig):
        if f.name not in data:
            continue
        if f.name in _SECTION_TYPES:
            kwargs[f.name] = _SECTION_TYPES[f.name](**data[f.name])
        else:
            kwargs[f.name] = data[f.name]
    cfg = RunConfig(**kwargs)
    if os.environ.get("GROUNDGEN_OUT_DIR"):
        cfg.out_dir = os.environ["GROUNDGEN_OUT_DIR"]
    if os.environ.get("GROUNDGEN_DATA_DIR"):
        cfg.data.root = os.environ["GROUNDGEN_DATA_DIR"]
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name in _SECTION_TYPES:
            out[f.name] = dataclasses.asdict(value)
        else:
            out[f.name] = value
    return out


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path: Path | str) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), sort_keys=True, indent=2))
