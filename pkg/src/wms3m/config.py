"""Run configuration: TOML/JSON loading, dotted overrides and default resolution."""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping, Sequence

from .data import SyntheticConfig
from .errors import ConfigError, MissingArtifactError
from .model import ModelConfig
from .planner import SCENARIOS, PlanConfig
from .runtime import DEFAULT_THREADS
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# ModelConfig fields filled from the trace rather than the config file
DATA_DERIVED = ("n_features", "window", "out_dim", "target_index", "action_index")

DATA_DEFAULTS = {
    "source": "synthetic",  # synthetic | csv
    "path": None,
    "schema": {"timestamp": "ts", "target": "rsrp", "action": "prb"},
    "fractions": [0.7, 0.1, 0.2],
    "window": 16,
    "target_mode": 1,  # 1 (univariate) or "full"
    "synthetic": {"T": 5000, "seed": None},
}
PREDICT_DEFAULTS = {"samples": 8, "z": 1.96, "seed": None}
BENCH_DEFAULTS = {"lengths": [16, 32, 64, 128], "repeats": 20, "warmup": 3, "batch": 64}
SECTIONS = ("data", "model", "train", "plan", "predict", "bench", "scenarios", "output_dir", "seed", "threads")


def load_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def parse_value(text: str) -> Any:
    """Override values are JSON when they parse as JSON, else plain strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` assignments (flags win over the file)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
            node = nxt
        node[parts[-1]] = parse_value(value)
    return cfg


def _merge(defaults: Mapping, given: Mapping | None, section: str) -> dict:
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    out = copy.deepcopy(dict(defaults))
    out.update(given)
    return out


def _dataclass_section(cls, given: Mapping | None, section: str, skip: Sequence[str] = ()) -> dict:
    names = [f.name for f in fields(cls) if f.name not in skip]
    given = dict(given or {})
    unknown = set(given) - set(names)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return given


def resolve(raw: Mapping | None = None) -> dict:
    """Fill every default so the result fully determines a run.

    A top-level ``seed`` seeds every section that does not set its own.
    """
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    threads = int(raw.get("threads", DEFAULT_THREADS))
    if threads < 1:
        raise ConfigError("threads must be >= 1")

    data = _merge(DATA_DEFAULTS, raw.get("data"), "data")
    data["synthetic"] = dict(DATA_DEFAULTS["synthetic"], **dict(data.get("synthetic") or {}))
    if data["synthetic"]["seed"] is None:
        data["synthetic"]["seed"] = seed
    if data["source"] not in ("synthetic", "csv"):
        raise ConfigError("data.source must be 'synthetic' or 'csv'")
    if data["source"] == "csv" and not data["path"]:
        raise ConfigError("data.path is required when data.source = 'csv'")
    fr = data["fractions"]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("data.fractions must be three positive numbers summing to 1")
    plant = {k: v for k, v in data["synthetic"].items() if k not in ("T", "seed")}
    SyntheticConfig.from_dict(plant)  # validate keys early

    model_given = _dataclass_section(ModelConfig, raw.get("model"), "model", DATA_DERIVED)
    model = {f.name: f.default for f in fields(ModelConfig) if f.name not in DATA_DERIVED}
    model["init_seed"] = seed
    model.update(model_given)

    train = TrainConfig.from_dict({"seed": seed, **dict(raw.get("train") or {})}).to_dict()
    plan = PlanConfig.from_dict({"seed": seed, **dict(raw.get("plan") or {})}).to_dict()

    predict = _merge(PREDICT_DEFAULTS, raw.get("predict"), "predict")
    if predict["seed"] is None:
        predict["seed"] = seed
    if int(predict["samples"]) < 1:
        raise ConfigError("predict.samples must be >= 1")
    bench = _merge(BENCH_DEFAULTS, raw.get("bench"), "bench")

    scenarios = list(raw.get("scenarios", SCENARIOS))
    return {
        "seed": seed,
        "threads": threads,
        "output_dir": raw.get("output_dir"),
        "data": data,
        "model": model,
        "train": train,
        "plan": plan,
        "predict": predict,
        "bench": bench,
        "scenarios": scenarios,
    }


def load(path: str | Path | None, overrides: Sequence[str] = ()) -> dict:
    raw = load_file(path) if path else {}
    return resolve(apply_overrides(raw, overrides))


def dumps(cfg: Mapping) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
