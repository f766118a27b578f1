"""Run configuration: YAML file, strict schema, canonical content hash.

Every key must appear in ``DEFAULTS``; unknown keys are errors. Omitted keys
take their default. The hash is the first 16 hex digits of the SHA-256 of the
fully-resolved configuration (minus ``output_dir``) serialised as sorted,
compact JSON.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigurationError, GrowTASError
from .evo import EvoConfig
from .experiments import TaskParams
from .scheduler import FinetuneConfig, Schedule
from .space import SearchSpace, SubspacePartition
from .supernet import OptimConfig

DEFAULTS = {
    "seed": 0,
    "init_scale": 0.02,
    "output_dir": "runs",
    "space": {
        "embed_dim": [8, 16, 8],
        "mlp_ratio": [1, 2, 1],
        "head_num": [1, 2, 1],
        "depth": [2, 2, 1],
        "head_dim": 4,
    },
    "partition": {"embed_caps": [8, 16], "ratio_caps": [1, 2]},
    "schedule": {"epochs": 20, "transitions": [10]},
    "optimizer": {
        "lr": 3e-3, "min_lr": 1e-4, "betas": [0.9, 0.999], "eps": 1e-8,
        "weight_decay": 0.01, "batch_size": 32,
    },
    "finetune": {"epochs": 2, "lr": None, "min_lr": None},
    "evo": {
        "population_size": 50, "generations": 20, "parent_count": 10,
        "mutation_prob": 0.2, "constraint": None, "retries": 100,
    },
    "task": {
        "seq_len": 8, "input_dim": 8, "num_classes": 4, "separation": 1.7, "noise": 1.0,
        "n_train": 2048, "n_val": 512, "n_test": 512, "seed": 0, "dataset": None,
    },
    "studies": {
        "n_variants": 100, "n_samples": 200, "dist_constraint": None,
        "t1_values": [5, 10, 15], "param_limits": [], "finetune": True,
    },
}

# keys whose value is a free-form scalar-or-null rather than a nested section
_NULLABLE = {"finetune.lr", "finetune.min_lr", "evo.constraint", "task.dataset", "studies.dist_constraint"}


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        full = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigurationError(f"unknown config key '{full}'")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, full)
        elif value is None and full not in _NULLABLE:
            raise ConfigurationError(f"config key '{full}' may not be null")
        else:
            d = defaults[key]
            if isinstance(d, list) and not isinstance(value, list):
                raise ConfigurationError(f"config key '{full}' must be a list")
            if isinstance(d, (int, float)) and not isinstance(d, bool) and not isinstance(value, (int, float)):
                raise ConfigurationError(f"config key '{full}' must be numeric")
            out[key] = value
    return out


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunConfig:
    raw: dict
    space: SearchSpace
    partition: SubspacePartition
    schedule: Schedule
    optimizer: OptimConfig
    finetune: FinetuneConfig
    evo: EvoConfig
    task: TaskParams

    @property
    def hash(self) -> str:
        """Content hash; where the artefacts go does not change what they contain."""
        return canonical_hash({k: v for k, v in self.raw.items() if k != "output_dir"})

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])


def build(raw: dict) -> RunConfig:
    """Validate a resolved configuration and construct the typed objects."""
    def section(name, fn):
        try:
            return fn(raw[name])
        except GrowTASError as exc:
            raise ConfigurationError(f"{name}: {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{name}: {exc}") from exc

    t = raw["task"]
    space = section("space", lambda s: SearchSpace(
        tuple(s["embed_dim"]), tuple(s["mlp_ratio"]), tuple(s["head_num"]), tuple(s["depth"]),
        head_dim=s["head_dim"], input_dim=t["input_dim"], num_classes=t["num_classes"], seq_len=t["seq_len"]))
    partition = section("partition", lambda p: SubspacePartition(p["embed_caps"], p["ratio_caps"]))
    section("partition", lambda p: partition.check(space))
    schedule = section("schedule", lambda s: Schedule((0, *s["transitions"], s["epochs"])))
    if schedule.K != partition.K:
        raise ConfigurationError(f"schedule.transitions: {schedule.K} stages but partition has {partition.K}")
    opt = section("optimizer", lambda o: OptimConfig(o["lr"], o["min_lr"], tuple(o["betas"]), o["eps"],
                                                     o["weight_decay"], int(o["batch_size"])))
    if opt.batch_size < 1 or opt.lr < 0 or opt.min_lr < 0:
        raise ConfigurationError("optimizer: batch_size must be >= 1 and learning rates non-negative")
    ft = section("finetune", lambda f: FinetuneConfig(int(f["epochs"]), f["lr"], f["min_lr"]))
    if ft.epochs < 0:
        raise ConfigurationError("finetune.epochs must be >= 0")
    evo = section("evo", lambda e: EvoConfig(int(e["population_size"]), int(e["generations"]), int(e["parent_count"]),
                                             float(e["mutation_prob"]), e["constraint"], int(raw["seed"]),
                                             int(e["retries"])))
    task = section("task", lambda k: TaskParams(int(k["seq_len"]), int(k["input_dim"]), int(k["num_classes"]),
                                                float(k["separation"]), float(k["noise"]), int(k["n_train"]),
                                                int(k["n_val"]), int(k["n_test"]), int(k["seed"])))
    if not 0 <= int(raw["seed"]) < 2**63:
        raise ConfigurationError("seed must lie in [0, 2**63)")
    if not raw["init_scale"] >= 0:
        raise ConfigurationError("init_scale must be non-negative")
    return RunConfig(raw, space, partition, schedule, opt, ft, evo, task)


def from_dict(given: dict | None = None, **overrides) -> RunConfig:
    raw = _merge(DEFAULTS, given or {})
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    return build(raw)


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    try:
        given = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from exc
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return from_dict(given, seed=seed, output_dir=output_dir)
