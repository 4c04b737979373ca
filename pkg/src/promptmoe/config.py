"""Run configuration: one JSON file drives pretraining, training, and eval.

Keys inside each section are exactly the dataclass field names; unknown
keys are rejected loudly rather than ignored, since a typo like
"warmup_step" silently falling back to a default is the worst failure
mode a config system can have.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .data import TASKS
from .errors import ConfigError
from .methods import MethodConfig
from .pretrain import PretrainConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    id_tasks: list = field(default_factory=lambda: ["copy_span", "mod_add"])
    ood_tasks: list = field(default_factory=lambda: ["reverse", "mod_mul"])
    train_count: int = 2000
    test_count: int = 500
    ood_count: int = 150
    train_seed: int = 101
    test_seed: int = 202
    ood_seed: int = 303

    def __post_init__(self):
        for name in ("train_count", "test_count", "ood_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for label, tasks in (("id_tasks", self.id_tasks), ("ood_tasks", self.ood_tasks)):
            if not tasks:
                raise ConfigError(f"{label} must not be empty")
            for t in tasks:
                if t not in TASKS:
                    raise ConfigError(f"{label}: unknown task {t!r}, expected one of {TASKS}")
        if self.train_seed == self.test_seed:
            raise ConfigError("train_seed and test_seed must differ (split hygiene)")


@dataclass
class EvalConfig:
    batch_size: int = 64
    max_new: int = 0  # 0 = per-example budget from the target length
    raw_match: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class RunConfig:
    method: MethodConfig
    train: TrainConfig
    base: PretrainConfig
    data: DataConfig
    eval: EvalConfig


_SECTIONS = {
    "method": MethodConfig,
    "train": TrainConfig,
    "base": PretrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _build_section(cls, raw, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; valid: {sorted(names)}")
    required = {
        f.name
        for f in dataclasses.fields(cls)
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    }
    missing = required - set(raw)
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {sorted(missing)}")
    return cls(**raw)


def from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown section(s) {sorted(unknown)}; valid: {sorted(_SECTIONS)}"
        )
    parts = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        parts[name] = _build_section(cls, section, name)
    return RunConfig(**parts)


def load(path):
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON: {e}") from None
    return from_dict(raw)


def to_dict(rc):
    return {name: dataclasses.asdict(getattr(rc, name)) for name in _SECTIONS}


def default_run_config():
    """The shipped desk-scale setup: PT-MoE at the scaled reference budget."""
    return from_dict(
        {
            "method": {
                "kind": "PT_MOE",
                "prompt_length": 40,
                "num_experts": 2,
                "rank": "auto",
                "budget": 2522,  # 80,706 scaled by 64/2048
                "init_text": "copy: a b c\na b c\n3+4 (mod 10)\n7\n",
                "router_w_std": 6.0,
            },
            "train": {
                "steps": 500,
                "batch_size": 8,
                "warmup_steps": 50,
                "lr": 0.05,
                "grad_accum": 2,
                "seed": 7,
            },
            "base": {},
            "data": {},
            "eval": {},
        }
    )
