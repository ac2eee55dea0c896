"""Run configuration read from TOML, with every default spelled out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from .rules import PRESETS, RuleConfig

SCHEMA_VERSION = 1
TASKS = ("ioi", "within_RC", "across_RC", "across_PP")


class RunConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    checkpoint: str = "builtin"


@dataclass
class TaskSection:
    name: str = "ioi"
    n_pairs: int = 100
    data: str = ""
    metric: str = ""


@dataclass
class PatchingSection:
    methods: list[str] = field(default_factory=lambda: ["ap", "atp", "relp", "ig"])
    preset: str = "gpt2"
    rules: dict[str, Any] = field(default_factory=dict)
    ig_steps: int = 10
    kinds: list[str] = field(default_factory=lambda: ["resid_pre", "attn_out", "mlp_out", "resid_post"])


@dataclass
class TrainSection:
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 64
    n_ioi: int = 3000
    n_agreement: int = 600
    model_seed: int = 0


@dataclass
class CircuitSection:
    structures: list[str] = field(default_factory=lambda: ["within_RC", "across_RC", "across_PP"])
    methods: list[str] = field(default_factory=lambda: ["relp", "ig", "atp"])
    n_discovery: int = 300
    n_heldout: int = 100
    sites: list[str] = field(default_factory=lambda: ["attn_out", "mlp_out", "resid_post"])
    d_feat: int = 64
    l1_coeff: float = 1e-3
    sae_steps: int = 2000
    sae_lr: float = 1e-3
    thresholds: list[float] = field(
        default_factory=lambda: [0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0]
    )
    exclude_first_third: bool = True
    neurons: bool = True


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "relp_out"
    threads: int = 1
    model: ModelSection = field(default_factory=ModelSection)
    task: TaskSection = field(default_factory=TaskSection)
    patching: PatchingSection = field(default_factory=PatchingSection)
    train: TrainSection = field(default_factory=TrainSection)
    circuit: CircuitSection = field(default_factory=CircuitSection)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def rule_config(self) -> RuleConfig:
        if self.patching.rules:
            return RuleConfig.from_dict(self.patching.rules)
        return RuleConfig.from_preset(self.patching.preset)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise RunConfigError(f"unsupported schema_version {self.schema_version}")
        p = self.patching
        if not p.methods:
            raise RunConfigError("method list is empty")
        bad = [m for m in p.methods if m not in ("ap", "atp", "relp", "ig")]
        if bad:
            raise RunConfigError(f"unknown methods {bad}")
        if p.preset not in PRESETS:
            raise RunConfigError(f"unknown preset {p.preset!r}; choose from {sorted(PRESETS)}")
        if p.ig_steps < 1:
            raise RunConfigError("ig_steps must be >= 1")
        if self.task.name not in TASKS:
            raise RunConfigError(f"unknown task {self.task.name!r}")
        if self.task.n_pairs < 1:
            raise RunConfigError("n_pairs must be >= 1")
        if self.threads < 1:
            raise RunConfigError("threads must be >= 1")
        for path in (self.task.data, "" if self.model.checkpoint == "builtin" else self.model.checkpoint):
            if path and not Path(path).exists():
                raise RunConfigError(f"referenced file {path!r} does not exist")
        c = self.circuit
        bad = [m for m in c.methods if m not in ("atp", "relp", "ig")]
        if not c.methods or bad:
            raise RunConfigError(f"circuit methods must be a nonempty subset of atp, relp, ig; got {c.methods}")
        if any(s not in TASKS[1:] for s in c.structures):
            raise RunConfigError(f"unknown agreement structures {c.structures}")
        try:
            self.rule_config()
        except (ValueError, KeyError, TypeError) as exc:
            raise RunConfigError(f"bad rules table: {exc}") from exc
        return self


def _build(cls, data: Mapping[str, Any], where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise RunConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        if sub is not None:
            if not isinstance(value, dict):
                raise RunConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(sub, value, f"[{name}]")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "model": ModelSection,
    "task": TaskSection,
    "patching": PatchingSection,
    "train": TrainSection,
    "circuit": CircuitSection,
}


def from_mapping(data: Mapping[str, Any]) -> RunConfig:
    data = dict(data)
    if "schema_version" not in data:
        raise RunConfigError("config must declare schema_version")
    try:
        return _build(RunConfig, data, "top level")
    except TypeError as exc:
        raise RunConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise RunConfigError(f"{path}: {exc}") from exc
    return from_mapping(data)
