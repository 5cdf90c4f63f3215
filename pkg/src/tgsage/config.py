"""Search configuration: a TOML file with nested sections.

See the README for the full grammar.  Unknown keys are rejected so typos do
not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .space import CELL_OPS, CellSpace, LayeredSpace, MicroSpace, Space
from .evaluator.network import CellLayout
from .evaluator.trainer import TrainBudget


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceSection:
    kind: str = "micro"  # micro | layered | cell
    max_layers: int = 10
    min_layers: int = 1
    connectivity: str = "free"
    filters: tuple = (32, 64, 128)
    kernel_h: tuple = (1, 3, 5, 7)
    kernel_w: tuple = (1, 3, 5, 7)
    stride: tuple = (1, 2)
    activation: tuple = ("identity", "relu")
    normalization: tuple = ("none", "batchnorm")
    num_blocks: int = 5
    ops: tuple = CELL_OPS

    def build(self) -> Space:
        if self.kind == "micro":
            return MicroSpace()
        if self.kind == "layered":
            return LayeredSpace(
                max_layers=self.max_layers,
                filters=tuple(self.filters),
                kernel_h=tuple(self.kernel_h),
                kernel_w=tuple(self.kernel_w),
                stride=tuple(self.stride),
                activation=tuple(self.activation),
                normalization=tuple(self.normalization),
                connectivity=self.connectivity,
                min_layers=self.min_layers,
            )
        if self.kind == "cell":
            return CellSpace(num_blocks=self.num_blocks, ops=tuple(self.ops))
        raise ConfigError(f"space.kind must be micro, layered or cell, got {self.kind!r}")


@dataclass(frozen=True)
class DriverSection:
    name: str = "tpe"  # tpe | rl | random
    n_startup: int = 20
    n_draws: int = 24
    prior_weight: float = 1.0
    batch_size: int = 1  # proposals per synchronous round; rl uses it as the REINFORCE batch
    hidden: int = 32


@dataclass(frozen=True)
class ScoringSection:
    alpha: float = 1.0
    mode: str = "per-input"
    feature_subsample: int = 512  # 0 keeps every feature


@dataclass(frozen=True)
class TeacherSection:
    source: str = "auto"  # auto | desk | surrogate | manifest | none
    manifest: str = ""
    mature_steps: int = 320


@dataclass(frozen=True)
class EvaluatorSection:
    kind: str = "desk"  # desk | surrogate
    num_classes: int = 10
    image_size: int = 16
    n_train: int = 4096
    n_val: int = 1024
    n_probe: int = 256
    mature_steps: int = 160
    premature_steps: int = 0  # 0: mature_steps // 8
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    cell_stacks: int = 3
    cell_repeats: int = 1
    cell_filters: int = 16
    surrogate_noise: float = 0.0
    surrogate_pairwise: float = 0.3
    store_activations: bool = False

    def budget(self) -> TrainBudget:
        return TrainBudget(
            mature_steps=self.mature_steps,
            premature_steps=self.premature_steps or None,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
        )

    def layout(self) -> CellLayout:
        return CellLayout(self.cell_stacks, self.cell_repeats, self.cell_filters)


@dataclass(frozen=True)
class BudgetSection:
    m1: int = 50
    rerank_k: int = 3


@dataclass(frozen=True)
class SeedSection:
    search: int = 0
    data: int = 0
    train: int = 0


@dataclass(frozen=True)
class RunSection:
    workers: int = 0  # 0: the explorer evaluates samples itself
    stale_timeout: float = 3600.0
    poll_interval: float = 0.05
    fsync: bool = True


@dataclass(frozen=True)
class SearchConfig:
    space: SpaceSection = SpaceSection()
    driver: DriverSection = DriverSection()
    scoring: ScoringSection = ScoringSection()
    teacher: TeacherSection = TeacherSection()
    evaluator: EvaluatorSection = EvaluatorSection()
    budget: BudgetSection = BudgetSection()
    seeds: SeedSection = SeedSection()
    run: RunSection = RunSection()
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.driver.name not in ("tpe", "rl", "random"):
            raise ConfigError(f"driver.name must be tpe, rl or random, got {self.driver.name!r}")
        if self.scoring.alpha < 0:
            raise ConfigError("scoring.alpha must be >= 0")
        if self.scoring.mode not in ("per-input", "per-category"):
            raise ConfigError(f"scoring.mode must be per-input or per-category, got {self.scoring.mode!r}")
        if self.budget.m1 < 1 or self.budget.rerank_k < 0:
            raise ConfigError("budget.m1 must be >= 1 and budget.rerank_k >= 0")
        if self.driver.batch_size < 1:
            raise ConfigError("driver.batch_size must be >= 1")
        if self.driver.name == "rl" and self.budget.m1 < self.driver.batch_size:
            raise ConfigError("budget.m1 must be at least driver.batch_size for the rl driver")
        if self.evaluator.kind not in ("desk", "surrogate"):
            raise ConfigError(f"evaluator.kind must be desk or surrogate, got {self.evaluator.kind!r}")
        source = self.teacher_source
        if source not in ("desk", "surrogate", "manifest", "none"):
            raise ConfigError(f"unknown teacher.source {self.teacher.source!r}")
        if source == "none" and self.scoring.alpha != 0:
            raise ConfigError("teacher.source = 'none' requires scoring.alpha = 0")
        if source == "manifest" and not self.manifest_path.exists():
            raise ConfigError(f"teacher manifest {self.manifest_path} does not exist")
        if source == "desk" and self.evaluator.kind != "desk":
            raise ConfigError("the desk teacher needs the desk evaluator")
        if source == "surrogate" and self.evaluator.kind != "surrogate":
            raise ConfigError("the surrogate teacher needs the surrogate evaluator")
        try:
            self.evaluator.budget()
        except ValueError as exc:
            raise ConfigError(f"evaluator budget: {exc}") from exc
        try:
            self.space.build()
        except ValueError as exc:
            raise ConfigError(f"[space]: {exc}") from exc

    @property
    def teacher_source(self) -> str:
        if self.teacher.source == "auto":
            return "desk" if self.evaluator.kind == "desk" else "surrogate"
        return self.teacher.source

    @property
    def manifest_path(self) -> Path:
        p = Path(self.teacher.manifest)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def replace(self, section: str, **changes) -> "SearchConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


_SECTION_TYPES = {
    "space": SpaceSection,
    "driver": DriverSection,
    "scoring": ScoringSection,
    "teacher": TeacherSection,
    "evaluator": EvaluatorSection,
    "budget": BudgetSection,
    "seeds": SeedSection,
    "run": RunSection,
}


def config_from_dict(data: Mapping[str, Any], base_dir=".") -> SearchConfig:
    sections = {}
    for name, value in data.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(value, Mapping):
            raise ConfigError(f"[{name}] must be a table")
        cls = _SECTION_TYPES[name]
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, v in value.items():
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            kwargs[key] = tuple(v) if isinstance(v, list) else v
        try:
            sections[name] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return SearchConfig(**sections, base_dir=str(base_dir))


def parse_config(text: str, base_dir=".") -> SearchConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return config_from_dict(data, base_dir)


def load_config(path) -> SearchConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def dump_config(config: SearchConfig) -> str:
    """Canonical TOML text for ``config`` (round-trips through :func:`parse_config`)."""
    lines = []
    for name in _SECTION_TYPES:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if name == "teacher" and f.name == "manifest" and value:
                value = str(config.manifest_path.resolve())  # the snapshot must not depend on the cwd
            lines.append(f"{f.name} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialise {v!r}")
