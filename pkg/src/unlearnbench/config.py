"""Experiment configuration: a YAML file with data / train / unlearn / eval / output sections."""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from . import __version__
from .container import canonical_json
from .encoder import TrainConfig
from .unlearn import DEFAULT_CONFIGS, UnlearnConfig, canonical_method

BENCH_MODES = ("base", "extended")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass
class DataSection:
    K: int = 100
    per_identity: int = 20
    D_in: int = 16
    noise_std: float = 0.3
    seed: int = 0
    prototype_dim: int = 12
    hidden: int = 64
    world_gain: float = 3.0
    n_forget: int = 10
    train_frac: float = 0.5
    distractor_factor: float = 20.0
    extra_distractors: int = 0


@dataclass
class ModelSection:
    d: int = 32
    hidden: list = field(default_factory=lambda: [128, 128])
    s: float = 64.0
    m_cos: float = 0.4


@dataclass
class TrainSection:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "linear"
    flip_augment: bool = False

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass
class UnlearnSection:
    method: str = "Dispersion"
    method_defaults: bool = True
    overrides: dict = field(default_factory=dict)
    grid: list = field(default_factory=list)
    max_runs: int = 64

    def base_config(self, method: str | None = None, seed: int = 0, extra: dict | None = None) -> UnlearnConfig:
        method = canonical_method(method or self.method)
        kw = dict(DEFAULT_CONFIGS[method]) if self.method_defaults else {}
        kw.update(self.overrides)
        kw.update(extra or {})
        kw.pop("method", None)
        kw["seed"] = seed
        return UnlearnConfig(method=method, **kw)

    def expand_grid(self) -> list[dict]:
        """Each grid block maps fields to a value or a list; blocks expand to their Cartesian product."""
        cells = []
        for block in self.grid:
            keys = list(block)
            axes = [v if isinstance(v, list) else [v] for v in block.values()]
            for combo in itertools.product(*axes):
                cells.append(dict(zip(keys, combo)))
        return cells


@dataclass
class EvalSection:
    mode: str = "base"
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class OutputSection:
    dir: str = "runs"


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection, "unlearn": UnlearnSection,
            "eval": EvalSection, "output": OutputSection}

_UNLEARN_FIELDS = {f.name for f in fields(UnlearnConfig)}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def content_dict(self) -> dict:
        # where artifacts are written does not change what they contain
        return {k: v for k, v in self.to_dict().items() if k != "output"}

    def hash(self, sections=None) -> str:
        d = self.content_dict()
        if sections is not None:
            d = {k: d[k] for k in sections}
        return sha256_of(d)

    def stage_hash(self, stage: str, seed: int) -> str:
        """Hash of just the sections a stage's output depends on."""
        sections = {"data": ["data"], "train": ["data", "model", "train"]}[stage]
        return sha256_of({"sections": self.hash(sections), "seed": seed})

    def provenance(self) -> dict:
        return {"tool_version": __version__, "config_hash": self.hash(), "config": self.content_dict()}

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       method: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, eval=replace(cfg.eval, seeds=[int(seed)]))
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, dir=str(out)))
        if method is not None:
            try:
                name = canonical_method(method)
            except ValueError as e:
                raise ConfigError(f"unlearn.method: {e}") from None
            cfg = replace(cfg, unlearn=replace(cfg.unlearn, method=name))
        return cfg


def sha256_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


_TYPES = {int: (int,), float: (int, float), str: (str,), bool: (bool,), list: (list,), dict: (dict,)}


def _build_section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field (valid: {', '.join(known)})")
        default = getattr(cls(), key)
        expected = type(default)
        ok = isinstance(value, _TYPES.get(expected, (expected,)))
        if expected in (int, float) and isinstance(value, bool):
            ok = False
        if not ok:
            raise ConfigError(f"{name}.{key}: expected {expected.__name__}, got {type(value).__name__} {value!r}")
        kwargs[key] = float(value) if expected is float else value
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    checks = [
        ("data.K", d.K >= 2, "must be >= 2"),
        ("data.per_identity", d.per_identity >= 2, "must be >= 2"),
        ("data.D_in", d.D_in >= 1, "must be >= 1"),
        ("data.noise_std", d.noise_std > 0, "must be > 0"),
        ("data.prototype_dim", d.prototype_dim >= 1, "must be >= 1"),
        ("data.n_forget", 0 < d.n_forget < d.K, "must satisfy 0 < n_forget < K"),
        ("data.train_frac", 0 < d.train_frac < 1, "must lie in (0, 1)"),
        ("data.distractor_factor", d.distractor_factor >= 0, "must be >= 0"),
        ("data.extra_distractors", d.extra_distractors >= 0, "must be >= 0"),
        ("model.d", cfg.model.d >= 1, "must be >= 1"),
        ("model.hidden", all(isinstance(h, int) and h >= 1 for h in cfg.model.hidden), "must be positive ints"),
        ("model.s", cfg.model.s > 0, "must be > 0"),
        ("eval.mode", cfg.eval.mode in BENCH_MODES, f"must be one of {BENCH_MODES}"),
        ("eval.seeds", len(cfg.eval.seeds) > 0 and all(isinstance(s, int) for s in cfg.eval.seeds),
         "must be a nonempty list of ints"),
        ("unlearn.max_runs", cfg.unlearn.max_runs >= 1, "must be >= 1"),
        ("eval.mode", cfg.eval.mode != "extended" or d.extra_distractors > 0,
         "extended mode needs data.extra_distractors > 0"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{path}: {msg}")
    try:
        cfg.train.to_train_config(0)
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    u = cfg.unlearn
    for key in u.overrides:
        if key not in _UNLEARN_FIELDS or key == "seed":
            raise ConfigError(f"unlearn.overrides.{key}: unknown unlearning field")
    try:
        u.base_config()
    except (ValueError, TypeError) as e:
        raise ConfigError(f"unlearn: {e}") from None
    if not isinstance(u.grid, list) or not all(isinstance(b, dict) for b in u.grid):
        raise ConfigError("unlearn.grid: must be a list of mappings")
    cells = u.expand_grid()
    if len(cells) > u.max_runs:
        raise ConfigError(f"unlearn.grid: expands to {len(cells)} runs, more than max_runs={u.max_runs}")
    for i, cell in enumerate(cells):
        for key in cell:
            if key not in _UNLEARN_FIELDS or key == "seed":
                raise ConfigError(f"unlearn.grid[{i}].{key}: unknown unlearning field")
        try:
            u.base_config(cell.get("method"), extra=cell)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"unlearn.grid[{i}]: {e}") from None


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section (valid: {', '.join(SECTIONS)})")
    cfg = ExperimentConfig(**{name: _build_section(name, cls, raw.get(name)) for name, cls in SECTIONS.items()})
    try:
        cfg.unlearn.method = canonical_method(cfg.unlearn.method)
    except ValueError as e:
        raise ConfigError(f"unlearn.method: {e}") from None
    _validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config: not valid YAML ({e})") from None
    except OSError as e:
        raise ConfigError(f"config: cannot read {path} ({e.strerror})") from None
    return from_dict(raw)
