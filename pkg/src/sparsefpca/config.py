"""Run configuration: nested dataclasses loaded from and printed as TOML."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import tomli
import tomli_w

from sparsefpca.data import BIOMARKERS, DEFAULT_HORIZON, DEFAULT_SCHEMA, OUTCOMES, figure1_rules, rule_from_dict, rule_to_dict
from sparsefpca.errors import ConfigError
from sparsefpca.fpca import DEFAULT_L_GRID, DEFAULT_M_GRID


@dataclass(frozen=True)
class PathsConfig:
    # empty input means "use the simulated file in the run directory"
    input: str = ""
    output_root: str = "runs"


@dataclass(frozen=True)
class CleaningConfig:
    horizon: float = DEFAULT_HORIZON
    min_observations: int = 2
    until_stable: bool = True
    rules: tuple = tuple(rule_to_dict(r) for r in figure1_rules())


@dataclass(frozen=True)
class FpcaConfig:
    L_grid: tuple = DEFAULT_L_GRID
    M_grid: tuple = DEFAULT_M_GRID
    # empty means the default log-spaced candidates
    bandwidths: tuple = ()
    # 0 means exact leave-one-curve-out
    cv_folds: int = 0
    reselect: bool = False
    # 0 means "select"; both must be set to skip selection
    rank: int = 0
    n_basis: int = 0
    min_observations: int = 3
    null_leave_one_out: bool = False
    trajectory_points: int = 61


@dataclass(frozen=True)
class LmmConfig:
    grid_months: tuple = (0.0, 6.0, 12.0)
    snap_tol: float = 1.0
    transform: str = "log"


@dataclass(frozen=True)
class ResidualConfig:
    log_biomarkers: tuple = ("NT",)


@dataclass(frozen=True)
class SimulateConfig:
    n_subjects: int = 200
    attendance: float = 0.35
    eigen_kind: str = "fourier"


@dataclass(frozen=True)
class RunConfig:
    seed: Optional[int] = None
    threads: int = 1
    outcomes: tuple = OUTCOMES
    biomarkers: tuple = BIOMARKERS
    paths: PathsConfig = field(default_factory=PathsConfig)
    columns: dict = field(default_factory=lambda: dict(DEFAULT_SCHEMA))
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)
    fpca: FpcaConfig = field(default_factory=FpcaConfig)
    lmm: LmmConfig = field(default_factory=LmmConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def __post_init__(self):
        validate(self)

    @property
    def rules(self) -> list:
        return [rule_from_dict(d) for d in self.cleaning.rules]

    def to_dict(self) -> dict:
        d = _plain(asdict(self))
        if self.seed is None:
            d.pop("seed")
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        """Digest of everything that can change results; thread count and output location are excluded."""
        d = self.to_dict()
        d.pop("threads")
        d["paths"].pop("output_root")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.paths.output_root) / self.hash()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            value = _coerce(type(current), value, name)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name} must be a list")
            value = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name} must be true or false")
        elif isinstance(current, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name} must be an integer")
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name} must be a number")
            value = float(value)
        elif isinstance(current, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{name} must be a string")
        kwargs[name] = value
    return kwargs if cls is RunConfig else cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    seed = data.pop("seed", None)
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ConfigError("seed must be an integer")
    columns = data.pop("columns", None)
    kwargs = _coerce(RunConfig, data, "root")
    if columns is not None:
        if not isinstance(columns, dict):
            raise ConfigError("[columns] must be a table")
        merged = dict(DEFAULT_SCHEMA)
        for key, col in columns.items():
            if key not in DEFAULT_SCHEMA:
                raise ConfigError(f"unknown column key {key!r}")
            if not isinstance(col, str):
                raise ConfigError(f"columns.{key} must be a string")
            merged[key] = col
        kwargs["columns"] = merged
    return RunConfig(seed=seed, **kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(data)


def with_overrides(cfg: RunConfig, seed: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if threads is not None:
        changes["threads"] = threads
    return replace(cfg, **changes) if changes else cfg


def _positive_ints(values, name):
    if not values:
        raise ConfigError(f"{name} must be nonempty")
    if any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in values):
        raise ConfigError(f"{name} must hold positive integers")


def validate(cfg: RunConfig) -> None:
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    for name in cfg.outcomes:
        if name not in OUTCOMES:
            raise ConfigError(f"unknown outcome {name!r}")
    for name in cfg.biomarkers:
        if name not in BIOMARKERS:
            raise ConfigError(f"unknown biomarker {name!r}")
    if not cfg.outcomes:
        raise ConfigError("at least one outcome is required")
    if cfg.paths.input and Path(cfg.paths.input).resolve() == Path(cfg.paths.output_root).resolve():
        raise ConfigError("input and output_root must differ")
    if not cfg.cleaning.horizon > 0:
        raise ConfigError("cleaning.horizon must be positive")
    if cfg.cleaning.min_observations < 1:
        raise ConfigError("cleaning.min_observations must be at least 1")
    for i, rule in enumerate(cfg.cleaning.rules):
        if not isinstance(rule, dict):
            raise ConfigError(f"cleaning.rules[{i}] must be a table")
        step = rule_from_dict(rule)
        if not isinstance(step, str) and step.variable not in OUTCOMES + BIOMARKERS:
            raise ConfigError(f"cleaning.rules[{i}] references unknown variable {step.variable!r}")
    f = cfg.fpca
    _positive_ints(f.L_grid, "fpca.L_grid")
    _positive_ints(f.M_grid, "fpca.M_grid")
    if any(m < 4 for m in f.M_grid):
        raise ConfigError("fpca.M_grid entries must be at least 4 (cubic splines)")
    if min(f.L_grid) > max(f.M_grid):
        raise ConfigError("no (L, M) pair in the grids has L <= M")
    if any(not b > 0 for b in f.bandwidths):
        raise ConfigError("fpca.bandwidths must be positive")
    if f.cv_folds < 0 or f.cv_folds == 1:
        raise ConfigError("fpca.cv_folds must be 0 (leave-one-curve-out) or at least 2")
    if (f.rank > 0) != (f.n_basis > 0):
        raise ConfigError("fpca.rank and fpca.n_basis must be set together")
    if f.rank > 0 and f.rank > f.n_basis:
        raise ConfigError("fpca.rank cannot exceed fpca.n_basis")
    if f.min_observations < 2:
        raise ConfigError("fpca.min_observations must be at least 2")
    if f.trajectory_points < 2:
        raise ConfigError("fpca.trajectory_points must be at least 2")
    if not cfg.lmm.grid_months:
        raise ConfigError("lmm.grid_months must be nonempty")
    if cfg.lmm.transform not in ("log", "identity"):
        raise ConfigError("lmm.transform must be 'log' or 'identity'")
    if cfg.lmm.snap_tol < 0:
        raise ConfigError("lmm.snap_tol must be non-negative")
    for name in cfg.residual.log_biomarkers:
        if name not in BIOMARKERS:
            raise ConfigError(f"residual.log_biomarkers: unknown biomarker {name!r}")
    s = cfg.simulate
    if s.n_subjects < 2:
        raise ConfigError("simulate.n_subjects must be at least 2")
    if not 0 < s.attendance <= 1:
        raise ConfigError("simulate.attendance must lie in (0, 1]")
    if s.eigen_kind not in ("fourier", "legendre"):
        raise ConfigError("simulate.eigen_kind must be 'fourier' or 'legendre'")


def default_toml() -> str:
    header = "# seed = 0  # required by the simulate command\n"
    return header + RunConfig().to_toml()
