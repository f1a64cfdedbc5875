"""Run configuration.

A YAML or JSON document with the sections below; every key is optional and
defaults to the value listed by ``describe_keys``::

    seed: 0
    threads: 4
    grid: {height: 64, width: 128}
    hyperparams: {lambda_j: 0.1, ...}
    fit: {batch_size: 8, epochs: 300, ...}
    register: {iterations: 200, ...}
    synth: {n_subjects: 16, ...}
    eval: {weighted: true, ...}
"""

import os
from dataclasses import MISSING, dataclass, field, fields, replace
from typing import Any, Dict, Optional

from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from .evaluation import EvalConfig
from .model import Hyperparams
from .optim import FitConfig, RegisterConfig
from .sphere_grid import GridDimensionError, GridSpec, make_grid
from .storage import PathMissingError
from .synth import SynthConfig

THREADS_ENV = "JOSA_THREADS"


class ConfigError(Exception):
    pass


# Keys filled from other sections or the top level, never set directly.
_DERIVED = {"hp", "grid", "seed", "threads"}

SECTIONS = {
    "hyperparams": Hyperparams,
    "fit": FitConfig,
    "register": RegisterConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    threads: Optional[int] = None
    grid: GridSpec = field(default_factory=lambda: make_grid(64, 128))
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    fit: FitConfig = field(default_factory=FitConfig)
    register: RegisterConfig = field(default_factory=RegisterConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Any]:
        out = {"seed": self.seed, "threads": self.threads, "grid": self.grid.to_dict()}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {
                f.name: getattr(section, f.name)
                for f in fields(section)
                if f.name not in _DERIVED
            }
        return out


def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _config_keys(cls):
    return [f for f in fields(cls) if f.name not in _DERIVED]


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return list(value)
    return value


def _section_kwargs(name: str, cls, data) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Section {name} must be a mapping")
    known = {f.name: f for f in _config_keys(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in {name}: {', '.join(unknown)}")
    return {
        key: _coerce(name, key, value, _default(known[key])) for key, value in data.items()
    }


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}")
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    return threads


def build_config(data: Optional[Dict[str, Any]] = None, threads: Optional[int] = None) -> RunConfig:
    """Validate a parsed document and assemble the section dataclasses.

    ``threads`` overrides the document; both fall back to JOSA_THREADS and then
    the number of cores.
    """
    data = dict(data or {})
    unknown = sorted(set(data) - {"seed", "threads", "grid"} - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown top-level keys: {', '.join(unknown)}")

    seed = _coerce("config", "seed", data.get("seed", 0), 0)
    if threads is None and data.get("threads") is not None:
        threads = _coerce("config", "threads", data["threads"], 1)
    threads = resolve_threads(threads)

    grid_data = data.get("grid") or {}
    if not isinstance(grid_data, dict) or set(grid_data) - {"height", "width"}:
        raise ConfigError("grid must be a mapping with height and width")
    try:
        grid = make_grid(
            _coerce("grid", "height", grid_data.get("height", 64), 0),
            _coerce("grid", "width", grid_data.get("width", 128), 0),
        )
    except GridDimensionError as e:
        raise ConfigError(str(e)) from e

    kwargs = {name: _section_kwargs(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    try:
        hp = Hyperparams(**kwargs["hyperparams"])
        return RunConfig(
            seed=seed,
            threads=threads,
            grid=grid,
            hyperparams=hp,
            fit=FitConfig(hp=hp, grid=grid, seed=seed, threads=threads, **kwargs["fit"]),
            register=RegisterConfig(hp=hp, **kwargs["register"]),
            synth=SynthConfig(grid=grid, seed=seed, **kwargs["synth"]),
            eval=EvalConfig(**kwargs["eval"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_config(path: Optional[str] = None, threads: Optional[int] = None) -> RunConfig:
    """Read a YAML or JSON config file; ``None`` gives the defaults."""
    if path is None:
        return build_config({}, threads)
    if not os.path.exists(path):
        raise PathMissingError(f"config does not exist: {path}")
    yaml = YAML(typ="safe")
    try:
        with open(path, "r") as f:
            data = yaml.load(f)
    except YAMLError as e:
        raise ConfigError(f"Error reading configuration {path}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"Configuration {path} must be a mapping")
    return build_config(data, threads)


def with_overrides(cfg: RunConfig, **fit_overrides) -> RunConfig:
    overrides = {k: v for k, v in fit_overrides.items() if v is not None}
    if not overrides:
        return cfg
    try:
        return replace(cfg, fit=replace(cfg.fit, **overrides))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def describe_keys() -> str:
    """Every configuration key with its default, one per line."""
    lines = [
        "seed = 0",
        f"threads = number of cores (env {THREADS_ENV})",
        "grid.height = 64",
        "grid.width = 128",
    ]
    for name, cls in SECTIONS.items():
        for f in _config_keys(cls):
            text = f"{name}.{f.name} = {_default(f)}"
            if "help" in f.metadata:
                text += f"  ({f.metadata['help']})"
            lines.append(text)
    return "\n".join(lines)
