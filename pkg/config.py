"""
Configuration
JSON run, sweep and telescope configs parsed into the module dataclasses; errors name the offending field
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Tuple, Union, get_args, get_origin, get_type_hints

from batchlab import CostModel
from model import RunConfig, with_steps, with_teacher_for
from telescope import TelescopeConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; path is the dotted location of the bad field"""

    def __init__(self, path: str, message: str):
        self.path = path or "<root>"
        self.message = message
        super().__init__(f"{self.path}: {message}")


@dataclass(frozen=True)
class SweepConfig:
    """Batch-size sweep: every (optimizer, batch size) cell is one run of base"""
    base: RunConfig = field(default_factory=RunConfig)
    batch_sizes: Tuple[int, ...] = (8, 16, 32, 64, 128, 256)
    optimizers: Tuple[str, ...] = ("adamw", "muon")
    thresholds: Tuple[float, ...] = (0.05, 0.03, 0.02)
    learning_rates: Dict[str, float] = field(default_factory=dict)
    rel_tol: float = 0.005
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if not self.batch_sizes:
            raise ValueError("batch_sizes must not be empty")
        if any(b < 1 for b in self.batch_sizes) or len(set(self.batch_sizes)) != len(self.batch_sizes):
            raise ValueError(f"batch_sizes must be distinct and >= 1, got {list(self.batch_sizes)}")
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ValueError(f"thresholds must be positive, got {list(self.thresholds)}")
        unknown = set(self.optimizers) - {"adamw", "muon"}
        if not self.optimizers or unknown:
            raise ValueError(f"optimizers must be drawn from adamw, muon, got {list(self.optimizers)}")
        for name, lr in self.learning_rates.items():
            if name not in self.optimizers:
                raise ValueError(f"learning_rates names unknown optimizer {name!r}")
            if lr < 0:
                raise ValueError(f"learning_rates of {name} must be >= 0, got {lr}")
        if self.rel_tol < 0:
            raise ValueError(f"rel_tol must be >= 0, got {self.rel_tol}")


@dataclass(frozen=True)
class TelescopeJob:
    """Telescope plan plus the run every grid point trains"""
    telescope: TelescopeConfig = field(default_factory=TelescopeConfig)
    base: RunConfig = field(default_factory=RunConfig)
    fit_powerlaw: bool = True


def _fail_path(cls, path: str, message: str) -> str:
    """Point at the field a validation message starts with, when there is one"""
    for f in dataclasses.fields(cls):
        if message.startswith(f"{f.name} ") or message.startswith(f"{f.name}."):
            return f"{path}.{f.name}" if path else f.name
    return path


def _convert(tp, value, path: str):
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    origin, args = get_origin(tp), get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return {str(k): _convert(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is Any or tp is object:
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def build(cls, data: Any, path: str = ""):
    """Instantiate dataclass cls from a JSON object, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, f"unknown key (expected one of {sorted(known)})")
    kwargs = {key: _convert(hints[key], value, f"{path}.{key}" if path else key) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(_fail_path(cls, path, str(e)), str(e)) from e


def _with_schedule_length(data: dict) -> dict:
    """schedule.total_steps defaults to the run length; a missing schedule takes the default one"""
    data = dict(data)
    total = data.get("total_steps", RunConfig().total_steps)
    if isinstance(total, bool) or not isinstance(total, int):
        return data
    schedule = data.get("schedule")
    if schedule is None:
        default = RunConfig().schedule
        schedule = {"max_lr": default.max_lr, "warmup_steps": min(default.warmup_steps, max(total - 1, 0)),
                    "final_fraction": default.final_fraction}
    if isinstance(schedule, dict) and "total_steps" not in schedule:
        warmup = schedule.get("warmup_steps", 0)
        warmup = warmup if isinstance(warmup, int) else 0
        data["schedule"] = dict(schedule, total_steps=max(total, warmup + 1))
    return data


def parse_run_config(data: dict, path: str = "") -> RunConfig:
    return build(RunConfig, _with_schedule_length(data), path)


def parse_sweep_config(data: dict) -> SweepConfig:
    data = dict(data)
    base = parse_run_config(data.pop("base", {}), "base")
    config = build(SweepConfig, data)
    return replace(config, base=with_teacher_for(base, [base.spec.hidden_width]))


def parse_telescope_job(data: dict) -> TelescopeJob:
    data = dict(data)
    base = parse_run_config(data.pop("base", {}), "base")
    job = build(TelescopeJob, data)
    base = with_teacher_for(with_steps(base, job.telescope.steps), [job.telescope.final_width])
    return replace(job, base=base)


def read_json(path: Union[str, Path]) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(str(path), "file not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be an object")
    logger.debug("loaded config %s", path)
    return data


def load_run_config(path: Union[str, Path]) -> RunConfig:
    return parse_run_config(read_json(path))


def load_sweep_config(path: Union[str, Path]) -> SweepConfig:
    return parse_sweep_config(read_json(path))


def load_telescope_job(path: Union[str, Path]) -> TelescopeJob:
    return parse_telescope_job(read_json(path))
