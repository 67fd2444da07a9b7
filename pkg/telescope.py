"""
Telescoping Sweep
Hierarchical hyperparameter search across width doublings, its compute ledger and the power-law loss summary
"""
import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mup import minimize_bounded, refine_mesh
from workers import run_pool

logger = logging.getLogger(__name__)

ALPHA_BOUNDS = (1e-3, 3.0)
ALPHA_GRID_POINTS = 300

Point = Tuple[float, ...]
Objective = Callable[[int, Point], float]


class TelescopeError(ValueError):
    """Raised for invalid telescope plans or fits"""


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


@dataclass(frozen=True)
class TelescopeConfig:
    """Widths, grid size and log10 search ranges; each run costs width^2 * steps"""
    base_width: int = 64
    calibration_width: int = 256
    final_width: int = 512
    points: int = 8
    ranges: Tuple[Tuple[float, float], ...] = ((-3.0, -0.5), (-5.0, -1.0))
    names: Tuple[str, ...] = ("lr", "weight_decay")
    steps: int = 200

    def __post_init__(self):
        n0, nc, n = self.base_width, self.calibration_width, self.final_width
        if n0 < 1 or not n0 <= nc <= n:
            raise TelescopeError(f"widths must satisfy 1 <= N0 <= Nc <= N, got {n0}, {nc}, {n}")
        for width in (nc, n):
            if width % n0 or not _is_power_of_two(width // n0):
                raise TelescopeError(f"width {width} is not a power-of-two multiple of {n0}")
        if self.points < 2:
            raise TelescopeError(f"points per hyperparameter must be >= 2, got {self.points}")
        if not self.ranges:
            raise TelescopeError("at least one hyperparameter range is required")
        if len(self.names) != len(self.ranges):
            raise TelescopeError(f"{len(self.names)} names for {len(self.ranges)} ranges")
        for name, (lo, hi) in zip(self.names, self.ranges):
            if not lo < hi:
                raise TelescopeError(f"range of {name} must have lower < upper, got ({lo}, {hi})")
        if self.steps < 1:
            raise TelescopeError(f"steps must be >= 1, got {self.steps}")

    @property
    def k(self) -> int:
        return len(self.ranges)

    @property
    def full_grid_runs(self) -> int:
        return self.points ** self.k

    def level_widths(self) -> List[int]:
        widths = [self.base_width]
        while widths[-1] < self.calibration_width:
            widths.append(widths[-1] * 2)
        return widths

    def run_cost(self, width: int) -> int:
        return width * width * self.steps


def shrink_count(count: int, k: int) -> int:
    """count * 4^(-1/k) rounded half up, never below one point"""
    return max(1, int(math.floor(count * 4.0 ** (-1.0 / k) + 0.5)))


@dataclass
class TelescopeLevel:
    """One width of the sweep"""
    width: int
    grid: List[np.ndarray]
    spacing: List[float]
    points: List[Point] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    argmin: Optional[Point] = None
    best_loss: float = math.inf
    cost: int = 0
    boundary: bool = False

    @property
    def counts(self) -> List[int]:
        return [len(g) for g in self.grid]


@dataclass(frozen=True)
class ComputeLedger:
    level_costs: Tuple[int, ...]
    final_cost: int
    full_grid_cost: int
    percent_saved: float
    percent_on_final: float


@dataclass
class TelescopeResult:
    levels: List[TelescopeLevel]
    selected: Point
    ledger: ComputeLedger
    final_loss: Optional[float] = None

    def selected_values(self, names: Sequence[str]) -> Dict[str, float]:
        return {name: 10.0 ** coord for name, coord in zip(names, self.selected)}

    def best_so_far(self) -> List[float]:
        """Running minimum of the level best losses"""
        running, best = [], math.inf
        for level in self.levels:
            best = min(best, level.best_loss)
            running.append(best)
        return running


def _evaluate(args) -> float:
    objective, width, point = args
    return float(objective(width, point))


def _sweep(level: TelescopeLevel, objective: Objective, cost: int, jobs: int) -> TelescopeLevel:
    level.points = [tuple(float(c) for c in p) for p in itertools.product(*level.grid)]
    results = run_pool(_evaluate, [(objective, level.width, p) for p in level.points], jobs, return_exceptions=True)
    losses = []
    for point, result in zip(level.points, results):
        if isinstance(result, Exception):
            logger.warning("width %d point %s failed: %s", level.width, point, result)
            result = math.inf
        losses.append(result if math.isfinite(result) else math.inf)
    level.losses = losses
    best = int(np.argmin(losses))
    level.argmin = level.points[best]
    level.best_loss = losses[best]
    level.cost = len(level.points) * cost

    index = np.unravel_index(best, level.counts)
    level.boundary = any(n > 1 and i in (0, n - 1) for i, n in zip(index, level.counts))
    if level.boundary:
        logger.warning("width %d: argmin %s lies on the grid boundary", level.width, level.argmin)
    if not math.isfinite(level.best_loss):
        logger.warning("width %d: every grid point diverged", level.width)
    return level


def _first_level(cfg: TelescopeConfig) -> TelescopeLevel:
    grid = [np.linspace(lo, hi, cfg.points) for lo, hi in cfg.ranges]
    spacing = [(hi - lo) / (cfg.points - 1) for lo, hi in cfg.ranges]
    return TelescopeLevel(width=cfg.base_width, grid=grid, spacing=spacing)


def _next_level(cfg: TelescopeConfig, previous: TelescopeLevel) -> TelescopeLevel:
    grid, spacing = [], []
    for axis, (points, step) in enumerate(zip(previous.grid, previous.spacing)):
        count = shrink_count(len(points), cfg.k)
        grid.append(refine_mesh(points, previous.argmin[axis], count, spacing=step))
        spacing.append(step / 2.0)
    return TelescopeLevel(width=previous.width * 2, grid=grid, spacing=spacing)


def run_telescope(cfg: TelescopeConfig, objective: Objective, jobs: int = 1, run_final: bool = True) -> TelescopeResult:
    """Sweep at the base width, then halve the mesh and shrink the grid at every doubling up to Nc"""
    levels = [_sweep(_first_level(cfg), objective, cfg.run_cost(cfg.base_width), jobs)]
    logger.info("level 0 at width %d: %d runs, best loss %.6g", cfg.base_width, len(levels[0].points), levels[0].best_loss)
    while levels[-1].width < cfg.calibration_width:
        level = _next_level(cfg, levels[-1])
        _sweep(level, objective, cfg.run_cost(level.width), jobs)
        levels.append(level)
        logger.info("level %d at width %d: %d runs, best loss %.6g",
                    len(levels) - 1, level.width, len(level.points), level.best_loss)

    selected = levels[-1].argmin
    final_cost = cfg.run_cost(cfg.final_width)
    final_loss = None
    if run_final:
        final_loss = _evaluate((objective, cfg.final_width, selected))
        logger.info("final run at width %d: loss %.6g", cfg.final_width, final_loss)
    ledger = compute_ledger(cfg, levels, final_cost)
    return TelescopeResult(levels=levels, selected=selected, ledger=ledger, final_loss=final_loss)


def compute_ledger(cfg: TelescopeConfig, levels: Sequence[TelescopeLevel], final_cost: int) -> ComputeLedger:
    """Sweep-plus-final cost against a full grid at the final width plus the same final run"""
    if not levels:
        raise TelescopeError("the ledger needs at least one level")
    level_costs = tuple(level.cost for level in levels)
    spent = sum(level_costs) + final_cost
    full_grid = cfg.full_grid_runs * cfg.run_cost(cfg.final_width)
    saved = 100.0 * (1.0 - spent / (full_grid + final_cost))
    if not 0.0 <= saved <= 100.0:
        logger.warning("telescope spent more than the full grid (%.2f%% saved); clamping to 0", saved)
        saved = min(max(saved, 0.0), 100.0)
    return ComputeLedger(
        level_costs=level_costs,
        final_cost=final_cost,
        full_grid_cost=full_grid,
        percent_saved=saved,
        percent_on_final=100.0 * final_cost / spent,
    )


def planned_level_costs(cfg: TelescopeConfig, exact: bool = False) -> List[float]:
    """Cost of every level before running; exact skips integer rounding of the grid size"""
    costs = []
    count: float = cfg.points
    for level, width in enumerate(cfg.level_widths()):
        if level > 0:
            count = count * 4.0 ** (-1.0 / cfg.k) if exact else shrink_count(int(count), cfg.k)
        costs.append(count ** cfg.k * cfg.run_cost(width))
    return costs


# Training objective

@dataclass(frozen=True)
class TrainingObjective:
    """Final smoothed loss of a model run at (width, log10 lr, log10 weight decay)"""
    base: object
    names: Tuple[str, ...] = ("lr", "weight_decay")

    def __call__(self, width: int, point: Point) -> float:
        import model

        config = replace(self.base, spec=replace(self.base.spec, hidden_width=width))
        for name, coord in zip(self.names, point):
            value = 10.0 ** coord
            if name == "lr":
                config = model.with_lr(config, value)
            elif name == "weight_decay":
                config = model.with_weight_decay(config, value)
            else:
                raise TelescopeError(f"cannot sweep {name!r}; supported: lr, weight_decay")
        trace = model.train(config)
        if trace.diverged or not trace.samples:
            return math.inf
        return trace.final_loss


# Power-law summary

@dataclass(frozen=True)
class PowerLawFit:
    """L(d) = A / d^alpha + E"""
    a: float
    alpha: float
    e: float
    r_squared: float
    degenerate: bool = False

    def predict(self, size: float) -> float:
        return self.a / size ** self.alpha + self.e


def _linear_part(d: np.ndarray, losses: np.ndarray, alpha: float) -> Tuple[float, float, float]:
    design = np.column_stack([d ** -alpha, np.ones_like(d)])
    (a, e), *_ = np.linalg.lstsq(design, losses, rcond=None)
    residual = losses - design @ np.array([a, e])
    return float(a), float(e), float(np.sqrt(np.sum(residual ** 2)))


def powerlaw_fit(sizes: Sequence[float], losses: Sequence[float]) -> PowerLawFit:
    """Grid then bounded refine over alpha, with A and E solved linearly for each alpha"""
    d = np.asarray(sizes, dtype=np.float64)
    y = np.asarray(losses, dtype=np.float64)
    if d.shape != y.shape or d.size < 3:
        raise TelescopeError(f"power-law fit needs >= 3 matching points, got {d.size} sizes and {y.size} losses")
    if np.any(d <= 0):
        raise TelescopeError("sizes must be positive")
    if np.any(y <= 0):
        raise TelescopeError("losses must be positive")

    total = float(np.sum((y - y.mean()) ** 2))
    if total == 0.0:
        logger.warning("constant losses; the power-law exponent is indeterminate")
        return PowerLawFit(a=0.0, alpha=ALPHA_BOUNDS[0], e=float(y[0]), r_squared=0.0, degenerate=True)

    # rescaling d keeps d^-alpha well conditioned; A is mapped back below
    scale = float(np.exp(np.mean(np.log(d))))
    d_scaled = d / scale
    grid = np.linspace(*ALPHA_BOUNDS, ALPHA_GRID_POINTS)
    scores = [_linear_part(d_scaled, y, alpha)[2] for alpha in grid]
    best = int(np.argmin(scores))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, grid.size - 1)]
    alpha = minimize_bounded(lambda t: _linear_part(d_scaled, y, t)[2], lo, hi, tol=1e-12)
    if _linear_part(d_scaled, y, alpha)[2] > scores[best]:
        alpha = float(grid[best])
    a_scaled, e, rss = _linear_part(d_scaled, y, alpha)
    r_squared = min(max(1.0 - rss ** 2 / total, 0.0), 1.0)
    return PowerLawFit(a=a_scaled * scale ** alpha, alpha=alpha, e=e, r_squared=r_squared)


# Persistence

def level_to_dict(level: TelescopeLevel, names: Sequence[str]) -> dict:
    return {
        "width": level.width,
        "grid": {name: [float(v) for v in g] for name, g in zip(names, level.grid)},
        "spacing": dict(zip(names, level.spacing)),
        "points": [list(p) for p in level.points],
        "losses": [loss if math.isfinite(loss) else None for loss in level.losses],
        "argmin": list(level.argmin) if level.argmin is not None else None,
        "best_loss": level.best_loss if math.isfinite(level.best_loss) else None,
        "cost": level.cost,
        "boundary": level.boundary,
    }


def write_levels(directory: Union[str, Path], result: TelescopeResult, cfg: TelescopeConfig,
                 fit: Optional[PowerLawFit] = None) -> List[Path]:
    """One JSON per level plus ledger.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for index, level in enumerate(result.levels):
        path = directory / f"level_{index:02d}.json"
        path.write_text(json.dumps(level_to_dict(level, cfg.names), indent=2, sort_keys=True))
        written.append(path)
    ledger = {
        "level_costs": list(result.ledger.level_costs),
        "final_cost": result.ledger.final_cost,
        "full_grid_cost": result.ledger.full_grid_cost,
        "percent_saved": result.ledger.percent_saved,
        "percent_on_final": result.ledger.percent_on_final,
        "selected": result.selected_values(cfg.names),
        "final_width": cfg.final_width,
        "final_loss": result.final_loss,
        "best_so_far": [loss if math.isfinite(loss) else None for loss in result.best_so_far()],
    }
    if fit is not None:
        ledger["powerlaw"] = {"a": fit.a, "alpha": fit.alpha, "e": fit.e,
                              "r_squared": fit.r_squared, "degenerate": fit.degenerate}
    path = directory / "ledger.json"
    path.write_text(json.dumps(ledger, indent=2, sort_keys=True))
    written.append(path)
    return written


def write_loss_distribution_csv(path: Union[str, Path], result: TelescopeResult, cfg: TelescopeConfig) -> Path:
    """Every evaluated grid point, one row per (level, point)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["level", "width", *cfg.names, "loss"])
        for index, level in enumerate(result.levels):
            for point, loss in zip(level.points, level.losses):
                writer.writerow([index, level.width, *(repr(c) for c in point),
                                 repr(loss) if math.isfinite(loss) else "inf"])
    return path
