"""
Maximal Update Parameterization
muP scaling rules, width-scaling checks (coordinates, spectral norms, lr transfer) and finite-width drift estimates
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from workers import run_pool

logger = logging.getLogger(__name__)

LAYER_CLASSES = ("input", "hidden", "output")
STATIONARY_TOL = 1e-6
BRANCH_TOL = 1e-8


class DriftError(ValueError):
    """Raised when a drift fit or drift coefficient is ill-posed"""


@dataclass(frozen=True)
class MupScaling:
    """Multiplier a(n), init variance b(n) and lr scale c(n) of one layer"""
    layer_class: str
    fan_in: int
    fan_out: int
    multiplier: float
    init_variance: float
    lr_scale: float


def scaling_for(layer_class: str, fan_in: int, fan_out: int) -> MupScaling:
    """Table of muP rules by layer class"""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    if layer_class == "input":
        a, b, c = math.sqrt(fan_out), 1.0 / fan_out, 1.0 / math.sqrt(fan_out)
    elif layer_class == "output":
        a, b, c = 1.0 / math.sqrt(fan_in), 1.0 / fan_in, 1.0 / math.sqrt(fan_in)
    elif layer_class == "hidden":
        a, b, c = 1.0, 1.0 / fan_in, 1.0 / fan_in
    else:
        raise ValueError(f"unknown layer class {layer_class!r}, expected one of {LAYER_CLASSES}")
    return MupScaling(layer_class, fan_in, fan_out, a, b, c)


def standard_scaling(layer_class: str, fan_in: int, fan_out: int) -> MupScaling:
    """Standard parameterization: unit multiplier, 1/fan_in init, unscaled lr"""
    return MupScaling(layer_class, fan_in, fan_out, 1.0, 1.0 / fan_in, 1.0)


# Finite-width drift

@dataclass(frozen=True)
class DriftFit:
    """x*(n) = x_star_inf + alpha / n"""
    x_star_inf: float
    alpha: float
    residual: float

    def predict(self, width: float) -> float:
        return self.x_star_inf + self.alpha / width


@dataclass(frozen=True)
class MeshError:
    """Sampling error of a grid optimum: half the cell size"""
    epsilon: float


def fit_drift(widths: Sequence[float], argmins: Sequence[float]) -> DriftFit:
    """Least-squares fit of observed optima against 1/width"""
    widths = np.asarray(widths, dtype=np.float64)
    argmins = np.asarray(argmins, dtype=np.float64)
    if widths.shape != argmins.shape:
        raise DriftError(f"{widths.size} widths but {argmins.size} argmins")
    if widths.size < 2:
        raise DriftError("fit_drift needs at least two widths")
    if np.any(widths <= 0):
        raise DriftError("widths must be positive")
    if np.unique(widths).size < 2:
        raise DriftError("all widths are equal; the 1/n design is singular")
    design = np.column_stack([np.ones_like(widths), 1.0 / widths])
    coef, *_ = np.linalg.lstsq(design, argmins, rcond=None)
    residuals = argmins - design @ coef
    return DriftFit(
        x_star_inf=float(coef[0]),
        alpha=float(coef[1]),
        residual=float(np.sqrt(np.mean(residuals ** 2))),
    )


def _step(x: float) -> float:
    return 1e-5 * max(1.0, abs(x))


def _d1(fn: Callable[[float], float], x: float) -> float:
    h = _step(x)
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def _d2(fn: Callable[[float], float], x: float) -> float:
    h = _step(x)
    return (fn(x + h) - 2.0 * fn(x) + fn(x - h)) / (h * h)


def drift_coefficient(
    f0: Callable[[float], float],
    f1: Callable[[float], float],
    loss: Callable[[float], float],
    x_star: float,
) -> float:
    """alpha = -l1'(x*) / l0''(x*) for l(x, n) = loss(f0(x) + f1(x) / n)"""
    def l0(x):
        return loss(f0(x))

    def loss_prime(u):
        return _d1(loss, u)

    def l1(x):
        return loss_prime(f0(x)) * f1(x)

    slope = _d1(l0, x_star)
    if abs(slope) > STATIONARY_TOL:
        raise DriftError(f"x_star={x_star} is not stationary: l0'={slope:.3e}")
    curvature = _d2(l0, x_star)
    if curvature <= 0:
        raise DriftError(f"x_star={x_star} is not a local minimum: l0''={curvature:.3e}")

    outer = loss_prime(f0(x_star))
    inner = _d1(f0, x_star)
    outer_zero = abs(outer) <= BRANCH_TOL
    inner_zero = abs(inner) <= BRANCH_TOL
    if outer_zero and inner_zero:
        raise DriftError(
            f"both branch conditions hold (|loss'(f0)|={abs(outer):.3e}, |f0'|={abs(inner):.3e})"
        )
    if outer_zero:
        return -f1(x_star) / inner
    if inner_zero:
        return -_d1(f1, x_star) / _d2(f0, x_star)
    return -_d1(l1, x_star) / curvature


# Scalar search helpers

def minimize_bounded(fn: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10) -> float:
    """Minimizer of a unimodal function on [lo, hi] (bounded Brent search)"""
    result = minimize_scalar(fn, bounds=(float(lo), float(hi)), method="bounded",
                             options={"xatol": tol, "maxiter": 1000})
    return float(result.x)


def minimize_on_grid(fn: Callable[[float], float], points: Sequence[float]) -> Tuple[int, float]:
    """Index and value of the first grid point with the lowest loss"""
    values = [fn(p) for p in points]
    index = int(np.argmin(values))
    return index, float(points[index])


def mesh_error(points: Sequence[float]) -> MeshError:
    points = np.sort(np.asarray(points, dtype=np.float64))
    if points.size < 2:
        return MeshError(epsilon=0.0)
    return MeshError(epsilon=float(np.max(np.diff(points))) / 2.0)


def refine_mesh(points: Sequence[float], center: float, count: Optional[int] = None,
                spacing: Optional[float] = None) -> np.ndarray:
    """Half-spacing submesh centered on center and clamped inside the hull of points"""
    points = np.sort(np.asarray(points, dtype=np.float64))
    count = points.size if count is None else count
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if spacing is None:
        if points.size < 2:
            raise ValueError("the spacing of a one-point mesh must be given")
        spacing = (points[-1] - points[0]) / (points.size - 1)
    half = spacing / 2.0
    span = half * (count - 1)
    start = min(max(center - span / 2.0, points[0]), points[-1] - span)
    return start + half * np.arange(count)


# Width-scaling checks

@dataclass(frozen=True)
class CheckRow:
    """One (width, layer, metric, value) record of a width-scaling check"""
    width: int
    layer: str
    metric: str
    value: float
    flag: str = ""


def spectral_ratio(weight: np.ndarray, multiplier: float = 1.0) -> float:
    """||a W||_2 / sqrt(fan_out / fan_in)"""
    fan_out, fan_in = weight.shape
    return float(multiplier * np.linalg.norm(weight, 2) / math.sqrt(fan_out / fan_in))


def spread(rows: Sequence[CheckRow], metric: str) -> Dict[str, float]:
    """max/min ratio of a metric across widths, per layer"""
    by_layer: Dict[str, List[float]] = {}
    for row in rows:
        if row.metric == metric and not row.flag:
            by_layer.setdefault(row.layer, []).append(row.value)
    return {layer: max(values) / min(values) for layer, values in by_layer.items()}


def check_widths(widths: Sequence[int]) -> None:
    """Widths must ascend in power-of-two multiples of the first"""
    if not widths:
        raise ValueError("at least one width is required")
    base = widths[0]
    if base < 1:
        raise ValueError(f"widths must be >= 1, got {list(widths)}")
    for prev, width in zip(widths, widths[1:]):
        if width <= prev:
            raise ValueError(f"widths must be ascending, got {list(widths)}")
    for width in widths:
        ratio = width // base
        if width % base or ratio & (ratio - 1):
            raise ValueError(f"width {width} is not a power-of-two multiple of {base}")


def width_configs(base, widths: Sequence[int], mup_enabled: bool = True) -> list:
    """One config per width, all served by the same teacher sized for the widest"""
    import model

    base = model.with_teacher_for(base, widths)
    return [replace(base, spec=replace(base.spec, hidden_width=w, mup_enabled=mup_enabled)) for w in widths]


def _coordinate_cell(args) -> List[CheckRow]:
    import model

    config, steps, seed = args
    width = config.spec.hidden_width
    held_out = model.held_out_batch(config.task, seed)
    trainer = model.Trainer(config)
    rows = [CheckRow(width, layer, "rms_t0", value)
            for layer, value in model.activation_rms(config.spec, trainer.weights, held_out).items()]
    if steps > 0:
        trace = trainer.run()
        if trace.diverged:
            logger.warning("coordinate check diverged at width %d, step %s", width, trace.diverged_at)
            return rows + [CheckRow(width, "all", f"rms_t{steps}", float("nan"), flag="diverged")]
        rows += [CheckRow(width, layer, f"rms_t{steps}", value)
                 for layer, value in model.activation_rms(config.spec, trainer.weights, held_out).items()]
    return rows


def coordinate_check(widths: Sequence[int], steps: int, seed: int, base=None, jobs: int = 1) -> List[CheckRow]:
    """Per-layer activation RMS at init and after `steps` updates, for each width"""
    import model

    check_widths(widths)
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    cells = []
    for config in width_configs(base or model.default_run_config(), widths):
        config = model.with_steps(config, steps) if steps > 0 else config
        cells.append((replace(config, run_seed=seed), steps, seed))
    rows: List[CheckRow] = []
    for result in run_pool(_coordinate_cell, cells, jobs):
        rows.extend(result)
    return rows


def _spectral_cell(args) -> List[CheckRow]:
    import model

    config, seed = args
    width = config.spec.hidden_width
    weights = model.init_weights(config.spec, seed)
    rows = []
    for name, scaling, w in zip(config.spec.layer_names(), config.spec.scalings(), weights):
        rows.append(CheckRow(width, name, "spectral_ratio", spectral_ratio(w, scaling.multiplier)))
    return rows


def spectral_check(widths: Sequence[int], seed: int, base=None, jobs: int = 1) -> List[CheckRow]:
    """Spectral norm of each effective init weight relative to sqrt(fan_out / fan_in)"""
    import model

    check_widths(widths)
    cells = [(config, seed) for config in width_configs(base or model.default_run_config(), widths)]
    rows: List[CheckRow] = []
    for result in run_pool(_spectral_cell, cells, jobs):
        rows.extend(result)
    return rows


HELD_OUT_SIZE = 1024


def _transfer_cell(args) -> float:
    import model

    config, lr, seeds = args
    held_out = model.held_out_batch(config.task, 0, HELD_OUT_SIZE)
    losses = []
    for seed in seeds:
        trainer = model.Trainer(replace(model.with_lr(config, lr), run_seed=seed))
        if trainer.run().diverged:
            return float("inf")
        try:
            losses.append(model.forward(config.spec, trainer.weights, held_out)[1])
        except model.DivergenceError:
            return float("inf")
    return float(np.mean(losses))


def lr_transfer_sweep(
    base,
    widths: Sequence[int],
    lr_grid: Sequence[float],
    mup_enabled: bool,
    jobs: int = 1,
    seeds: Sequence[int] = (0,),
) -> Dict[int, List[float]]:
    """Held-out loss after training, averaged over seeds, for every (width, base lr) cell

    Every width trains on the same stream from a teacher sized for the widest student, and the
    final weights are scored on one fixed held-out batch so the lr curves are free of
    evaluation noise.
    """
    cells = [(config, lr, tuple(seeds)) for config in width_configs(base, widths, mup_enabled) for lr in lr_grid]
    losses = run_pool(_transfer_cell, cells, jobs)
    out: Dict[int, List[float]] = {}
    for index, width in enumerate(widths):
        out[width] = list(losses[index * len(lr_grid):(index + 1) * len(lr_grid)])
    return out


def transfer_cells_apart(sweep: Dict[int, List[float]], small: int, large: int) -> int:
    """Grid distance between the lr argmins found at two widths"""
    return abs(int(np.argmin(sweep[small])) - int(np.argmin(sweep[large])))


def log_grid(lo: float, hi: float, per_decade: int) -> List[float]:
    """Log-spaced points from lo to hi with per_decade points per factor of ten"""
    count = int(round(math.log10(hi / lo) * per_decade)) + 1
    return list(np.logspace(math.log10(lo), math.log10(hi), count))
