"""
Batch-Size Calculus
Steps/tokens-to-loss curves, token-optimal batch size, token ratio and advantage,
the piecewise critical-batch model and the compute-time Pareto frontier
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mup import minimize_bounded

logger = logging.getLogger(__name__)

SLOPE_EPS = 1e-6
DEFAULT_REL_TOL = 0.005
PERFECT_SCALING_TOL = 0.02

# (exclusive batch-size bound, devices); larger batches get overflow_devices
DESK_DEVICE_RULE = ((64, 8), (128, 16), (256, 32), (512, 64))
LLM_DEVICE_RULE = ((2 ** 20, 8), (2 ** 21, 16), (2 ** 22, 32), (2 ** 23, 64))


class CurveError(ValueError):
    """Raised when a curve cannot be built or analysed"""


class UnreachableThresholdError(CurveError):
    """No trace reaches the loss threshold"""

    def __init__(self, threshold: float, lowest: float, highest: float):
        self.threshold = threshold
        self.lowest = lowest
        self.highest = highest
        super().__init__(
            f"loss threshold {threshold:g} is never reached; achievable smoothed losses "
            f"range from {lowest:.6g} to {highest:.6g}, pick a higher threshold"
        )


# Curves

def steps_to_loss(trace, threshold: float) -> Optional[int]:
    """First step whose smoothed loss is <= threshold, log-interpolated; None if never reached"""
    if not trace.samples:
        raise CurveError("cannot read a threshold crossing from an empty trace")
    if not threshold > 0:
        raise CurveError(f"loss threshold must be positive, got {threshold}")
    previous = None
    for sample in trace.samples:
        if sample.smoothed_loss <= threshold:
            if previous is None or sample.smoothed_loss <= 0:
                return sample.step
            hi, lo = math.log(previous.smoothed_loss), math.log(sample.smoothed_loss)
            frac = (hi - math.log(threshold)) / (hi - lo) if hi != lo else 1.0
            crossing = previous.step + frac * (sample.step - previous.step)
            # rounding noise must not push an exact crossing up a whole step
            return int(math.ceil(crossing - 1e-9))
        previous = sample
    return None


@dataclass(frozen=True)
class CurvePoint:
    batch_size: int
    steps: Optional[float]
    tokens: Optional[float]

    @property
    def reached(self) -> bool:
        return self.steps is not None


@dataclass(frozen=True)
class SweepCurve:
    """S_L(B) and T_L(B) = B * S_L(B) for one loss threshold"""
    threshold: float
    points: Tuple[CurvePoint, ...]

    def __post_init__(self):
        sizes = [p.batch_size for p in self.points]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise CurveError(f"batch sizes must be strictly increasing, got {sizes}")

    def reached(self) -> List[CurvePoint]:
        return [p for p in self.points if p.reached]

    def point(self, batch_size: int) -> CurvePoint:
        for p in self.points:
            if p.batch_size == batch_size:
                return p
        raise KeyError(batch_size)


def curve_from_steps(threshold: float, steps: Mapping[int, Optional[float]], tokens_per_sample: int = 1) -> SweepCurve:
    points = []
    for batch_size in sorted(steps):
        s = steps[batch_size]
        tokens = None if s is None else batch_size * s * tokens_per_sample
        points.append(CurvePoint(int(batch_size), s, tokens))
    return SweepCurve(threshold=threshold, points=tuple(points))


def build_sweep_curve(traces: Mapping[int, object], threshold: float) -> SweepCurve:
    """Threshold crossing of every batch size's trace"""
    if not traces:
        raise CurveError("no traces to build a curve from")
    steps = {}
    tokens_per_sample = 1
    for batch_size, trace in traces.items():
        if trace.batch_size != batch_size:
            raise CurveError(f"trace for B={batch_size} was recorded with B={trace.batch_size}")
        tokens_per_sample = trace.tokens_per_sample
        steps[batch_size] = steps_to_loss(trace, threshold)
    if all(s is None for s in steps.values()):
        lowest = min(t.min_loss for t in traces.values())
        highest = max(t.samples[0].smoothed_loss for t in traces.values())
        raise UnreachableThresholdError(threshold, lowest, highest)
    return curve_from_steps(threshold, steps, tokens_per_sample)


def token_optimal_batch(curve: SweepCurve, rel_tol: float = DEFAULT_REL_TOL) -> int:
    """Largest B whose token cost is within rel_tol of the minimum"""
    reached = curve.reached()
    if not reached:
        raise CurveError(f"no batch size reaches loss {curve.threshold:g}")
    if rel_tol < 0:
        raise CurveError(f"rel_tol must be >= 0, got {rel_tol}")
    best = min(p.tokens for p in reached)
    return max(p.batch_size for p in reached if p.tokens <= (1.0 + rel_tol) * best)


@dataclass(frozen=True)
class RatioPoint:
    """R = T_A / T_M and the excess (T_A - T_M) / T_M at one batch size"""
    batch_size: int
    ratio: float
    excess: float


def _shared(curve_a: SweepCurve, curve_m: SweepCurve) -> List[Tuple[CurvePoint, CurvePoint]]:
    if curve_a.threshold != curve_m.threshold:
        raise CurveError(f"curves use different thresholds ({curve_a.threshold:g} vs {curve_m.threshold:g})")
    # a threshold met before the first update costs zero tokens and has no ratio
    muon = {p.batch_size: p for p in curve_m.reached() if p.tokens > 0}
    pairs = [(p, muon[p.batch_size]) for p in curve_a.reached() if p.batch_size in muon and p.tokens > 0]
    if not pairs:
        raise CurveError("the two curves share no batch size reached after a positive number of steps")
    return pairs


def token_ratio(curve_adamw: SweepCurve, curve_muon: SweepCurve) -> List[RatioPoint]:
    return [RatioPoint(a.batch_size, a.tokens / m.tokens, (a.tokens - m.tokens) / m.tokens)
            for a, m in _shared(curve_adamw, curve_muon)]


def token_advantage(curve_adamw: SweepCurve, curve_muon: SweepCurve) -> List[Tuple[int, float]]:
    """Tokens the second optimizer saves over the first, per shared batch size"""
    return [(a.batch_size, a.tokens - m.tokens) for a, m in _shared(curve_adamw, curve_muon)]


# Piecewise critical-batch model

@dataclass(frozen=True)
class PiecewiseFit:
    """log S = -log B + b1 up to B*, then m log B + b2 (natural logs)"""
    b_star: float
    b1: float
    m: float
    b2: float
    sse: float
    warnings: Tuple[str, ...] = ()

    @property
    def t_star(self) -> float:
        return math.exp(self.b1)

    def continuity_residual(self) -> float:
        c = math.log(self.b_star)
        return abs((-c + self.b1) - (self.m * c + self.b2))


def toy_steps(batch_size: float, b_star: float, m: float, t_star: float) -> float:
    """Steps to the threshold under the piecewise model with slope -1 then m"""
    if batch_size <= b_star:
        return t_star / batch_size
    return (t_star / b_star) * (batch_size / b_star) ** m


def toy_curve(batch_sizes: Sequence[int], b_star: float, m: float, t_star: float, threshold: float = 1.0,
              noise: float = 0.0, seed: int = 0) -> SweepCurve:
    """Curve generated from the piecewise model, with optional multiplicative noise on S"""
    rng = np.random.default_rng(seed)
    steps = {}
    for batch_size in batch_sizes:
        s = toy_steps(batch_size, b_star, m, t_star)
        if noise > 0:
            s *= 1.0 + noise * rng.standard_normal()
        steps[int(batch_size)] = s
    return curve_from_steps(threshold, steps)


def fit_steps(fit: PiecewiseFit, batch_size: float) -> float:
    if batch_size <= 0:
        raise CurveError(f"batch size must be positive, got {batch_size}")
    if batch_size <= fit.b_star:
        return math.exp(fit.b1) / batch_size
    return math.exp(fit.b2) * batch_size ** fit.m


def fit_tokens(fit: PiecewiseFit, batch_size: float) -> float:
    """T(B): e^b1 below the breakpoint, e^b2 B^(m+1) above"""
    if batch_size <= 0:
        raise CurveError(f"batch size must be positive, got {batch_size}")
    if batch_size <= fit.b_star:
        return math.exp(fit.b1)
    return math.exp(fit.b2) * batch_size ** (fit.m + 1.0)


def _segments(x: np.ndarray, y: np.ndarray, c: float) -> Tuple[float, float, float, bool]:
    """(b1, m, sse, clamped) with the breakpoint at log B = c"""
    left = x <= c
    b1 = float(np.mean(y[left] + x[left]))
    sse = float(np.sum((y[left] - (b1 - x[left])) ** 2))
    right = ~left
    if not np.any(right):
        return b1, -1.0 + SLOPE_EPS, sse, False
    dx = x[right] - c
    dy = y[right] - (b1 - c)
    raw = float(np.dot(dx, dy) / np.dot(dx, dx))
    m = min(max(raw, -1.0 + SLOPE_EPS), -SLOPE_EPS)
    sse += float(np.sum((dy - m * dx) ** 2))
    return b1, m, sse, m != raw


def fit_piecewise(curve: SweepCurve) -> PiecewiseFit:
    """Breakpoint search over observed and midpoint batch sizes, then a bounded refine"""
    reached = [p for p in curve.reached() if p.steps > 0]
    if len(reached) < 4:
        raise CurveError(f"piecewise fit needs at least 4 points reached after step 0, got {len(reached)}")
    x = np.log([p.batch_size for p in reached])
    y = np.log([p.steps for p in reached])
    candidates = np.sort(np.concatenate([x, (x[:-1] + x[1:]) / 2.0]))
    scores = [_segments(x, y, c)[2] for c in candidates]
    best = int(np.argmin(scores))
    c = float(candidates[best])
    if best < len(candidates) - 1:
        lo = float(candidates[max(best - 1, 0)])
        hi = float(candidates[best + 1])
        refined = minimize_bounded(lambda t: _segments(x, y, t)[2], lo, hi, tol=1e-12)
        if _segments(x, y, refined)[2] < scores[best]:
            c = refined

    b1, m, sse, clamped = _segments(x, y, c)
    warnings = []
    if not np.any(x > c):
        warnings.append("no points beyond the breakpoint; B* is the largest observed batch size")
    elif clamped:
        warnings.append(f"right slope clamped to {m:.6f}")
    for message in warnings:
        logger.warning("piecewise fit at L=%g: %s", curve.threshold, message)
    return PiecewiseFit(b_star=math.exp(c), b1=b1, m=m, b2=b1 - c - m * c, sse=sse, warnings=tuple(warnings))


def ratio_model(fit_a: PiecewiseFit, fit_m: PiecewiseFit, batch_size: float) -> float:
    """R(B) = T_A(B) / T_M(B) from two fitted models"""
    return fit_tokens(fit_a, batch_size) / fit_tokens(fit_m, batch_size)


def ratio_branch_slope(fit_a: PiecewiseFit, fit_m: PiecewiseFit, batch_size: float) -> float:
    """d log R / d log B: 0, m_A + 1 or m_A - m_M depending on the branch"""
    if batch_size <= 0:
        raise CurveError(f"batch size must be positive, got {batch_size}")

    def exponent(fit):
        return 0.0 if batch_size <= fit.b_star else fit.m + 1.0

    return exponent(fit_a) - exponent(fit_m)


@dataclass(frozen=True)
class SlopeReport:
    left_exponent: float
    right_exponent: Optional[float]
    perfect_scaling: bool
    left_points: int


def slope_minus_one_check(fit: PiecewiseFit, curve: SweepCurve) -> SlopeReport:
    """Token exponent of each segment; the left one is 0 iff steps scale as 1/B"""
    reached = [p for p in curve.reached() if p.steps > 0]
    x = np.log([p.batch_size for p in reached])
    y = np.log([p.steps for p in reached])
    left = x <= math.log(fit.b_star) + 1e-12
    if np.count_nonzero(left) >= 2:
        slope = float(np.polyfit(x[left], y[left], 1)[0])
    else:
        slope = -1.0
    right_exponent = fit.m + 1.0 if np.any(~left) else None
    left_exponent = slope + 1.0
    return SlopeReport(
        left_exponent=left_exponent,
        right_exponent=right_exponent,
        perfect_scaling=abs(left_exponent) <= PERFECT_SCALING_TOL,
        left_points=int(np.count_nonzero(left)),
    )


# Compute-time tradeoff

@dataclass(frozen=True)
class CostModel:
    """Simulated hardware: device count by batch size and a linear step time"""
    device_rule: Tuple[Tuple[int, int], ...] = DESK_DEVICE_RULE
    overflow_devices: int = 128
    kappa: float = 1e-6
    fixed_overhead: float = 0.01

    def __post_init__(self):
        bounds = [b for b, _ in self.device_rule]
        counts = [d for _, d in self.device_rule] + [self.overflow_devices]
        if any(b <= a for a, b in zip(bounds, bounds[1:])):
            raise CurveError(f"device rule bounds must increase, got {bounds}")
        if any(d < 1 for d in counts) or any(b < a for a, b in zip(counts, counts[1:])):
            raise CurveError(f"device counts must be >= 1 and non-decreasing, got {counts}")
        if self.kappa < 0 or self.fixed_overhead < 0 or self.kappa + self.fixed_overhead <= 0:
            raise CurveError("kappa and fixed_overhead must be >= 0 and not both zero")

    def devices(self, batch_size: int) -> int:
        for bound, count in self.device_rule:
            if batch_size < bound:
                return count
        return self.overflow_devices

    def step_time(self, batch_size: int, devices: Optional[int] = None) -> float:
        devices = self.devices(batch_size) if devices is None else devices
        return self.fixed_overhead + self.kappa * batch_size / devices


@dataclass(frozen=True)
class TradeoffPoint:
    batch_size: int
    devices: int
    steps: Optional[float]
    time: float
    compute: float
    reached: bool


def tradeoff_points(curve: SweepCurve, cost: CostModel) -> List[TradeoffPoint]:
    """Wall time and device compute to reach the threshold at every batch size"""
    out = []
    for p in curve.points:
        devices = cost.devices(p.batch_size)
        if not p.reached:
            out.append(TradeoffPoint(p.batch_size, devices, None, math.inf, math.inf, False))
            continue
        time = p.steps * cost.step_time(p.batch_size, devices)
        out.append(TradeoffPoint(p.batch_size, devices, p.steps, time, devices * time, True))
    return out


def pareto_frontier(points: Sequence[TradeoffPoint]) -> List[TradeoffPoint]:
    """Non-dominated reached points under (compute, time), by compute ascending"""
    order = sorted(
        (i for i, p in enumerate(points) if p.reached),
        key=lambda i: (points[i].compute, points[i].time, i),
    )
    frontier = []
    best_time = math.inf
    for i in order:
        if points[i].time < best_time:
            frontier.append(points[i])
            best_time = points[i].time
    return frontier


# Per-threshold analysis

@dataclass
class ThresholdAnalysis:
    """Everything derived from one threshold's curves"""
    threshold: float
    curves: Dict[str, SweepCurve]
    token_optimal: Dict[str, int] = field(default_factory=dict)
    fits: Dict[str, PiecewiseFit] = field(default_factory=dict)
    slopes: Dict[str, SlopeReport] = field(default_factory=dict)
    tradeoff: Dict[str, List[TradeoffPoint]] = field(default_factory=dict)
    frontier: Dict[str, List[TradeoffPoint]] = field(default_factory=dict)
    ratio: List[RatioPoint] = field(default_factory=list)
    advantage: List[Tuple[int, float]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


def analyze_threshold(curves: Mapping[str, SweepCurve], cost: CostModel, rel_tol: float = DEFAULT_REL_TOL,
                      baseline: str = "adamw", candidate: str = "muon") -> ThresholdAnalysis:
    thresholds = {c.threshold for c in curves.values()}
    if len(thresholds) != 1:
        raise CurveError(f"curves mix thresholds {sorted(thresholds)}")
    analysis = ThresholdAnalysis(threshold=thresholds.pop(), curves=dict(curves))
    for name, curve in curves.items():
        if not curve.reached():
            analysis.notes.append(f"{name}: threshold never reached")
            continue
        analysis.token_optimal[name] = token_optimal_batch(curve, rel_tol)
        analysis.tradeoff[name] = tradeoff_points(curve, cost)
        analysis.frontier[name] = pareto_frontier(analysis.tradeoff[name])
        try:
            fit = fit_piecewise(curve)
        except CurveError as e:
            analysis.notes.append(f"{name}: {e}")
            continue
        analysis.fits[name] = fit
        analysis.slopes[name] = slope_minus_one_check(fit, curve)
        analysis.notes.extend(f"{name}: {w}" for w in fit.warnings)
    if baseline in curves and candidate in curves:
        try:
            analysis.ratio = token_ratio(curves[baseline], curves[candidate])
            analysis.advantage = token_advantage(curves[baseline], curves[candidate])
        except CurveError as e:
            analysis.notes.append(f"ratio: {e}")
    return analysis


def consistency_errors(analysis: ThresholdAnalysis, baseline: str = "adamw", candidate: str = "muon") -> Dict[str, float]:
    """Largest violation of T = B*S and R - 1 = (T_A - T_M) / T_M"""
    token_error = 0.0
    for curve in analysis.curves.values():
        for p in curve.reached():
            token_error = max(token_error, abs(p.tokens - p.batch_size * p.steps) / max(p.tokens, 1.0))
    ratio_error = 0.0
    if analysis.ratio:
        a_curve, m_curve = analysis.curves[baseline], analysis.curves[candidate]
        for r in analysis.ratio:
            t_a = a_curve.point(r.batch_size).tokens
            t_m = m_curve.point(r.batch_size).tokens
            ratio_error = max(ratio_error, abs((r.ratio - 1.0) - (t_a - t_m) / t_m))
    return {"tokens": token_error, "ratio": ratio_error}


# Export

def _number(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_number(v) for v in row])
    return path


def write_curve_csv(path: Union[str, Path], curves: Mapping[str, SweepCurve]) -> Path:
    rows = [(name, p.batch_size, p.steps, p.tokens, "reached" if p.reached else "never_reached")
            for name, curve in sorted(curves.items()) for p in curve.points]
    return _write_rows(path, ("optimizer", "batch_size", "steps", "tokens", "status"), rows)


def write_ratio_csv(path: Union[str, Path], ratio: Sequence[RatioPoint], advantage: Sequence[Tuple[int, float]]) -> Path:
    adv = dict(advantage)
    rows = [(r.batch_size, r.ratio, r.excess, adv.get(r.batch_size)) for r in ratio]
    return _write_rows(path, ("batch_size", "token_ratio", "excess", "token_advantage"), rows)


def write_tradeoff_csv(path: Union[str, Path], analysis: ThresholdAnalysis) -> Path:
    rows = []
    for name in sorted(analysis.tradeoff):
        on_frontier = {p.batch_size for p in analysis.frontier.get(name, [])}
        for p in analysis.tradeoff[name]:
            rows.append((name, p.batch_size, p.devices, p.steps,
                         p.time if p.reached else None, p.compute if p.reached else None,
                         int(p.batch_size in on_frontier)))
    return _write_rows(path, ("optimizer", "batch_size", "devices", "steps", "time", "compute", "frontier"), rows)


def summary_dict(analysis: ThresholdAnalysis) -> dict:
    return {
        "threshold": analysis.threshold,
        "token_optimal_batch": analysis.token_optimal,
        "fits": {name: asdict(fit) for name, fit in analysis.fits.items()},
        "slopes": {name: asdict(report) for name, report in analysis.slopes.items()},
        "frontier": {name: [p.batch_size for p in points] for name, points in analysis.frontier.items()},
        "consistency": consistency_errors(analysis),
        "notes": analysis.notes,
    }


def write_summary_json(path: Union[str, Path], analysis: ThresholdAnalysis) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary_dict(analysis), indent=2, sort_keys=True))
    return path
