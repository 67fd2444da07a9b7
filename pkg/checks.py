"""
Invariant Suites
Property checks behind `main.py check`, each reproducible from its seed, with a JUnit-style XML report
"""
import logging
import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

import batchlab
import matops
import model
import mup
import optim
import telescope

logger = logging.getLogger(__name__)

NS_BAND = (0.68, 1.3)
RMS_BAND = (0.14, 0.26)


@dataclass(frozen=True)
class CaseResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


def conditioned_matrix(rng: np.random.Generator, rows: int, cols: int, cond: float = 10.0) -> np.ndarray:
    """Random matrix with singular values spread log-uniformly over [1, cond]"""
    k = min(rows, cols)
    u, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, k)))
    s = np.sort(np.exp(rng.uniform(0.0, math.log(cond), size=k)))[::-1]
    s[0], s[-1] = cond, 1.0
    return (u * s) @ v.T


def _shapes(rng: np.random.Generator, count: int, max_rows: int, max_cols: int) -> List[Tuple[int, int]]:
    return [(int(rng.integers(2, max_rows + 1)), int(rng.integers(2, max_cols + 1))) for _ in range(count)]


# ns

def check_ns_band(seed: int = 0, count: int = 100) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = (math.inf, -math.inf)
    for rows, cols in _shapes(rng, count, 64, 128):
        lo, hi = matops.singular_value_range(matops.newton_schulz(conditioned_matrix(rng, rows, cols)))
        worst = (min(worst[0], lo), max(worst[1], hi))
    passed = NS_BAND[0] < worst[0] and worst[1] < NS_BAND[1]
    return passed, f"singular values of NS output span [{worst[0]:.4f}, {worst[1]:.4f}], band {NS_BAND} (seed {seed})"


def check_ns_polar(seed: int = 1, count: int = 50) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    cubic = matops.NewtonSchulzConfig(steps=15, coefficients=matops.CUBIC_COEFFICIENTS)
    gap5 = gap15 = 0.0
    for rows, cols in _shapes(rng, count, 16, 32):
        g = conditioned_matrix(rng, rows, cols)
        polar = matops.polar_factor(g)
        norm = math.sqrt(min(rows, cols))
        gap5 = max(gap5, float(np.linalg.norm(matops.newton_schulz(g) - polar)) / norm)
        gap15 = max(gap15, float(np.linalg.norm(matops.newton_schulz(g, cubic) - polar)) / norm)
    return gap5 <= 0.3 and gap15 <= 0.05, f"polar gap {gap5:.4f} at 5 quintic steps, {gap15:.4f} at 15 cubic steps (seed {seed})"


def check_ns_symmetry(seed: int = 2, count: int = 50) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    transpose_gap = scale_gap = 0.0
    for rows, cols in _shapes(rng, count, 24, 24):
        # large norm keeps the eps guard in the normalization negligible
        g = 1e3 * conditioned_matrix(rng, rows, cols)
        out = matops.newton_schulz(g)
        transpose_gap = max(transpose_gap, matops.max_norm(matops.newton_schulz(g.T) - out.T))
        scale_gap = max(scale_gap, matops.max_norm(matops.newton_schulz(10.0 * g) - out))
    return transpose_gap <= 1e-12 and scale_gap <= 1e-9, f"transpose gap {transpose_gap:.2e}, scale gap {scale_gap:.2e} (seed {seed})"


def check_ns_twice(seed: int = 3, count: int = 50) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = (math.inf, -math.inf)
    for rows, cols in _shapes(rng, count, 16, 32):
        twice = matops.newton_schulz(matops.newton_schulz(conditioned_matrix(rng, rows, cols)))
        lo, hi = matops.singular_value_range(twice)
        worst = (min(worst[0], lo), max(worst[1], hi))
    passed = NS_BAND[0] < worst[0] and worst[1] < NS_BAND[1]
    return passed, f"twice-applied NS spans [{worst[0]:.4f}, {worst[1]:.4f}] (seed {seed})"


# reduction

def check_reduction(seed: int = 4, count: int = 100) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rows, cols in _shapes(rng, count, 12, 12):
        g = conditioned_matrix(rng, rows, cols)
        polar = matops.polar_factor(g)
        shampoo = optim.shampoo_point_update(g)
        soap = optim.soap_point_update(g)
        worst = max(worst, matops.max_norm(shampoo - polar), matops.max_norm(soap - polar),
                    matops.max_norm(shampoo - soap))
    return worst <= 1e-8, f"largest pairwise gap {worst:.2e} (seed {seed})"


def check_update_rms(seed: int = 5, count: int = 100) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    lo, hi = math.inf, -math.inf
    for rows, cols in _shapes(rng, count, 64, 128):
        o = matops.newton_schulz(conditioned_matrix(rng, rows, cols))
        update = optim.muon_scale(o.shape, 0.2) * o
        rms = float(np.sqrt(np.mean(update ** 2)))
        lo, hi = min(lo, rms), max(hi, rms)
    return RMS_BAND[0] <= lo and hi <= RMS_BAND[1], f"scaled update RMS spans [{lo:.4f}, {hi:.4f}] (seed {seed})"


# grad

def check_gradients(seed: int = 6, coords: int = 1000) -> Tuple[bool, str]:
    spec = model.MlpSpec(hidden_width=32, depth=3)
    task = model.TaskSpec(noise_std=0.1)
    weights = model.init_weights(spec, seed)
    batch = model.SampleStream(task).next_batch(16)
    results = model.gradient_check(spec, weights, batch, coords=coords, seed=seed)
    worst = max(r.rel_error for r in results)
    return worst <= 1e-4, f"{len(results)} coordinates, worst relative error {worst:.2e} (seed {seed})"


# mup

def check_spectral_spread(seed: int = 7) -> Tuple[bool, str]:
    rows = mup.spectral_check([64, 1024], seed)
    spread = mup.spread(rows, "spectral_ratio")
    worst = max(spread.values())
    return worst <= 4.0, f"spectral ratio spread per layer {spread} (seed {seed})"


def check_coordinate_init(seed: int = 8) -> Tuple[bool, str]:
    rows = mup.coordinate_check([64, 128, 256], steps=0, seed=seed)
    spread = mup.spread(rows, "rms_t0")
    worst = max(spread.values())
    return worst <= 2.0, f"init activation RMS spread per layer {spread} (seed {seed})"


# drift

def _quadratic_loss(x: float, width: float) -> float:
    return (x - 1.0) ** 2 + x / width


def check_drift(seed: int = 9) -> Tuple[bool, str]:
    widths = [64, 128, 256]
    fit = mup.fit_drift(widths, [1.0 - 0.5 / n for n in widths])
    alpha = mup.drift_coefficient(lambda x: (x - 1.0) ** 2, lambda x: x, lambda u: u, 1.0)
    passed = abs(fit.x_star_inf - 1.0) <= 1e-3 and abs(fit.alpha + 0.5) <= 1e-3 and abs(alpha + 0.5) <= 1e-6
    return passed, f"fit x*={fit.x_star_inf:.6f} alpha={fit.alpha:.6f}; analytic alpha={alpha:.8f} (seed {seed})"


def check_drift_consistency(seed: int = 10) -> Tuple[bool, str]:
    widths = [2 ** p for p in range(6, 11)]
    argmins = [mup.minimize_bounded(lambda x, n=n: _quadratic_loss(x, n), 0.0, 2.0, tol=1e-12) for n in widths]
    fitted = mup.fit_drift(widths, argmins).alpha
    analytic = mup.drift_coefficient(lambda x: (x - 1.0) ** 2, lambda x: x, lambda u: u, 1.0)
    return abs(fitted - analytic) <= 0.05 * abs(analytic), f"fitted {fitted:.6f} vs analytic {analytic:.6f} (seed {seed})"


# fit

TOY_BATCHES = [2 ** p for p in range(15, 27)]


def check_piecewise_roundtrip(seed: int = 11) -> Tuple[bool, str]:
    b_star, m, t_star = 2.0 ** 21, -0.5, 1e10
    fit = batchlab.fit_piecewise(batchlab.toy_curve(TOY_BATCHES, b_star, m, t_star))
    b_err = abs(fit.b_star / b_star - 1.0)
    passed = b_err <= 0.05 and abs(fit.m - m) <= 0.01
    return passed, f"B* off by {100 * b_err:.3f}%, m={fit.m:.5f} (seed {seed})"


def check_piecewise_noise(seed: int = 12, seeds: int = 50) -> Tuple[bool, str]:
    worst = 0.0
    for offset in range(seeds):
        curve = batchlab.toy_curve(TOY_BATCHES, 2.0 ** 21, -0.5, 1e10, noise=0.01, seed=seed + offset)
        worst = max(worst, abs(batchlab.fit_piecewise(curve).m + 0.5))
    return worst <= 0.05, f"worst |m + 0.5| over {seeds} noisy curves: {worst:.4f} (seed {seed})"


def check_powerlaw(seed: int = 13) -> Tuple[bool, str]:
    sizes = np.logspace(6, 9, 5)
    fit = telescope.powerlaw_fit(sizes, 10.0 / sizes ** 0.31 + 1.31)
    passed = abs(fit.a / 10.0 - 1.0) <= 0.02 and abs(fit.alpha - 0.31) <= 0.01 and abs(fit.e / 1.31 - 1.0) <= 0.005
    return passed, f"A={fit.a:.4f} alpha={fit.alpha:.5f} E={fit.e:.5f} R2={fit.r_squared:.6f} (seed {seed})"


# frontier

def dominance_frontier(points: Sequence[batchlab.TradeoffPoint]) -> List[batchlab.TradeoffPoint]:
    """Quadratic reference: keep points nothing dominates, first copy of duplicates"""
    keep = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if i == j:
                continue
            better = q.compute <= p.compute and q.time <= p.time
            strict = q.compute < p.compute or q.time < p.time
            if (better and strict) or (q.compute == p.compute and q.time == p.time and j < i):
                dominated = True
                break
        if not dominated:
            keep.append(p)
    return sorted(keep, key=lambda p: (p.compute, p.time))


def check_frontier(seed: int = 14, sets: int = 1000) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for index in range(sets):
        size = int(rng.integers(1, 201))
        # coarse integer grid so ties and duplicates actually occur
        coords = rng.integers(1, 40, size=(size, 2)).astype(np.float64)
        points = [batchlab.TradeoffPoint(i, 1, 1.0, float(t), float(c), True) for i, (c, t) in enumerate(coords)]
        fast = [p.batch_size for p in batchlab.pareto_frontier(points)]
        slow = [p.batch_size for p in dominance_frontier(points)]
        if fast != slow:
            return False, f"set {index} (seed {seed}): sweep {fast} != reference {slow}"
    return True, f"{sets} random point sets agree with the quadratic reference (seed {seed})"


# ledger

@dataclass(frozen=True)
class AnalyticObjective:
    """(x - 1 + shift/n)^2 + (y - 2)^2 + 1/n"""
    shift: float = 0.3

    def __call__(self, width: int, point) -> float:
        x, y = point
        return (x - 1.0 + self.shift / width) ** 2 + (y - 2.0) ** 2 + 1.0 / width


def check_level_costs(seed: int = 15) -> Tuple[bool, str]:
    cfg = telescope.TelescopeConfig(base_width=8, calibration_width=128, final_width=128, points=8,
                                    ranges=((0.0, 2.0), (1.0, 3.0)), names=("x", "y"), steps=10)
    costs = telescope.planned_level_costs(cfg, exact=True)
    spread = max(costs) - min(costs)
    return spread <= 1.0, f"exact level costs {costs} (seed {seed})"


def check_ledger(seed: int = 16) -> Tuple[bool, str]:
    cfg = telescope.TelescopeConfig(base_width=8, calibration_width=128, final_width=128, points=8,
                                    ranges=((0.0, 2.0), (1.0, 3.0)), names=("x", "y"), steps=10)
    result = telescope.run_telescope(cfg, AnalyticObjective())
    spent = 0
    for level in result.levels:
        for _ in level.points:
            spent += level.width * level.width * cfg.steps
    final = cfg.final_width ** 2 * cfg.steps
    baseline = cfg.points ** cfg.k * final
    saved = 100.0 * (1.0 - (spent + final) / (baseline + final))
    on_final = 100.0 * final / (spent + final)
    gap = max(abs(saved - result.ledger.percent_saved), abs(on_final - result.ledger.percent_on_final))
    return gap <= 1e-12, f"saved {result.ledger.percent_saved:.4f}%, on final {result.ledger.percent_on_final:.4f}% (seed {seed})"


def check_telescope_selection(seed: int = 17) -> Tuple[bool, str]:
    cfg = telescope.TelescopeConfig(base_width=64, calibration_width=256, final_width=512, points=8,
                                    ranges=((0.0, 2.0), (1.0, 3.0)), names=("x", "y"), steps=10)
    result = telescope.run_telescope(cfg, AnalyticObjective())
    cell = result.levels[-1].spacing
    target = (1.0 - 0.3 / cfg.calibration_width, 2.0)
    gaps = [abs(s - t) for s, t in zip(result.selected, target)]
    return all(g <= c for g, c in zip(gaps, cell)), f"selected {result.selected}, target {target}, cell {cell} (seed {seed})"


CheckFn = Callable[[], Tuple[bool, str]]

SUITES: Dict[str, List[Tuple[str, CheckFn]]] = {
    "ns": [("band", check_ns_band), ("polar", check_ns_polar), ("symmetry", check_ns_symmetry),
           ("twice", check_ns_twice)],
    "reduction": [("equivalence", check_reduction), ("update_rms", check_update_rms)],
    "grad": [("finite_differences", check_gradients)],
    "mup": [("spectral", check_spectral_spread), ("coordinates", check_coordinate_init)],
    "drift": [("quadratic", check_drift), ("consistency", check_drift_consistency)],
    "fit": [("piecewise", check_piecewise_roundtrip), ("piecewise_noise", check_piecewise_noise),
            ("powerlaw", check_powerlaw)],
    "frontier": [("dominance", check_frontier)],
    "ledger": [("level_costs", check_level_costs), ("ledger", check_ledger),
               ("selection", check_telescope_selection)],
}


def run_suites(names: Sequence[str]) -> List[CaseResult]:
    """Run suites in the given order; 'all' expands to every suite"""
    if "all" in names:
        names = list(SUITES)
    results = []
    for suite in names:
        if suite not in SUITES:
            raise KeyError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)} or all")
        for name, fn in SUITES[suite]:
            started = time.perf_counter()
            try:
                passed, detail = fn()
            except Exception as e:  # a crashing check is a failed check
                passed, detail = False, f"{type(e).__name__}: {e}"
            seconds = time.perf_counter() - started
            results.append(CaseResult(suite, name, passed, detail, seconds))
            log = logger.info if passed else logger.warning
            log("%s %s.%s (%.2fs): %s", "PASS" if passed else "FAIL", suite, name, seconds, detail)
    return results


def write_junit(path: Union[str, Path], results: Sequence[CaseResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = ET.Element("testsuites")
    for suite in dict.fromkeys(r.suite for r in results):
        cases = [r for r in results if r.suite == suite]
        node = ET.SubElement(root, "testsuite", name=suite, tests=str(len(cases)),
                             failures=str(sum(not r.passed for r in cases)))
        for r in cases:
            case = ET.SubElement(node, "testcase", classname=f"muonbench.{suite}", name=r.name,
                                 time=f"{r.seconds:.3f}")
            if r.passed:
                ET.SubElement(case, "system-out").text = r.detail
            else:
                ET.SubElement(case, "failure", message=r.detail)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    return path
