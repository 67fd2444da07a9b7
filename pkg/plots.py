"""
Plot Emission
Deterministic SVG renderings of sweep curves, compute-time frontiers and telescope loss distributions
"""
import logging
import math
from pathlib import Path
from typing import Mapping, Optional, Union

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    PLOTTING_AVAILABLE = True
    IMPORT_ERROR = ""
except ImportError as e:
    PLOTTING_AVAILABLE = False
    plt = None
    IMPORT_ERROR = str(e)

logger = logging.getLogger(__name__)

# fixed salt and no timestamp so identical inputs give identical bytes
SVG_RC = {"svg.hashsalt": "muonbench", "svg.fonttype": "none"}


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _unavailable(what: str) -> None:
    logger.warning("skipping %s plot: matplotlib is not installed (%s)", what, IMPORT_ERROR)


def plot_sweep_curves(path: Union[str, Path], curves: Mapping[str, object]) -> Optional[Path]:
    """Log-log steps-to-loss and tokens-to-loss against batch size"""
    if not PLOTTING_AVAILABLE:
        return _unavailable("sweep curve")
    with plt.rc_context(SVG_RC):
        fig, (ax_steps, ax_tokens) = plt.subplots(1, 2, figsize=(10, 4))
        threshold = None
        for name in sorted(curves):
            curve = curves[name]
            threshold = curve.threshold
            reached = curve.reached()
            sizes = [p.batch_size for p in reached]
            ax_steps.plot(sizes, [p.steps for p in reached], marker="o", label=name)
            ax_tokens.plot(sizes, [p.tokens for p in reached], marker="o", label=name)
        for ax, label in ((ax_steps, "steps to loss"), (ax_tokens, "tokens to loss")):
            ax.set_xscale("log", base=2)
            ax.set_yscale("log")
            ax.set_xlabel("batch size (samples)")
            ax.set_ylabel(label)
            ax.legend()
        fig.suptitle(f"L = {threshold:g}")
        fig.tight_layout()
        return _save(fig, path)


def plot_frontier(path: Union[str, Path], analysis) -> Optional[Path]:
    """Compute-time plane with every reached point and the Pareto frontier per optimizer"""
    if not PLOTTING_AVAILABLE:
        return _unavailable("frontier")
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for name in sorted(analysis.tradeoff):
            points = [p for p in analysis.tradeoff[name] if p.reached]
            scatter = ax.scatter([p.time for p in points], [p.compute for p in points], s=14, label=name)
            frontier = analysis.frontier.get(name, [])
            ax.plot([p.time for p in frontier], [p.compute for p in frontier], color=scatter.get_facecolor()[0])
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("time to loss (time units)")
        ax.set_ylabel("compute (device-hours)")
        ax.set_title(f"iso-loss L = {analysis.threshold:g}")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_telescope(path: Union[str, Path], result, final_width: int) -> Optional[Path]:
    """Loss of every evaluated grid point, grouped by level width"""
    if not PLOTTING_AVAILABLE:
        return _unavailable("telescope")
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for index, level in enumerate(result.levels):
            losses = [loss for loss in level.losses if math.isfinite(loss)]
            ax.scatter([level.width] * len(losses), losses, s=10, label=f"level {index}")
        if result.final_loss is not None and math.isfinite(result.final_loss):
            ax.scatter([final_width], [result.final_loss], marker="*", s=80, color="black", label="final")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("width")
        ax.set_ylabel("final smoothed loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
