"""
Optimizer Kernels
Muon, AdamW, point-estimate Shampoo/Soap, the warmup-cosine schedule and parameter labeling
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from matops import Matrix, MatrixError, NewtonSchulzConfig, as_matrix, newton_schulz, read_matrix, svd, write_matrix

logger = logging.getLogger(__name__)

ADAM_MARKERS = ("norm", "logits", "embedding")
RANK_TOL = 1e-10


class ShapeMismatchError(MatrixError):
    """Raised when a parameter, gradient and state disagree on shape"""


class RankDeficientError(MatrixError):
    """Raised when a point-estimate preconditioner needs a full-rank gradient"""

    def __init__(self, singular_value: float, largest: float):
        self.singular_value = singular_value
        self.largest = largest
        super().__init__(
            f"gradient is rank deficient: singular value {singular_value:.3e} "
            f"is below {RANK_TOL:g} x largest ({largest:.3e})"
        )


class ScheduleError(ValueError):
    """Raised for invalid schedules or out-of-range steps"""


@dataclass(frozen=True)
class MuonHyper:
    """Muon hyperparameters"""
    momentum: float = 0.95
    weight_decay: float = 0.0
    base_scale: float = 0.2
    nesterov: bool = True
    ns_config: NewtonSchulzConfig = field(default_factory=NewtonSchulzConfig)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.base_scale < 0:
            raise ValueError(f"base_scale must be >= 0, got {self.base_scale}")


@dataclass(frozen=True)
class MuonState:
    """The only state Muon keeps: the first moment"""
    first_moment: Matrix

    @classmethod
    def zeros_like(cls, w: Matrix) -> "MuonState":
        return cls(first_moment=np.zeros_like(as_matrix(w)))


@dataclass(frozen=True)
class AdamHyper:
    """AdamW hyperparameters"""
    beta1: float = 0.95
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class AdamState:
    """First moment, elementwise second moment and step count"""
    m: Matrix
    v: Matrix
    step: int = 0

    @classmethod
    def zeros_like(cls, w: Matrix) -> "AdamState":
        w = as_matrix(w)
        return cls(m=np.zeros_like(w), v=np.zeros_like(w), step=0)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup followed by cosine decay to final_fraction of max_lr"""
    max_lr: float
    warmup_steps: int
    total_steps: int
    final_fraction: float = 0.1

    def __post_init__(self):
        if not self.max_lr >= 0:
            raise ScheduleError(f"max_lr must be >= 0, got {self.max_lr}")
        if self.warmup_steps < 0:
            raise ScheduleError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.total_steps <= self.warmup_steps:
            raise ScheduleError(
                f"total_steps ({self.total_steps}) must exceed warmup_steps ({self.warmup_steps})"
            )
        if not 0.0 <= self.final_fraction <= 1.0:
            raise ScheduleError(f"final_fraction must lie in [0, 1], got {self.final_fraction}")


def schedule_lr(sched: LrSchedule, step: int) -> float:
    """Learning rate at a given step"""
    if not 0 <= step <= sched.total_steps:
        raise ScheduleError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.max_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return sched.max_lr * (sched.final_fraction + (1.0 - sched.final_fraction) * cosine)


def label_for(path: Union[str, Sequence[str]]) -> str:
    """'adam' for normalization, embedding and logits parameters, 'muon' otherwise"""
    parts = path.split("/") if isinstance(path, str) else list(path)
    if any(marker in part.lower() for part in parts for marker in ADAM_MARKERS):
        return "adam"
    return "muon"


def label_params(paths: Iterable[str]) -> Dict[str, str]:
    return {path: label_for(path) for path in paths}


def _check_pair(w, g) -> Tuple[Matrix, Matrix]:
    w = as_matrix(w, "parameter")
    try:
        g = as_matrix(g, "gradient")
    except MatrixError as e:
        raise MatrixError(f"invalid gradient: {e}") from e
    if w.shape != g.shape:
        raise ShapeMismatchError(f"parameter shape {w.shape} != gradient shape {g.shape}")
    return w, g


def muon_scale(shape: Tuple[int, int], base_scale: float) -> float:
    """RMS-matching factor base_scale * sqrt(max(rows, cols)); 1 when disabled"""
    return base_scale * math.sqrt(max(shape)) if base_scale > 0 else 1.0


def muon_update(
    w,
    g,
    state: MuonState,
    hyper: MuonHyper,
    lr: float,
    orthogonalize: Optional[Callable[[Matrix], Matrix]] = None,
) -> Tuple[Matrix, MuonState]:
    """One Muon step with coupled weight decay"""
    w, g = _check_pair(w, g)
    if state.first_moment.shape != w.shape:
        raise ShapeMismatchError(f"state shape {state.first_moment.shape} != parameter shape {w.shape}")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")

    moment = g + hyper.momentum * state.first_moment
    direction = g + hyper.momentum * moment if hyper.nesterov else moment
    if orthogonalize is None:
        ortho = newton_schulz(direction, hyper.ns_config)
    else:
        ortho = orthogonalize(direction)
    scale = muon_scale(w.shape, hyper.base_scale)
    new_w = w - lr * (scale * ortho + hyper.weight_decay * w)
    return new_w, MuonState(first_moment=moment)


def adamw_update(w, g, state: AdamState, hyper: AdamHyper, lr: float) -> Tuple[Matrix, AdamState]:
    """Bias-corrected AdamW step with the decay term inside the lr multiplier"""
    w, g = _check_pair(w, g)
    if state.m.shape != w.shape or state.v.shape != w.shape:
        raise ShapeMismatchError(f"state shape {state.m.shape} != parameter shape {w.shape}")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")

    step = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * g * g
    m_hat = m / (1.0 - hyper.beta1 ** step)
    v_hat = v / (1.0 - hyper.beta2 ** step)
    new_w = w - lr * (m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * w)
    return new_w, AdamState(m=m, v=v, step=step)


def _full_rank_svd(g: Matrix):
    r = svd(g)
    largest = float(r.s[0])
    smallest = float(r.s[-1])
    if largest == 0.0 or smallest <= RANK_TOL * largest:
        raise RankDeficientError(smallest, largest)
    return r


def shampoo_point_update(g) -> Matrix:
    """(G G^T)^(-1/4) G (G^T G)^(-1/4) with point-estimate preconditioners"""
    g = as_matrix(g, "gradient")
    r = _full_rank_svd(g)
    inv_root = r.s ** -0.5
    left = (r.u * inv_root) @ r.u.T
    right = (r.v * inv_root) @ r.v.T
    return left @ g @ right


def soap_point_update(g) -> Matrix:
    """Adam run in the eigenbasis of point-estimate Shampoo preconditioners"""
    g = as_matrix(g, "gradient")
    transposed = g.shape[0] > g.shape[1]
    if transposed:
        g = g.T
    r = _full_rank_svd(g)
    rotated = r.u.T @ g @ r.v
    # Off-diagonal entries are rounding noise; the point estimate is diagonal.
    rotated = np.where(np.abs(rotated) > RANK_TOL * r.s[0], rotated, 0.0)
    first = rotated
    second = rotated * rotated
    safe = np.where(second > 0, second, 1.0)
    step = np.where(second > 0, first / np.sqrt(safe), 0.0)
    out = r.u @ step @ r.v.T
    return out.T if transposed else out


# Checkpoints

def save_checkpoint(directory: Union[str, Path], states: Dict[str, object], extra: Optional[dict] = None) -> Path:
    """Write each state's matrices in the binary matrix format plus manifest.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, (path, state) in enumerate(sorted(states.items())):
        stem = f"param{index:03d}"
        if isinstance(state, MuonState):
            write_matrix(directory / f"{stem}.m.bin", state.first_moment)
            entries.append({"path": path, "kind": "muon", "files": {"first_moment": f"{stem}.m.bin"}})
        elif isinstance(state, AdamState):
            write_matrix(directory / f"{stem}.m.bin", state.m)
            write_matrix(directory / f"{stem}.v.bin", state.v)
            entries.append({
                "path": path,
                "kind": "adam",
                "step": state.step,
                "files": {"m": f"{stem}.m.bin", "v": f"{stem}.v.bin"},
            })
        else:
            raise TypeError(f"unsupported optimizer state for {path}: {type(state).__name__}")
    manifest = {"params": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.debug("saved %d optimizer states to %s", len(entries), directory)
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Dict[str, object]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    states: Dict[str, object] = {}
    for entry in manifest["params"]:
        files = entry["files"]
        if entry["kind"] == "muon":
            states[entry["path"]] = MuonState(first_moment=read_matrix(directory / files["first_moment"]))
        else:
            states[entry["path"]] = AdamState(
                m=read_matrix(directory / files["m"]),
                v=read_matrix(directory / files["v"]),
                step=int(entry["step"]),
            )
    return states
