"""
Training Substrate
Hand-backpropagated tanh MLP on a deterministic teacher-student regression stream, producing loss traces
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import mup
from matops import Matrix, MatrixError, write_matrix
from optim import (
    AdamHyper,
    AdamState,
    LrSchedule,
    MuonHyper,
    MuonState,
    adamw_update,
    label_for,
    muon_update,
    save_checkpoint,
    schedule_lr,
)

logger = logging.getLogger(__name__)

EMA_COEFF = 0.95
OPTIMIZERS = ("muon", "adamw")
EVAL_MODES = ("fresh", "fixed")
GRAD_CHECK_FLOOR = 1e-5
TEACHER_RATIO = 4


class DivergenceError(RuntimeError):
    """Raised when the loss or an activation stops being finite"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(message if step is None else f"{message} at step {step}")


@dataclass(frozen=True)
class MlpSpec:
    """Student network shape and parameterization"""
    input_dim: int = 16
    output_dim: int = 4
    hidden_width: int = 64
    depth: int = 2
    activation: str = "tanh"
    mup_enabled: bool = True

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_width", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_names(self) -> List[str]:
        return ["input"] + [f"hidden_{i}" for i in range(1, self.depth)] + ["logits"]

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_out, fan_in) of every weight matrix"""
        n = self.hidden_width
        return [(n, self.input_dim)] + [(n, n)] * (self.depth - 1) + [(self.output_dim, n)]

    def layer_classes(self) -> List[str]:
        return ["input"] + ["hidden"] * (self.depth - 1) + ["output"]

    def scalings(self) -> List[mup.MupScaling]:
        rule = mup.scaling_for if self.mup_enabled else mup.standard_scaling
        return [rule(cls, fan_in, fan_out)
                for cls, (fan_out, fan_in) in zip(self.layer_classes(), self.layer_shapes())]

    def parameter_count(self) -> int:
        return sum(r * c for r, c in self.layer_shapes())


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic teacher-student regression task; one sample counts as tokens_per_sample tokens

    The default teacher is TEACHER_RATIO times the default student width; sweeps over
    wider students widen it with with_teacher_for.
    """
    input_dim: int = 16
    output_dim: int = 4
    teacher_width: int = 256
    teacher_depth: int = 2
    teacher_seed: int = 0
    data_seed: int = 1
    noise_std: float = 0.0
    tokens_per_sample: int = 1

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.tokens_per_sample < 1:
            raise ValueError(f"tokens_per_sample must be >= 1, got {self.tokens_per_sample}")

    def teacher_spec(self) -> MlpSpec:
        return MlpSpec(
            input_dim=self.input_dim,
            output_dim=self.output_dim,
            hidden_width=self.teacher_width,
            depth=self.teacher_depth,
            mup_enabled=False,
        )


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one training run"""
    spec: MlpSpec = field(default_factory=MlpSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    optimizer: str = "adamw"
    muon: MuonHyper = field(default_factory=MuonHyper)
    adam: AdamHyper = field(default_factory=AdamHyper)
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(max_lr=0.01, warmup_steps=10, total_steps=200))
    batch_size: int = 32
    total_steps: int = 200
    eval_every: int = 10
    run_seed: int = 0
    eval_batch: str = "fresh"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eval_batch not in EVAL_MODES:
            raise ValueError(f"eval_batch must be one of {EVAL_MODES}, got {self.eval_batch!r}")
        if (self.spec.input_dim, self.spec.output_dim) != (self.task.input_dim, self.task.output_dim):
            raise ValueError("spec and task disagree on input/output dims")
        if self.total_steps > 0 and self.schedule.total_steps != self.total_steps:
            raise ValueError(
                f"schedule.total_steps ({self.schedule.total_steps}) != total_steps ({self.total_steps})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def default_run_config(**overrides) -> RunConfig:
    return replace(RunConfig(), **overrides)


def with_steps(config: RunConfig, total_steps: int) -> RunConfig:
    """Same run with a new length; warmup is kept when it still fits"""
    if total_steps == 0:
        return replace(config, total_steps=0)
    warmup = min(config.schedule.warmup_steps, total_steps - 1)
    schedule = replace(config.schedule, warmup_steps=warmup, total_steps=total_steps)
    return replace(config, total_steps=total_steps, schedule=schedule)


def with_lr(config: RunConfig, lr: float) -> RunConfig:
    return replace(config, schedule=replace(config.schedule, max_lr=lr))


def with_weight_decay(config: RunConfig, weight_decay: float) -> RunConfig:
    return replace(
        config,
        muon=replace(config.muon, weight_decay=weight_decay),
        adam=replace(config.adam, weight_decay=weight_decay),
    )


def with_teacher_for(config: RunConfig, widths: Sequence[int]) -> RunConfig:
    """Widen the teacher to TEACHER_RATIO times the widest student it has to serve"""
    width = max(config.task.teacher_width, TEACHER_RATIO * max(widths))
    return replace(config, task=replace(config.task, teacher_width=width))


# Loss traces

@dataclass(frozen=True)
class TraceSample:
    step: int
    tokens: int
    raw_loss: float
    smoothed_loss: float


@dataclass
class LossTrace:
    """Sampled losses of one run with EMA smoothing"""
    batch_size: int
    tokens_per_sample: int = 1
    samples: List[TraceSample] = field(default_factory=list)
    diverged: bool = False
    diverged_at: Optional[int] = None

    def append(self, step: int, raw_loss: float) -> TraceSample:
        if self.samples and step <= self.samples[-1].step:
            raise ValueError(f"trace steps must increase, got {step} after {self.samples[-1].step}")
        if self.samples:
            smoothed = EMA_COEFF * self.samples[-1].smoothed_loss + (1.0 - EMA_COEFF) * raw_loss
        else:
            smoothed = raw_loss
        sample = TraceSample(
            step=step,
            tokens=step * self.batch_size * self.tokens_per_sample,
            raw_loss=float(raw_loss),
            smoothed_loss=float(smoothed),
        )
        self.samples.append(sample)
        return sample

    @property
    def final_loss(self) -> float:
        return self.samples[-1].smoothed_loss if self.samples else float("nan")

    @property
    def min_loss(self) -> float:
        return min(s.smoothed_loss for s in self.samples) if self.samples else float("nan")

    def to_records(self) -> List[dict]:
        return [{"step": s.step, "tokens": s.tokens, "raw": s.raw_loss, "smoothed": s.smoothed_loss}
                for s in self.samples]

    @classmethod
    def from_records(cls, records: Sequence[dict], batch_size: int, tokens_per_sample: int = 1,
                     diverged: bool = False, diverged_at: Optional[int] = None) -> "LossTrace":
        samples = [TraceSample(int(r["step"]), int(r["tokens"]), float(r["raw"]), float(r["smoothed"]))
                   for r in records]
        return cls(batch_size, tokens_per_sample, samples, diverged, diverged_at)


# Data

def init_weights(spec: MlpSpec, seed) -> List[Matrix]:
    """Gaussian init with the variance b(n) of each layer's scaling"""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(shape) * math.sqrt(s.init_variance)
            for shape, s in zip(spec.layer_shapes(), spec.scalings())]


def init_teacher(task: TaskSpec) -> List[Matrix]:
    """Teacher weights; the input layer has unit variance so first-layer preactivations are O(1)"""
    spec = task.teacher_spec()
    rng = np.random.default_rng(task.teacher_seed)
    weights = []
    for index, (fan_out, fan_in) in enumerate(spec.layer_shapes()):
        variance = 1.0 if index == 0 else 1.0 / fan_in
        weights.append(rng.standard_normal((fan_out, fan_in)) * math.sqrt(variance))
    return weights


def _predict(weights: Sequence[Matrix], multipliers: Sequence[float], x: np.ndarray) -> List[np.ndarray]:
    activations = [x]
    h = x
    last = len(weights) - 1
    for index, (w, a) in enumerate(zip(weights, multipliers)):
        z = a * (h @ w.T)
        h = z if index == last else np.tanh(z)
        activations.append(h)
    return activations


class SampleStream:
    """Never-epoched stream of fresh (x, teacher(x) + noise) batches"""

    def __init__(self, task: TaskSpec, teacher: Optional[List[Matrix]] = None, seed=None):
        self.task = task
        self.teacher = teacher if teacher is not None else init_teacher(task)
        self.rng = np.random.default_rng(task.data_seed if seed is None else seed)
        self.drawn = 0

    def next_batch(self, size: int) -> Batch:
        x = self.rng.standard_normal((size, self.task.input_dim)) / math.sqrt(self.task.input_dim)
        y = _predict(self.teacher, [1.0] * len(self.teacher), x)[-1]
        if self.task.noise_std > 0:
            y = y + self.task.noise_std * self.rng.standard_normal(y.shape)
        self.drawn += size
        return Batch(x=x, y=y)


def held_out_batch(task: TaskSpec, seed: int, size: int = 256) -> Batch:
    """Held-out batch from a stream independent of the training stream"""
    return SampleStream(task, seed=(task.data_seed, 7919, seed)).next_batch(size)


def teacher_as_weights(task: TaskSpec, spec: MlpSpec) -> List[Matrix]:
    """Teacher weights expressed in the student's parameterization"""
    teacher_spec = task.teacher_spec()
    if spec.layer_shapes() != teacher_spec.layer_shapes():
        raise ValueError("student shape does not match the teacher")
    return [w / s.multiplier for w, s in zip(init_teacher(task), spec.scalings())]


# Forward / backward

def forward(spec: MlpSpec, weights: Sequence[Matrix], batch: Batch,
            step: Optional[int] = None) -> Tuple[List[np.ndarray], float]:
    """Activations (input first, prediction last) and the MSE loss"""
    _check_weights(spec, weights)
    multipliers = [s.multiplier for s in spec.scalings()]
    with np.errstate(over="ignore", invalid="ignore"):
        activations = _predict(weights, multipliers, batch.x)
        loss = float(np.mean((activations[-1] - batch.y) ** 2))
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss", step)
    return activations, loss


def backward(spec: MlpSpec, weights: Sequence[Matrix], activations: Sequence[np.ndarray],
             batch: Batch) -> List[Matrix]:
    """Exact gradients of the MSE loss with respect to every weight matrix"""
    _check_weights(spec, weights)
    if len(activations) != len(weights) + 1 or activations[-1].shape != batch.y.shape:
        raise MatrixError("activations do not match the weights and batch")
    multipliers = [s.multiplier for s in spec.scalings()]
    grads: List[Optional[Matrix]] = [None] * len(weights)
    delta = 2.0 * (activations[-1] - batch.y) / batch.y.size
    for index in range(len(weights) - 1, -1, -1):
        a = multipliers[index]
        grads[index] = a * (delta.T @ activations[index])
        if index > 0:
            upstream = a * (delta @ weights[index])
            delta = upstream * (1.0 - activations[index] ** 2)
    return grads


def _check_weights(spec: MlpSpec, weights: Sequence[Matrix]) -> None:
    shapes = [tuple(w.shape) for w in weights]
    if shapes != spec.layer_shapes():
        raise MatrixError(f"weight shapes {shapes} do not match spec {spec.layer_shapes()}")


def activation_rms(spec: MlpSpec, weights: Sequence[Matrix], batch: Batch) -> Dict[str, float]:
    """RMS of every hidden activation, keyed by the producing layer"""
    activations, _ = forward(spec, weights, batch)
    names = spec.layer_names()[:-1]
    return {name: float(np.sqrt(np.mean(h ** 2))) for name, h in zip(names, activations[1:-1])}


@dataclass(frozen=True)
class GradCheck:
    layer: str
    row: int
    col: int
    analytic: float
    numeric: float
    rel_error: float


def gradient_check(spec: MlpSpec, weights: Sequence[Matrix], batch: Batch, coords: int = 100,
                   seed: int = 0, h: float = 1e-6) -> List[GradCheck]:
    """Compare analytic gradients with central differences at random coordinates"""
    weights = [w.copy() for w in weights]
    activations, _ = forward(spec, weights, batch)
    grads = backward(spec, weights, activations, batch)
    rng = np.random.default_rng(seed)
    sizes = np.array([w.size for w in weights], dtype=np.float64)
    names = spec.layer_names()
    results = []
    for _ in range(coords):
        layer = int(rng.choice(len(weights), p=sizes / sizes.sum()))
        row = int(rng.integers(weights[layer].shape[0]))
        col = int(rng.integers(weights[layer].shape[1]))
        original = weights[layer][row, col]
        weights[layer][row, col] = original + h
        plus = forward(spec, weights, batch)[1]
        weights[layer][row, col] = original - h
        minus = forward(spec, weights, batch)[1]
        weights[layer][row, col] = original
        numeric = (plus - minus) / (2.0 * h)
        analytic = float(grads[layer][row, col])
        denom = max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)
        results.append(GradCheck(names[layer], row, col, analytic, numeric, abs(analytic - numeric) / denom))
    return results


# Training

class Trainer:
    """Runs one configuration, holding weights and optimizer states"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.spec = config.spec
        self.weights = init_weights(config.spec, config.run_seed)
        self.names = config.spec.layer_names()
        self.lr_scales = [s.lr_scale for s in config.spec.scalings()]
        self.labels = {name: self._label(name) for name in self.names}
        self.states = {
            name: MuonState.zeros_like(w) if self.labels[name] == "muon" else AdamState.zeros_like(w)
            for name, w in zip(self.names, self.weights)
        }
        self.stream = SampleStream(config.task)
        self.eval_fixed = held_out_batch(config.task, 0, config.batch_size) if config.eval_batch == "fixed" else None
        self.wall_time = 0.0

    def _label(self, name: str) -> str:
        if self.config.optimizer == "adamw":
            return "adam"
        return label_for(name)

    def _eval_loss(self, batch: Batch, step: int) -> Tuple[List[np.ndarray], float]:
        activations, loss = forward(self.spec, self.weights, batch, step)
        if self.eval_fixed is not None:
            loss = forward(self.spec, self.weights, self.eval_fixed, step)[1]
        return activations, loss

    def _apply(self, grads: List[Matrix], lr: float) -> None:
        config = self.config
        for index, name in enumerate(self.names):
            layer_lr = lr * self.lr_scales[index]
            state = self.states[name]
            if isinstance(state, MuonState):
                self.weights[index], self.states[name] = muon_update(
                    self.weights[index], grads[index], state, config.muon, layer_lr)
            else:
                self.weights[index], self.states[name] = adamw_update(
                    self.weights[index], grads[index], state, config.adam, layer_lr)

    def run(self) -> LossTrace:
        config = self.config
        trace = LossTrace(batch_size=config.batch_size, tokens_per_sample=config.task.tokens_per_sample)
        started = time.perf_counter()
        step = 0
        try:
            for step in range(config.total_steps + 1):
                batch = self.stream.next_batch(config.batch_size)
                activations, loss = self._eval_loss(batch, step)
                if step % config.eval_every == 0 or step == config.total_steps:
                    trace.append(step, loss)
                if step == config.total_steps:
                    break
                grads = backward(self.spec, self.weights, activations, batch)
                self._apply(grads, schedule_lr(config.schedule, step))
        except (DivergenceError, MatrixError) as e:
            trace.diverged = True
            trace.diverged_at = step
            logger.warning("run diverged at step %d: %s", step, e)
        self.wall_time = time.perf_counter() - started
        return trace

    def save(self, directory) -> Path:
        """Write final weights and optimizer states next to each other"""
        directory = Path(directory)
        save_checkpoint(directory / "optimizer", self.states, extra={"optimizer": self.config.optimizer})
        for name, w in zip(self.names, self.weights):
            write_matrix(directory / f"{name}.bin", w)
        return directory


def train(config: RunConfig) -> LossTrace:
    """Train one configuration and return its loss trace"""
    return Trainer(config).run()
