"""
Workspace
Content-addressed run persistence: JSONL loss traces with JSON manifests under runs/, outputs under analysis/
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from model import LossTrace, RunConfig, Trainer
from workers import run_pool

logger = logging.getLogger(__name__)

ENV_VAR = "MUONBENCH_WORKSPACE"
DEFAULT_ROOT = "workspace"


def config_hash(config) -> str:
    """Run id: sha256 of the canonical JSON of a config dataclass, 16 hex digits"""
    canonical = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class WorkspaceLayout:
    root: Path

    @classmethod
    def resolve(cls, flag: Optional[str] = None) -> "WorkspaceLayout":
        """--workspace, else $MUONBENCH_WORKSPACE, else ./workspace"""
        return cls(Path(flag or os.environ.get(ENV_VAR) or DEFAULT_ROOT))

    @property
    def runs(self) -> Path:
        return self.root / "runs"

    @property
    def analysis(self) -> Path:
        return self.root / "analysis"

    @property
    def configs(self) -> Path:
        return self.root / "configs"

    def ensure(self) -> "WorkspaceLayout":
        for directory in (self.runs, self.analysis, self.configs):
            directory.mkdir(parents=True, exist_ok=True)
        return self

    def trace_path(self, run_id: str) -> Path:
        return self.runs / f"{run_id}.jsonl"

    def manifest_path(self, run_id: str) -> Path:
        return self.runs / f"{run_id}.json"

    def checkpoint_dir(self, run_id: str) -> Path:
        return self.runs / f"{run_id}.ckpt"


@dataclass
class RunRecord:
    run_id: str
    trace: LossTrace
    wall_time: float
    cached: bool = False


def write_trace(path: Union[str, Path], trace: LossTrace) -> None:
    lines = [json.dumps(record, sort_keys=True) for record in trace.to_records()]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_trace(path: Union[str, Path], manifest: dict) -> LossTrace:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return LossTrace.from_records(
        records,
        batch_size=manifest["batch_size"],
        tokens_per_sample=manifest["tokens_per_sample"],
        diverged=manifest["diverged"],
        diverged_at=manifest["diverged_at"],
    )


def _execute(config: RunConfig):
    trainer = Trainer(config)
    trace = trainer.run()
    return trace, trainer.wall_time


class RunStore:
    """Cache of finished runs keyed by config hash"""

    def __init__(self, layout: WorkspaceLayout):
        self.layout = layout.ensure()

    def lookup(self, config: RunConfig) -> Optional[RunRecord]:
        run_id = config_hash(config)
        manifest_path = self.layout.manifest_path(run_id)
        trace_path = self.layout.trace_path(run_id)
        if not (manifest_path.exists() and trace_path.exists()):
            return None
        manifest = json.loads(manifest_path.read_text())
        return RunRecord(run_id, read_trace(trace_path, manifest), manifest["wall_time"], cached=True)

    def save(self, config: RunConfig, trace: LossTrace, wall_time: float) -> RunRecord:
        run_id = config_hash(config)
        write_trace(self.layout.trace_path(run_id), trace)
        manifest = {
            "run_id": run_id,
            "config": asdict(config),
            "seeds": {
                "run_seed": config.run_seed,
                "teacher_seed": config.task.teacher_seed,
                "data_seed": config.task.data_seed,
            },
            "batch_size": trace.batch_size,
            "tokens_per_sample": trace.tokens_per_sample,
            "samples": len(trace.samples),
            "diverged": trace.diverged,
            "diverged_at": trace.diverged_at,
            "wall_time": wall_time,
        }
        # manifest last: its presence marks a complete run
        self.layout.manifest_path(run_id).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.debug("saved run %s (%d samples)", run_id, len(trace.samples))
        return RunRecord(run_id, trace, wall_time)

    def run_many(self, configs: Sequence[RunConfig], jobs: int = 1, force: bool = False) -> List[object]:
        """Records in input order; a failed run leaves its exception in its slot"""
        ids = [config_hash(c) for c in configs]
        results: Dict[str, object] = {}
        pending: Dict[str, RunConfig] = {}
        for run_id, config in zip(ids, configs):
            if run_id in results or run_id in pending:
                continue
            cached = None if force else self.lookup(config)
            if cached is not None:
                results[run_id] = cached
            else:
                pending[run_id] = config
        if pending:
            logger.info("training %d runs (%d cached)", len(pending), len(results))
        outcomes = run_pool(_execute, list(pending.values()), jobs, return_exceptions=True)
        for (run_id, config), outcome in zip(pending.items(), outcomes):
            if isinstance(outcome, Exception):
                logger.warning("run %s failed: %s", run_id, outcome)
                results[run_id] = outcome
                continue
            trace, wall_time = outcome
            results[run_id] = self.save(config, trace, wall_time)
        return [results[run_id] for run_id in ids]
