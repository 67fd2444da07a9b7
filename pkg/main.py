"""
muonbench - Main Application
Command-line front end: train single runs, sweep batch sizes, run telescoping sweeps and invariant checks
"""
import argparse
import logging
import math
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import batchlab
import checks
import plots
from batchlab import UnreachableThresholdError
from config import ConfigError, load_run_config, load_sweep_config, load_telescope_job
from model import DivergenceError, LossTrace, Trainer
from telescope import TrainingObjective, powerlaw_fit, run_telescope, write_levels, write_loss_distribution_csv
from workers import default_jobs
from workspace import RunStore, WorkspaceLayout, config_hash

logger = logging.getLogger("muonbench")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_UNREACHABLE = 4


class BenchApp:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.layout = WorkspaceLayout.resolve(args.workspace)
        self.jobs = args.jobs or default_jobs()
        self.store = RunStore(self.layout)

    def with_seed(self, config):
        """Apply --seed-override to a run config"""
        if self.args.seed_override is None:
            return config
        return replace(config, run_seed=self.args.seed_override)

    def cmd_train(self) -> int:
        """Handle the train command"""
        config = self.with_seed(load_run_config(self.args.config))
        run_id = config_hash(config)
        cached = None if self.args.force else self.store.lookup(config)
        if cached is not None:
            print(f"{run_id} (cached)")
            trace = cached.trace
        else:
            logger.info("training run %s: %s, B=%d, %d steps",
                        run_id, config.optimizer, config.batch_size, config.total_steps)
            trainer = Trainer(config)
            trace = trainer.run()
            self.store.save(config, trace, trainer.wall_time)
            if self.args.checkpoint:
                path = trainer.save(self.layout.checkpoint_dir(run_id))
                logger.info("checkpoint written to %s", path)
            print(run_id)
        if trace.diverged:
            raise DivergenceError(f"run {run_id} diverged; partial trace kept", trace.diverged_at)
        logger.info("final smoothed loss %.6g", trace.final_loss)
        return EXIT_OK

    def cmd_sweep_batch(self) -> int:
        """Handle the sweep-batch command"""
        sweep = load_sweep_config(self.args.config)
        base = self.with_seed(sweep.base)
        cells = []
        for optimizer in sweep.optimizers:
            for batch_size in sweep.batch_sizes:
                config = replace(base, optimizer=optimizer, batch_size=batch_size)
                if optimizer in sweep.learning_rates:
                    config = replace(config, schedule=replace(config.schedule, max_lr=sweep.learning_rates[optimizer]))
                cells.append(config)
        logger.info("sweep: %d optimizers x %d batch sizes = %d runs", len(sweep.optimizers),
                    len(sweep.batch_sizes), len(cells))

        records = self.store.run_many(cells, self.jobs, self.args.force)
        traces: Dict[str, Dict[int, LossTrace]] = {name: {} for name in sweep.optimizers}
        for config, record in zip(cells, records):
            if isinstance(record, Exception):
                logger.warning("cell %s B=%d failed: %s", config.optimizer, config.batch_size, record)
                continue
            if record.trace.diverged:
                logger.warning("cell %s B=%d diverged at step %s", config.optimizer, config.batch_size,
                               record.trace.diverged_at)
            if record.trace.samples:
                traces[config.optimizer][config.batch_size] = record.trace

        out_dir = self.layout.analysis / "sweep" / config_hash(replace(sweep, base=base))
        unreachable: List[UnreachableThresholdError] = []
        for threshold in sweep.thresholds:
            curves = {}
            errors = []
            for name, by_batch in traces.items():
                if not by_batch:
                    continue
                try:
                    curves[name] = batchlab.build_sweep_curve(by_batch, threshold)
                except UnreachableThresholdError as e:
                    errors.append(e)
                    logger.warning("%s: %s", name, e)
            if not curves:
                if errors:
                    unreachable.append(errors[0])
                continue
            analysis = batchlab.analyze_threshold(curves, sweep.cost, sweep.rel_tol)
            self.write_threshold(out_dir / f"L_{threshold:g}", analysis)
            self.report_threshold(analysis)
        print(f"analysis written to {out_dir}")
        if unreachable:
            lowest = min(e.lowest for e in unreachable)
            highest = max(e.highest for e in unreachable)
            raise UnreachableThresholdError(min(e.threshold for e in unreachable), lowest, highest)
        return EXIT_OK

    def write_threshold(self, directory, analysis: batchlab.ThresholdAnalysis):
        batchlab.write_curve_csv(directory / "curves.csv", analysis.curves)
        batchlab.write_tradeoff_csv(directory / "tradeoff.csv", analysis)
        if analysis.ratio:
            batchlab.write_ratio_csv(directory / "ratio.csv", analysis.ratio, analysis.advantage)
        batchlab.write_summary_json(directory / "summary.json", analysis)
        plots.plot_sweep_curves(directory / "curves.svg", analysis.curves)
        plots.plot_frontier(directory / "frontier.svg", analysis)

    def report_threshold(self, analysis: batchlab.ThresholdAnalysis):
        print(f"L = {analysis.threshold:g}")
        for name, batch_size in sorted(analysis.token_optimal.items()):
            fit = analysis.fits.get(name)
            fit_text = f", B* ~ {fit.b_star:.4g}, m = {fit.m:.3f}" if fit else ""
            print(f"  {name}: token-optimal B = {batch_size}{fit_text}")
        if analysis.ratio:
            ratios = ", ".join(f"{r.batch_size}:{r.ratio:.3f}" for r in analysis.ratio)
            print(f"  token ratio adamw/muon: {ratios}")
        errors = batchlab.consistency_errors(analysis)
        logger.debug("consistency errors %s", errors)

    def cmd_telescope(self) -> int:
        """Handle the telescope command"""
        job = load_telescope_job(self.args.config)
        base = self.with_seed(job.base)
        cfg = job.telescope
        objective = TrainingObjective(base, names=cfg.names)
        result = run_telescope(cfg, objective, jobs=self.jobs)

        fit = None
        if job.fit_powerlaw:
            sizes, losses = [], []
            widths = [level.width for level in result.levels] + [cfg.final_width]
            best = [level.best_loss for level in result.levels] + [result.final_loss]
            for width, loss in zip(widths, best):
                if loss is not None and math.isfinite(loss) and loss > 0:
                    sizes.append(replace(base.spec, hidden_width=width).parameter_count())
                    losses.append(loss)
            if len(sizes) >= 3:
                fit = powerlaw_fit(sizes, losses)
            else:
                logger.warning("only %d usable widths; skipping the power-law fit", len(sizes))

        out_dir = self.layout.analysis / "telescope" / config_hash(replace(job, base=base))
        write_levels(out_dir, result, cfg, fit)
        write_loss_distribution_csv(out_dir / "loss_distribution.csv", result, cfg)
        plots.plot_telescope(out_dir / "losses.svg", result, cfg.final_width)

        for index, level in enumerate(result.levels):
            counts = "x".join(str(c) for c in level.counts)
            print(f"level {index}: width {level.width}, grid {counts}, best loss {level.best_loss:.6g}")
        selected = ", ".join(f"{k}={v:.4g}" for k, v in result.selected_values(cfg.names).items())
        print(f"selected {selected}; final width {cfg.final_width} loss {result.final_loss:.6g}")
        print(f"compute saved {result.ledger.percent_saved:.2f}%, "
              f"spent on final run {result.ledger.percent_on_final:.2f}%")
        if fit is not None:
            print(f"power law: L(d) = {fit.a:.4g}/d^{fit.alpha:.4f} + {fit.e:.4g} (R2 {fit.r_squared:.4f})")
        print(f"analysis written to {out_dir}")
        return EXIT_OK

    def cmd_check(self) -> int:
        """Handle the check command"""
        results = checks.run_suites(self.args.suites)
        report = self.args.report or (self.layout.analysis / "checks.xml")
        checks.write_junit(report, results)
        failed = [r for r in results if not r.passed]
        for r in failed:
            print(f"FAIL {r.suite}.{r.name}: {r.detail}")
        print(f"{len(results) - len(failed)}/{len(results)} checks passed; report at {report}")
        return EXIT_OK if not failed else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", help="workspace root (default: $MUONBENCH_WORKSPACE or ./workspace)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical CPUs)")
    common.add_argument("--force", action="store_true", help="retrain even when a cached run exists")
    common.add_argument("--seed-override", type=int, default=None, help="replace run_seed in every config")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging and tracebacks")

    parser = argparse.ArgumentParser(prog="muonbench", description="Muon optimizer workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="train one run config")
    train.add_argument("config", help="run config JSON")
    train.add_argument("--checkpoint", action="store_true", help="also save final weights and optimizer states")

    sweep = sub.add_parser("sweep-batch", parents=[common], help="batch-size sweep and token-efficiency analysis")
    sweep.add_argument("config", help="sweep config JSON")

    tele = sub.add_parser("telescope", parents=[common], help="telescoping hyperparameter sweep")
    tele.add_argument("config", help="telescope config JSON")

    check = sub.add_parser("check", parents=[common], help="run invariant suites")
    check.add_argument("suites", nargs="+", choices=list(checks.SUITES) + ["all"])
    check.add_argument("--report", help="JUnit XML path (default: <workspace>/analysis/checks.xml)")
    return parser


def setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(asctime)s] %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    handlers = {
        "train": BenchApp.cmd_train,
        "sweep-batch": BenchApp.cmd_sweep_batch,
        "telescope": BenchApp.cmd_telescope,
        "check": BenchApp.cmd_check,
    }
    try:
        app = BenchApp(args)
        return handlers[args.command](app)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.error("%s", e)
        return EXIT_DIVERGED
    except UnreachableThresholdError as e:
        logger.error("%s", e)
        return EXIT_UNREACHABLE
    except Exception as e:
        if args.verbose:
            logger.exception("unexpected error")
        else:
            logger.error("error: %s", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
