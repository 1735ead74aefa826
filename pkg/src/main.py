#!/usr/bin/env python3
"""
Multiband Delay Estimation - Command Line Simulator

Subcommands:
1. synth           write one synthesized observation as a JSON fixture
2. run             single trial with the full per-iteration trace
3. sweep-snr       Monte-Carlo RMSE / detection sweep over SNR
4. sweep-datasize  Monte-Carlo sweep over subcarriers per band
5. cdf             Monte-Carlo error CDF at the scenario SNR
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import List, Optional

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import Progress
from rich.table import Table

from sim_utils import SimUtils
from config_loader import ConfigError, load_scenario
from harness import (
    MetricsRecord, Scenario, TrialResult, emit, observation_to_dict, prepare_trial,
    run_montecarlo, run_trial, sweep, trial_seed,
)


console = Console()
logger = logging.getLogger("spvbi")

DEFAULT_SNR_VALUES = "-5,0,5"
DEFAULT_DATASIZE_VALUES = "64,128,256"


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def parse_values(text: str, cast) -> List:
    """Comma separated list of numbers for sweep axes."""
    try:
        values = [cast(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"invalid --values '{text}': {e}") from e
    if not values:
        raise ConfigError("--values needs at least one entry")
    return values


class DelayEstimationCLI:
    """Command Line Interface for the multiband delay estimation simulator."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.scenario: Optional[Scenario] = None

    def load(self) -> Scenario:
        self.scenario = load_scenario(self.args.config, seed=self.args.seed, trials=self.args.trials,
                                      workers=self.args.workers)
        return self.scenario

    def display_banner(self, title: str):
        s = self.scenario
        bands = ", ".join(f"{b.f_c / 1e9:g} GHz x {b.n_sub}" for b in s.plan.bands)
        console.print(Panel.fit(
            f"[bold cyan]{title}[/bold cyan]\n\n"
            f"Bands: {bands}\n"
            f"Paths: {s.truth.n_paths}   SNR: {s.snr_db:g} dB ({s.snr_mode})   "
            f"Coarse: {s.coarse_mode.value}\n"
            f"Trials: {s.n_trials}   Seed: {s.seed}   Workers: {s.workers}",
            border_style="cyan",
            padding=(1, 2),
        ))

    def ensure_out_dir(self) -> str:
        os.makedirs(self.args.out, exist_ok=True)
        return self.args.out

    # ----------------------------------------------------------------- synth

    def synth(self) -> int:
        self.display_banner("Synthesize Observation")
        truth, obs, _ = prepare_trial(self.scenario, self.args.trial)
        fixture = observation_to_dict(self.scenario.plan, truth, obs, self.scenario.seed)
        fixture["trial"] = self.args.trial

        path = os.path.join(self.ensure_out_dir(), "observation.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(fixture, fh, indent=2)

        table = Table(title="Ground Truth")
        table.add_column("Path", style="cyan")
        table.add_column("Delay (ns)", style="green")
        table.add_column("|alpha|", style="yellow")
        for k in range(truth.k_paths):
            table.add_row(str(k + 1), f"{SimUtils.to_ns(truth.tau[k]):.3f}", f"{abs(truth.alpha[k]):.3f}")
        console.print(table)
        console.print(f"[green]✅ Observation with {obs.y.size} samples written to {path}[/green]")
        return 0

    # ------------------------------------------------------------------- run

    def run(self) -> int:
        self.display_banner("Single Trial")
        out_dir = self.ensure_out_dir()
        trace_path = os.path.join(out_dir, "trace.jsonl")

        with Progress(console=console) as progress:
            task = progress.add_task(f"Running trial {self.args.trial}...", total=None)
            result = run_trial(self.scenario, self.args.trial, trace_path=trace_path)
            progress.update(task, total=1, completed=1)

        report_path = os.path.join(out_dir, f"trial.{self.args.format}")
        self.write_trial(result, report_path)

        table = Table(title=f"Trial {result.trial} (seed {trial_seed(self.scenario.seed, result.trial)})")
        table.add_column("Metric", style="cyan")
        table.add_column("Value", style="green")
        table.add_row("True LoS delay (ns)", f"{SimUtils.to_ns(result.tau1_true):.3f}")
        table.add_row("MAP estimate (ns)", f"{SimUtils.to_ns(result.tau1_map):.3f}")
        table.add_row("MMSE estimate (ns)", f"{SimUtils.to_ns(result.tau1_mmse):.3f}")
        table.add_row("Coarse paths", str(result.k_hat))
        table.add_row("Selected / true model", f"{result.selected_model} / {result.true_model}")
        table.add_row("Iterations", str(result.iterations))
        table.add_row("Samples drawn", str(result.total_samples))
        console.print(table)

        if result.converged:
            console.print(f"[green]✅ Converged; trace written to {trace_path}[/green]")
        else:
            console.print(f"[yellow]⚠️ Stopped at max_iters without converging; trace in {trace_path}[/yellow]")
        if result.true_model >= 0 and not result.detected:
            console.print("[yellow]⚠️ Selected model differs from the true model[/yellow]")
        return 0

    def write_trial(self, result: TrialResult, path: str) -> None:
        row = asdict(result)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if self.args.format == "json":
                json.dump(row, fh, indent=2)
            else:
                writer = csv.DictWriter(fh, fieldnames=list(row))
                writer.writeheader()
                writer.writerow(row)

    # ---------------------------------------------------------- monte carlo

    def montecarlo(self, title: str, axis: str, values: Optional[list]) -> int:
        self.display_banner(title)
        n_points = len(values) if values else 1

        with Progress(console=console) as progress:
            task = progress.add_task(f"{title}...", total=self.scenario.n_trials * n_points)

            def tick(_result: TrialResult):
                progress.advance(task)

            if values is None:
                records = [run_montecarlo(self.scenario, axis=axis, progress=tick)]
            else:
                records = sweep(self.scenario, axis, values, progress=tick)

        paths = emit(records, self.args.format, self.args.out)
        self.display_records(records, axis)
        for path in paths:
            console.print(f"[green]✅ Wrote {path}[/green]")
        return 0

    def display_records(self, records: List[MetricsRecord], axis: str):
        table = Table(title="Monte-Carlo Summary")
        table.add_column(axis, style="cyan")
        table.add_column("RMSE MAP (ns)", style="green")
        table.add_column("RMSE MMSE (ns)", style="green")
        table.add_column("Detection", style="yellow")
        table.add_column("Samples/iter", style="magenta")
        table.add_column("Trials")
        for r in records:
            table.add_row(f"{r.axis_value:g}", f"{r.rmse_map_ns:.3f}", f"{r.rmse_mmse_ns:.3f}",
                          f"{100 * r.detect_rate:.1f}%", f"{r.mean_samples_per_iter:.2f}", str(r.n_trials))
        console.print(table)

        if len(records) > 1:
            rmse = np.array([r.rmse_map_ns for r in records])
            if axis == "snr_db" and np.any(np.diff(rmse) > 0):
                console.print("[yellow]⚠️ RMSE is not monotone in SNR at this trial count[/yellow]")

    def sweep_snr(self) -> int:
        return self.montecarlo("SNR Sweep", "snr_db", parse_values(self.args.values or DEFAULT_SNR_VALUES, float))

    def sweep_datasize(self) -> int:
        values = parse_values(self.args.values or DEFAULT_DATASIZE_VALUES, int)
        return self.montecarlo("Data-Size Sweep", "n_sub", values)

    def cdf(self) -> int:
        return self.montecarlo("Error CDF", "snr_db", None)

    def dispatch(self) -> int:
        self.load()
        handler = {
            "synth": self.synth,
            "run": self.run,
            "sweep-snr": self.sweep_snr,
            "sweep-datasize": self.sweep_datasize,
            "cdf": self.cdf,
        }[self.args.command]
        return handler()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario file (key = value)")
    common.add_argument("--seed", type=int, help="master seed, overrides the file")
    common.add_argument("--trials", type=int, help="Monte-Carlo trials, overrides the file")
    common.add_argument("--workers", type=int, help="parallel trial workers, overrides the file")
    common.add_argument("--out", default="results", help="output directory (default: results)")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="output format")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="spvbi", description="Multiband delay estimation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("synth", "write one observation fixture"),
                           ("run", "single trial with full trace")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--trial", type=int, default=0, help="trial index (default: 0)")

    for name, helptext in (("sweep-snr", "RMSE and detection over SNR values"),
                           ("sweep-datasize", "RMSE and detection over subcarriers per band")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--values", help="comma separated axis values")

    sub.add_parser("cdf", parents=[common], help="delay error CDF at the scenario SNR")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    if getattr(args, "trial", 0) < 0:
        console.print("[red]❌ --trial must be >= 0[/red]")
        return 2
    try:
        cli = DelayEstimationCLI(args)
        return cli.dispatch()
    except ConfigError as e:
        console.print(f"[red]❌ Configuration error: {e}[/red]")
        return 2
    except OSError as e:
        console.print(f"[red]❌ Cannot write output: {e}[/red]")
        return 3
    except Exception as e:
        console.print(f"[red]Fatal error: {e}[/red]")
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
