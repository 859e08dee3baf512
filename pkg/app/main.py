import logging
import os
import sys
from pathlib import Path

import click
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from experiment import ConfigError, TraceFormatError, cmd_compare, cmd_run, parse_thresholds
from tools.datasets import DatasetError
from tools.synth import cmd_synth
from validation import SUITES, UnknownSuiteError, cmd_validate

load_dotenv()

LOG_LEVEL = os.environ.get("POSTERIORFLOW_LOG_LEVEL", "INFO").upper()

logging.basicConfig(level=LOG_LEVEL, format="%(message)s", handlers=[RichHandler(rich_tracebacks=True)])
logger = logging.getLogger(__name__)

console = Console()


@click.group()
def main():
    """
    PosteriorFlow: particle samplers for Bayesian posteriors.

    Runs SGLD, SGHMC, SVGD and PO-SG-MCMC experiments from key=value configs,
    summarizes their traces, and checks the samplers against a Fokker-Planck/JKO grid oracle.
    """


@main.command()
@click.argument("config", type=click.Path(path_type=Path))
def run(config: Path):
    """Run every (sampler, seed) pair in CONFIG and write trace CSVs."""
    try:
        report = cmd_run(config)
    except ConfigError as e:
        console.print(f"[red]Config error:[/red] {e}")
        sys.exit(1)
    for sampler, seed, message in report.diverged:
        console.print(f"[yellow]{sampler} seed {seed} diverged:[/yellow] {message} (partial trace kept)")
    console.print(f"Wrote {len(report.traces)} trace(s) and {report.manifest.name} to {report.outdir}")
    sys.exit(report.exit_code)


@main.command()
@click.argument("trace_dir", type=click.Path(path_type=Path, file_okay=False))
@click.option("--threshold", "thresholds", multiple=True,
              help="metric:value[:below]; overrides the thresholds recorded in the run manifest")
def compare(trace_dir: Path, thresholds):
    """Summarize the traces in TRACE_DIR across seeds."""
    try:
        parsed = parse_thresholds(",".join(thresholds)) if thresholds else None
        result = cmd_compare(trace_dir, parsed)
    except ValueError as e:
        console.print(f"[red]Bad threshold:[/red] {e}")
        sys.exit(1)
    except TraceFormatError as e:
        console.print(f"[red]Cannot compare traces:[/red] {e}")
        sys.exit(1)

    table = Table(title="Iterations to threshold")
    for column in ("sampler", "threshold", "median iterations", "reached"):
        table.add_column(column)
    for sampler, metric, value, direction, median, reached, seeds, _ in result.thresholds:
        sign = "<=" if direction == "below" else ">="
        table.add_row(sampler, f"{metric} {sign} {value}", str(median), f"{reached}/{seeds}")
    console.print(table)
    console.print(f"Wrote {', '.join(path.name for path in result.files)}")


@main.command()
@click.argument("suite")
def validate(suite: str):
    """Run a named invariant suite: gradcheck, fpe, jko, momentum-equivalence or lemma2."""
    try:
        results = cmd_validate(suite)
    except UnknownSuiteError:
        console.print(f"[red]Unknown suite '{suite}'.[/red] Valid suites: {', '.join(SUITES)}")
        sys.exit(1)

    table = Table(title=f"validate {suite}")
    for column in ("check", "result", "detail"):
        table.add_column(column)
    for result in results:
        status = "[green]pass[/green]" if result.passed else "[red]FAIL[/red]"
        table.add_row(result.name, status, result.detail)
    console.print(table)
    sys.exit(0 if all(result.passed for result in results) else 1)


@main.command()
@click.argument("kind")
@click.option("--n", "n", default=1000, show_default=True, help="Total rows before the 80/20 split")
@click.option("--d", "d", default=10, show_default=True, help="Feature dimension")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="data", show_default=True, type=click.Path(path_type=Path, file_okay=False))
def synth(kind: str, n: int, d: int, seed: int, out: Path):
    """Generate a synthetic KIND dataset (train.csv and test.csv in --out)."""
    try:
        train, test = cmd_synth(kind, n, d, seed, out)
    except DatasetError as e:
        console.print(f"[red]Cannot generate data:[/red] {e}")
        sys.exit(1)
    console.print(f"Wrote {train} and {test}")


if __name__ == "__main__":
    main()
