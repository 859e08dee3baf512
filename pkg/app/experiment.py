"""Experiment Harness

Parses experiment configs, runs every (sampler, seed) pair to its iteration
budget, writes one trace CSV per run plus a manifest, and summarizes trace
directories across seeds.

Config files are flat key=value text with dotted section names:

    target.kind=logistic
    target.train=data/train.csv
    run.samplers=svgd,po_sgmcmc
    sampler.po_sgmcmc.momentum=0.1
    compare.thresholds=accuracy:0.73
"""

import csv
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values

from kernels import RbfKernel, median_heuristic
from metrics import moment_errors, w2_quadratic
from samplers import SAMPLER_IDS, DivergenceError, MetricHook, RunTrace, SamplerConfig, SamplerState, run
from stein import ksd_u_statistic
from targets import (
    DEFAULT_PRIOR_PRECISION,
    ContractViolation,
    LogisticRegressionTarget,
    TargetModel,
    build_target,
    logistic_metrics,
)
from tools.datasets import Dataset, DatasetError, load_dataset, write_csv_atomic

logger = logging.getLogger(__name__)

THREADS_ENV = "POSTERIORFLOW_THREADS"
TRACE_HEADER = ["iteration", "metric", "value"]
TRACE_NAME = re.compile(r"^(?P<sampler>[a-z_]+)_(?P<seed>\d+)\.csv$")
NOT_REACHED = -1
DEFAULT_THRESHOLDS = "accuracy:0.73"

TARGET_KINDS = ("gaussian", "mixture", "double_well", "logistic")
DATASET_FORMATS = ("csv", "libsvm")
# SamplerConfig fields a config file may override per sampler
OVERRIDABLE = ("stepsize", "momentum", "noise_scale", "noise_decay", "friction", "batch_size", "adagrad")


class ConfigError(Exception):
    """Raised when an experiment config cannot be parsed or validated"""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        location = " ".join(part for part in (
            f"line {line}" if line is not None else "",
            f"[{field}]" if field else "",
        ) if part)
        super().__init__(f"{location}: {message}" if location else message)
        self.line = line
        self.field = field


class TraceFormatError(Exception):
    """Raised when a trace directory cannot be summarized"""
    pass


@dataclass(frozen=True)
class Threshold:
    """Metric level a run must reach; `below` flips the comparison for lower-is-better metrics."""
    metric: str
    value: float
    below: bool = False

    def reached(self, value: float) -> bool:
        return value <= self.value if self.below else value >= self.value

    def __str__(self):
        return f"{self.metric}:{self.value!r}" + (":below" if self.below else "")


def parse_thresholds(text: str) -> List[Threshold]:
    thresholds = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] not in ("below", "above")):
            raise ValueError(f"threshold '{item}' is not metric:value[:below]")
        thresholds.append(Threshold(parts[0], float(parts[1]), below=len(parts) == 3 and parts[2] == "below"))
    return thresholds


@dataclass(frozen=True)
class TargetSpec:
    kind: str
    dim: Optional[int] = None
    mean: float = 0.0
    separation: float = 2.0
    train: Optional[str] = None
    test: Optional[str] = None
    format: str = "csv"
    add_bias: bool = False
    prior_precision: float = DEFAULT_PRIOR_PRECISION


@dataclass(frozen=True)
class ExperimentConfig:
    target: TargetSpec
    samplers: Tuple[str, ...]
    iterations: int = 1000
    hook_every: int = 10
    seeds: Tuple[int, ...] = (0,)
    outdir: Path = Path("runs")
    particles: int = 20
    batch_size: int = 32
    overrides: Dict[str, Dict[str, object]] = field(default_factory=dict)
    thresholds: Tuple[Threshold, ...] = ()

    def sampler_config(self, sampler: str, seed: int) -> SamplerConfig:
        base = SamplerConfig(seed=seed, particles=self.particles, batch_size=self.batch_size,
                             hook_every=self.hook_every)
        return replace(base, **self.overrides.get(sampler, {}))

    def manifest(self) -> List[Tuple[str, str]]:
        """Fully resolved key/value pairs, sorted by key."""
        items = {f"target.{f.name}": getattr(self.target, f.name) for f in fields(TargetSpec)}
        items.update({
            "run.samplers": ",".join(self.samplers),
            "run.iterations": self.iterations,
            "run.hook_every": self.hook_every,
            "run.seeds": ",".join(str(seed) for seed in self.seeds),
            "run.outdir": self.outdir,
            "run.particles": self.particles,
            "run.batch_size": self.batch_size,
            "compare.thresholds": ",".join(str(t) for t in self.thresholds),
        })
        for sampler in self.samplers:
            resolved = self.sampler_config(sampler, self.seeds[0])
            for name in OVERRIDABLE:
                items[f"sampler.{sampler}.{name}"] = getattr(resolved, name)
        return [(key, "" if value is None else str(value)) for key, value in sorted(items.items())]


def _key_lines(path: Path) -> Dict[str, int]:
    lines = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or "=" not in stripped:
            continue
        key = stripped.split("=", 1)[0].strip()
        if key.startswith("export "):
            key = key[len("export "):].strip()
        lines[key] = lineno
    return lines


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"'{text}' is not a boolean")


def _parse_int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _resolve(location: Optional[str], base: Path) -> Optional[str]:
    if location is None or location.startswith(("http://", "https://")):
        return location
    path = Path(location)
    return str(path if path.is_absolute() else (base / path).resolve())


_TARGET_FIELDS = {
    "kind": str, "dim": int, "mean": float, "separation": float, "train": str, "test": str,
    "format": str, "add_bias": _parse_bool, "prior_precision": float,
}
_RUN_FIELDS = {
    "samplers": lambda text: tuple(part.strip() for part in text.split(",") if part.strip()),
    "iterations": int, "hook_every": int, "seeds": _parse_int_list, "outdir": str,
    "particles": int, "batch_size": int,
}
_SAMPLER_FIELD_TYPES = {f.name: (_parse_bool if isinstance(f.default, bool) else type(f.default))
                        for f in fields(SamplerConfig) if f.name in OVERRIDABLE}


def parse_config(path: Path) -> ExperimentConfig:
    """
    Parse and validate an experiment config.

    Raises:
        ConfigError: with the offending line and field
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file '{path}' does not exist")
    raw = dotenv_values(path, interpolate=False)
    lines = _key_lines(path)
    base = path.parent.resolve()

    target, run_opts, overrides, thresholds = {}, {}, {}, None
    for key, value in raw.items():
        line = lines.get(key)
        if value is None:
            raise ConfigError("missing '=value'", line, key)
        section, _, rest = key.partition(".")
        try:
            if section == "target" and rest in _TARGET_FIELDS:
                target[rest] = _TARGET_FIELDS[rest](value)
            elif section == "run" and rest in _RUN_FIELDS:
                run_opts[rest] = _RUN_FIELDS[rest](value)
            elif section == "compare" and rest == "thresholds":
                thresholds = tuple(parse_thresholds(value))
            elif section == "sampler":
                sampler, _, name = rest.partition(".")
                if sampler not in SAMPLER_IDS:
                    raise ConfigError(f"unknown sampler '{sampler}'", line, key)
                if name not in _SAMPLER_FIELD_TYPES:
                    raise ConfigError(f"unknown sampler field '{name}', expected one of {', '.join(OVERRIDABLE)}",
                                      line, key)
                overrides.setdefault(sampler, {})[name] = _SAMPLER_FIELD_TYPES[name](value)
            else:
                raise ConfigError("unknown key", line, key)
        except ValueError as e:
            raise ConfigError(f"bad value '{value}': {e}", line, key)

    def fail(message: str, key: str):
        raise ConfigError(message, lines.get(key), key)

    if "kind" not in target:
        fail("target.kind is required", "target.kind")
    if target["kind"] not in TARGET_KINDS:
        fail(f"unknown target kind, expected one of {', '.join(TARGET_KINDS)}", "target.kind")
    if target.get("format", "csv") not in DATASET_FORMATS:
        fail(f"unknown dataset format, expected one of {', '.join(DATASET_FORMATS)}", "target.format")
    if target.get("dim") is not None and target["dim"] < 1:
        fail("target.dim must be positive", "target.dim")
    for key in ("train", "test"):
        target[key] = _resolve(target.get(key), base)
        location = target[key]
        if location and not location.startswith(("http://", "https://")) and not Path(location).is_file():
            fail(f"file '{location}' does not exist", f"target.{key}")
    if target["kind"] == "logistic" and not target.get("train"):
        fail("logistic targets need target.train", "target.train")

    samplers = run_opts.get("samplers", ())
    if not samplers:
        fail("at least one sampler is required", "run.samplers")
    for sampler in samplers:
        if sampler not in SAMPLER_IDS:
            fail(f"unknown sampler '{sampler}', expected one of {', '.join(SAMPLER_IDS)}", "run.samplers")
    if len(set(samplers)) != len(samplers):
        fail("samplers must be distinct", "run.samplers")
    seeds = run_opts.get("seeds", (0,))
    if not seeds or len(set(seeds)) != len(seeds) or min(seeds) < 0:
        fail("seeds must be distinct nonnegative integers", "run.seeds")
    if run_opts.get("iterations", 0) < 0:
        fail("run.iterations must be >= 0", "run.iterations")
    run_opts["samplers"] = samplers
    run_opts["seeds"] = seeds
    run_opts["outdir"] = Path(_resolve(run_opts.get("outdir", "runs"), base))

    config = ExperimentConfig(
        target=TargetSpec(**target),
        overrides=overrides,
        thresholds=thresholds if thresholds is not None else tuple(parse_thresholds(DEFAULT_THRESHOLDS)),
        **run_opts,
    )
    for sampler in samplers:
        try:
            config.sampler_config(sampler, seeds[0])
        except ContractViolation as e:
            overridden = sorted(overrides.get(sampler, {}))
            key = f"sampler.{sampler}.{overridden[0]}" if overridden else "run"
            fail(str(e), key)
    return config


def build_model(spec: TargetSpec) -> Tuple[TargetModel, Optional[Dataset]]:
    """Construct the target model and, for logistic targets, load the test set."""
    test = None
    train = None
    if spec.kind == "logistic":
        dim = spec.dim if spec.format == "libsvm" else None
        train = load_dataset(spec.train, spec.format, add_bias=spec.add_bias, dim=dim)
        if spec.test:
            raw_dim = train.dim - (1 if spec.add_bias else 0)
            test = load_dataset(spec.test, spec.format, add_bias=spec.add_bias,
                                dim=raw_dim if spec.format == "libsvm" else None)
            if test.dim != train.dim:
                raise DatasetError(f"Test set has {test.dim} features, training set has {train.dim}")
    model = build_target(spec.kind, dim=spec.dim or 1, mean=spec.mean, separation=spec.separation,
                         train=train, prior_precision=spec.prior_precision)
    return model, test


def build_hooks(model: TargetModel, test: Optional[Dataset]) -> Dict[str, MetricHook]:
    """Metric hooks for a target: predictive metrics, moment errors, KSD and the step W2."""
    hooks: Dict[str, MetricHook] = {}
    if isinstance(model, LogisticRegressionTarget) and test is not None:
        cache: Dict[int, Tuple[float, float]] = {}

        def predictive(state: SamplerState) -> Tuple[float, float]:
            if state.iteration not in cache:
                cache.clear()
                cache[state.iteration] = logistic_metrics(model, state.current, test)
            return cache[state.iteration]

        hooks["accuracy"] = lambda state: predictive(state)[0]
        hooks["log_likelihood"] = lambda state: predictive(state)[1]

    moments = model.true_moments
    if moments is not None:
        true_mean, true_cov = moments
        hooks["mean_error"] = lambda state: moment_errors(state.current, true_mean, true_cov)[0]
        hooks["cov_error"] = lambda state: moment_errors(state.current, true_mean, true_cov)[1]

    def ksd(state: SamplerState) -> float:
        if state.current.shape[0] < 2:
            return float("nan")
        return ksd_u_statistic(state.current, model, RbfKernel(median_heuristic(state.current)))

    hooks["ksd"] = ksd
    hooks["w2_step"] = lambda state: w2_quadratic(state.previous, state.current)
    return hooks


def trace_path(outdir: Path, sampler: str, seed: int) -> Path:
    return Path(outdir) / f"{sampler}_{seed}.csv"


def write_trace(path: Path, trace: RunTrace) -> Path:
    return write_csv_atomic(path, TRACE_HEADER, ((r.iteration, r.metric, r.value) for r in trace.records))


def thread_count(jobs: int) -> int:
    """Worker count from POSTERIORFLOW_THREADS (0 or unset means one per job, capped by the CPU count)."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        requested = int(raw)
    except ValueError:
        raise ConfigError(f"'{raw}' is not an integer", field=THREADS_ENV)
    if requested < 0:
        raise ConfigError("must be >= 0", field=THREADS_ENV)
    if requested == 0:
        requested = os.cpu_count() or 1
    return max(1, min(requested, jobs))


@dataclass
class RunReport:
    outdir: Path
    traces: List[Path] = field(default_factory=list)
    diverged: List[Tuple[str, int, str]] = field(default_factory=list)
    manifest: Optional[Path] = None

    @property
    def exit_code(self) -> int:
        return 2 if self.diverged else 0


def cmd_run(config_path: Path) -> RunReport:
    """
    Run every (sampler, seed) pair of a config.

    Runs are independent and execute on a thread pool; each trace file is a
    pure function of the config, whatever the worker count.

    Raises:
        ConfigError: on an invalid config or unreadable dataset
    """
    config = parse_config(config_path)
    try:
        model, test = build_model(config.target)
    except (DatasetError, ContractViolation) as e:
        raise ConfigError(str(e), field="target")
    jobs = [(sampler, seed) for sampler in config.samplers for seed in config.seeds]
    report = RunReport(outdir=config.outdir)
    report.manifest = write_csv_atomic(config.outdir / "manifest.csv", ["key", "value"], config.manifest())

    def execute(job):
        sampler, seed = job
        # Hooks hold a per-run cache, so every job builds its own
        hooks = build_hooks(model, test)
        try:
            trace, _ = run(sampler, model, config.sampler_config(sampler, seed), config.iterations, hooks=hooks)
            return job, trace, None
        except DivergenceError as e:
            return job, e.trace or RunTrace(sampler=sampler, seed=seed), str(e)

    workers = thread_count(len(jobs))
    logger.info(f"Running {len(jobs)} job(s) on {workers} thread(s), writing to {config.outdir}")
    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(execute, jobs))
    for (sampler, seed), trace, failure in results:
        report.traces.append(write_trace(trace_path(config.outdir, sampler, seed), trace))
        if failure:
            report.diverged.append((sampler, seed, failure))
    logger.info(f"Wrote {len(report.traces)} trace(s) in {time.perf_counter() - started:.2f}s")
    return report


@dataclass(frozen=True)
class TraceFile:
    sampler: str
    seed: int
    rows: Tuple[Tuple[int, str, float], ...]

    @property
    def metrics(self) -> frozenset:
        return frozenset(metric for _, metric, _ in self.rows)

    def stream(self, metric: str) -> List[Tuple[int, float]]:
        return [(iteration, value) for iteration, name, value in self.rows if name == metric]


def read_trace(path: Path) -> TraceFile:
    match = TRACE_NAME.match(path.name)
    if not match or match["sampler"] not in SAMPLER_IDS:
        raise TraceFormatError(f"'{path.name}' is not a <sampler>_<seed>.csv trace")
    lines = path.read_text().splitlines()
    if not lines or lines[0].split(",") != TRACE_HEADER:
        raise TraceFormatError(f"{path.name}: header must be {','.join(TRACE_HEADER)}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        try:
            rows.append((int(parts[0]), parts[1], float(parts[2])))
        except (IndexError, ValueError):
            raise TraceFormatError(f"{path.name}:{lineno}: malformed row '{line}'")
    return TraceFile(match["sampler"], int(match["seed"]), tuple(rows))


def find_traces(trace_dir: Path) -> List[TraceFile]:
    paths = sorted(p for p in Path(trace_dir).glob("*.csv") if TRACE_NAME.match(p.name)
                   and TRACE_NAME.match(p.name)["sampler"] in SAMPLER_IDS)
    if not paths:
        raise TraceFormatError(f"No trace files in {trace_dir}")
    return [read_trace(path) for path in paths]


def _manifest_thresholds(trace_dir: Path) -> Optional[List[Threshold]]:
    manifest = Path(trace_dir) / "manifest.csv"
    if not manifest.is_file():
        return None
    with manifest.open(newline="") as handle:
        for row in csv.reader(handle):
            if len(row) == 2 and row[0] == "compare.thresholds":
                return parse_thresholds(row[1])
    return None


def iterations_to_threshold(stream: Sequence[Tuple[int, float]], threshold: Threshold) -> int:
    """First recorded iteration at which the metric reaches the threshold, or -1."""
    for iteration, value in stream:
        if np.isfinite(value) and threshold.reached(value):
            return iteration
    return NOT_REACHED


def median_iterations(per_seed: Sequence[int]):
    """Median across seeds with unreached seeds ranked last; -1 when the median seed never got there."""
    ranked = [math.inf if value == NOT_REACHED else value for value in per_seed]
    median = float(np.median(ranked))
    return NOT_REACHED if not np.isfinite(median) else median


@dataclass
class CompareResult:
    summary: List[Tuple] = field(default_factory=list)
    thresholds: List[Tuple] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)


SUMMARY_HEADER = ["sampler", "metric", "iteration", "seeds", "median", "q25", "q75"]
THRESHOLD_HEADER = ["sampler", "metric", "threshold", "direction", "median_iterations", "reached", "seeds", "per_seed"]


def cmd_compare(trace_dir: Path, thresholds: Optional[Sequence[Threshold]] = None) -> CompareResult:
    """
    Summarize a trace directory across seeds.

    Writes summary.csv (median and quartiles per sampler, metric and iteration,
    followed by one median iterations-to-threshold column per threshold),
    thresholds.csv (per-seed iterations-to-threshold detail) and one
    plot_<metric>.csv per metric with median/q25/q75 columns per sampler.

    Raises:
        TraceFormatError: when traces are malformed or record different metrics
    """
    trace_dir = Path(trace_dir)
    traces = find_traces(trace_dir)
    metric_sets = {trace.metrics for trace in traces}
    if len(metric_sets) > 1:
        described = "; ".join(f"{t.sampler}_{t.seed}: {','.join(sorted(t.metrics)) or '-'}" for t in traces)
        raise TraceFormatError(f"Traces record different metrics ({described})")
    metrics = sorted(metric_sets.pop())
    if thresholds is None:
        thresholds = _manifest_thresholds(trace_dir)
    if thresholds is None:
        thresholds = parse_thresholds(DEFAULT_THRESHOLDS)

    by_sampler: Dict[str, List[TraceFile]] = {}
    for trace in traces:
        by_sampler.setdefault(trace.sampler, []).append(trace)
    samplers = [s for s in SAMPLER_IDS if s in by_sampler]

    result = CompareResult()
    plot_data: Dict[str, Dict[int, Dict[str, Tuple[float, float, float]]]] = {m: {} for m in metrics}
    for sampler in samplers:
        for metric in metrics:
            values: Dict[int, List[float]] = {}
            for trace in by_sampler[sampler]:
                for iteration, value in trace.stream(metric):
                    values.setdefault(iteration, []).append(value)
            for iteration in sorted(values):
                q25, median, q75 = np.percentile(values[iteration], [25, 50, 75])
                stats = (float(median), float(q25), float(q75))
                result.summary.append((sampler, metric, iteration, len(values[iteration])) + stats)
                plot_data[metric].setdefault(iteration, {})[sampler] = stats
        for threshold in thresholds:
            per_seed = [iterations_to_threshold(trace.stream(threshold.metric), threshold)
                        for trace in sorted(by_sampler[sampler], key=lambda t: t.seed)]
            reached = sum(1 for value in per_seed if value != NOT_REACHED)
            result.thresholds.append((
                sampler, threshold.metric, threshold.value, "below" if threshold.below else "above",
                median_iterations(per_seed), reached, len(per_seed), ";".join(str(v) for v in per_seed),
            ))

    threshold_columns = [f"iterations_to_{t.metric}_{'below' if t.below else 'above'}_{t.value!r}" for t in thresholds]
    medians: Dict[str, List] = {}
    for row in result.thresholds:
        medians.setdefault(row[0], []).append(row[4])
    summary_rows = [row + tuple(medians.get(row[0], ())) for row in result.summary]
    result.files.append(write_csv_atomic(trace_dir / "summary.csv", SUMMARY_HEADER + threshold_columns, summary_rows))
    result.files.append(write_csv_atomic(trace_dir / "thresholds.csv", THRESHOLD_HEADER, result.thresholds))
    for metric, rows in plot_data.items():
        header = ["iteration"] + [f"{s}_{stat}" for s in samplers for stat in ("median", "q25", "q75")]
        lines = []
        for iteration in sorted(rows):
            line = [iteration]
            for sampler in samplers:
                line.extend(rows[iteration].get(sampler, ("", "", "")))
            lines.append(line)
        result.files.append(write_csv_atomic(trace_dir / f"plot_{metric}.csv", header, lines))
    logger.info(f"Summarized {len(traces)} trace(s) from {trace_dir}")
    return result
