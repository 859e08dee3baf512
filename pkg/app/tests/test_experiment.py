"""Tests for the experiment harness and the command line"""

import sys
import os
from pathlib import Path

import pytest
from click.testing import CliRunner

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from experiment import (
    NOT_REACHED,
    ConfigError,
    Threshold,
    TraceFormatError,
    cmd_compare,
    cmd_run,
    iterations_to_threshold,
    median_iterations,
    parse_config,
    parse_thresholds,
    read_trace,
)
import experiment
import samplers
from main import main
from targets import GaussianTarget
from tools.synth import cmd_synth

GAUSSIAN_CONFIG = """\
# two samplers on a 2-D Gaussian
target.kind=gaussian
target.dim=2
target.mean=1.0
run.samplers=sgld,po_sgmcmc
run.iterations=40
run.hook_every=10
run.seeds=1,2,3
run.particles=8
run.outdir=out
sampler.po_sgmcmc.momentum=0.2
"""


def write_config(tmp_path: Path, text: str, name: str = "experiment.conf") -> Path:
    path = tmp_path / name
    path.write_text(text)
    return path


def write_trace(directory: Path, name: str, rows):
    lines = ["iteration,metric,value"] + [f"{i},{m},{v!r}" for i, m, v in rows]
    (directory / name).write_text("\n".join(lines) + "\n")


class TestParseConfig:
    """key=value experiment configs"""

    def test_resolves_defaults_and_paths(self, tmp_path):
        config = parse_config(write_config(tmp_path, GAUSSIAN_CONFIG))
        assert config.samplers == ("sgld", "po_sgmcmc")
        assert config.seeds == (1, 2, 3)
        assert config.outdir == (tmp_path / "out").resolve()
        assert config.sampler_config("po_sgmcmc", 2).momentum == 0.2
        assert config.sampler_config("sgld", 2).seed == 2
        assert config.thresholds == (Threshold("accuracy", 0.73),)

    def test_unknown_key_reports_line(self, tmp_path):
        text = GAUSSIAN_CONFIG + "run.colour=blue\n"
        with pytest.raises(ConfigError) as info:
            parse_config(write_config(tmp_path, text))
        assert info.value.line == 13
        assert info.value.field == "run.colour"

    def test_bad_value_reports_field(self, tmp_path):
        text = GAUSSIAN_CONFIG.replace("run.iterations=40", "run.iterations=many")
        with pytest.raises(ConfigError) as info:
            parse_config(write_config(tmp_path, text))
        assert info.value.field == "run.iterations"
        assert info.value.line == 6

    def test_out_of_range_sampler_field(self, tmp_path):
        text = GAUSSIAN_CONFIG.replace("momentum=0.2", "momentum=1.5")
        with pytest.raises(ConfigError) as info:
            parse_config(write_config(tmp_path, text))
        assert info.value.field == "sampler.po_sgmcmc.momentum"

    def test_duplicate_seeds(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(write_config(tmp_path, GAUSSIAN_CONFIG.replace("1,2,3", "1,1")))

    def test_needs_a_sampler(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(write_config(tmp_path, "target.kind=gaussian\n"))

    def test_missing_dataset(self, tmp_path):
        text = "target.kind=logistic\ntarget.train=missing.csv\nrun.samplers=svgd\n"
        with pytest.raises(ConfigError) as info:
            parse_config(write_config(tmp_path, text))
        assert info.value.field == "target.train"

    def test_shipped_example_config(self, tmp_path):
        """The repository's experiment.conf compares SVGD against PO-SG-MCMC at mu = 0.1."""
        shipped = Path(__file__).resolve().parents[2] / "experiment.conf"
        cmd_synth("logistic", 100, 10, 0, tmp_path / "data")
        config = parse_config(write_config(tmp_path, shipped.read_text()))
        assert config.samplers == ("svgd", "po_sgmcmc")
        assert config.sampler_config("po_sgmcmc", 0).momentum == 0.1
        assert config.thresholds == (Threshold("accuracy", 0.73),)

    def test_threshold_syntax(self):
        assert parse_thresholds("accuracy:0.7,ksd:0.05:below") == [
            Threshold("accuracy", 0.7), Threshold("ksd", 0.05, below=True)
        ]
        with pytest.raises(ValueError):
            parse_thresholds("accuracy")


class TestRun:
    """cmd_run outputs"""

    def test_one_trace_per_sampler_and_seed(self, tmp_path):
        report = cmd_run(write_config(tmp_path, GAUSSIAN_CONFIG))
        names = sorted(path.name for path in report.traces)
        assert names == [f"{s}_{seed}.csv" for s in ("po_sgmcmc", "sgld") for seed in (1, 2, 3)]
        assert (tmp_path / "out" / "manifest.csv").is_file()
        assert report.exit_code == 0

    def test_trace_schema(self, tmp_path):
        cmd_run(write_config(tmp_path, GAUSSIAN_CONFIG))
        trace = read_trace(tmp_path / "out" / "sgld_1.csv")
        assert trace.metrics == {"mean_error", "cov_error", "ksd", "w2_step"}
        assert [i for i, _ in trace.stream("ksd")] == [10, 20, 30, 40]

    def test_zero_iterations(self, tmp_path):
        report = cmd_run(write_config(tmp_path, GAUSSIAN_CONFIG.replace("run.iterations=40", "run.iterations=0")))
        for path in report.traces:
            assert path.read_text() == "iteration,metric,value\n"
        assert report.manifest.is_file()

    def test_repeat_is_byte_identical_across_thread_counts(self, tmp_path, monkeypatch):
        first_dir, second_dir = tmp_path / "a", tmp_path / "b"
        first_dir.mkdir()
        second_dir.mkdir()
        monkeypatch.setenv("POSTERIORFLOW_THREADS", "1")
        first = cmd_run(write_config(first_dir, GAUSSIAN_CONFIG))
        monkeypatch.setenv("POSTERIORFLOW_THREADS", "4")
        second = cmd_run(write_config(second_dir, GAUSSIAN_CONFIG))
        for a, b in zip(sorted(first.traces), sorted(second.traces)):
            assert a.read_bytes() == b.read_bytes()

    def test_invalid_thread_setting(self, tmp_path, monkeypatch):
        monkeypatch.setenv("POSTERIORFLOW_THREADS", "lots")
        with pytest.raises(ConfigError):
            cmd_run(write_config(tmp_path, GAUSSIAN_CONFIG))

    def test_divergence_keeps_partial_traces(self, tmp_path):
        text = GAUSSIAN_CONFIG + "sampler.sgld.stepsize=1e6\n"
        report = cmd_run(write_config(tmp_path, text))
        assert report.exit_code == 2
        assert {(sampler, seed) for sampler, seed, _ in report.diverged} == {("sgld", 1), ("sgld", 2), ("sgld", 3)}
        assert (tmp_path / "out" / "sgld_1.csv").read_text().startswith("iteration,metric,value\n")

    def test_logistic_target(self, tmp_path):
        cmd_synth("logistic", 100, 3, 0, tmp_path / "data")
        text = ("target.kind=logistic\ntarget.train=data/train.csv\ntarget.test=data/test.csv\n"
                "target.add_bias=true\nrun.samplers=svgd\nrun.iterations=20\nrun.outdir=out\n"
                "sampler.svgd.stepsize=0.01\n")
        cmd_run(write_config(tmp_path, text))
        trace = read_trace(tmp_path / "out" / "svgd_0.csv")
        assert {"accuracy", "log_likelihood", "ksd", "w2_step"} == trace.metrics
        assert all(0.0 <= value <= 1.0 for _, value in trace.stream("accuracy"))

    def test_hooks_use_the_sampler_hook_type(self):
        assert experiment.MetricHook is samplers.MetricHook
        hooks = experiment.build_hooks(GaussianTarget(dim=2), None)
        assert set(hooks) == {"mean_error", "cov_error", "ksd", "w2_step"}


class TestCompare:
    """cmd_compare summaries"""

    def test_median_of_three_seeds(self, tmp_path):
        for seed, value in zip((0, 1, 2), (1.0, 2.0, 9.0)):
            write_trace(tmp_path, f"svgd_{seed}.csv", [(10, "accuracy", value)])
        result = cmd_compare(tmp_path)
        assert result.summary == [("svgd", "accuracy", 10, 3, 2.0, 1.5, 5.5)]

    def test_single_seed_has_no_spread(self, tmp_path):
        write_trace(tmp_path, "sgld_4.csv", [(10, "ksd", 0.5), (20, "ksd", 0.25)])
        result = cmd_compare(tmp_path)
        assert [row[4:] for row in result.summary] == [(0.5, 0.5, 0.5), (0.25, 0.25, 0.25)]

    def test_threshold_never_reached(self, tmp_path):
        write_trace(tmp_path, "svgd_0.csv", [(10, "accuracy", 0.5), (20, "accuracy", 0.6)])
        result = cmd_compare(tmp_path)
        assert result.thresholds[0][4] == NOT_REACHED
        summary = (tmp_path / "thresholds.csv").read_text().splitlines()
        assert summary[1].startswith("svgd,accuracy,0.73,above,-1,0,1,")

    def test_summary_carries_threshold_columns(self, tmp_path):
        write_trace(tmp_path, "svgd_0.csv", [(10, "accuracy", 0.5), (20, "accuracy", 0.8)])
        write_trace(tmp_path, "sgld_0.csv", [(10, "accuracy", 0.5), (20, "accuracy", 0.6)])
        cmd_compare(tmp_path, [Threshold("accuracy", 0.73), Threshold("accuracy", 0.55, below=True)])
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines[0] == ("sampler,metric,iteration,seeds,median,q25,q75,"
                            "iterations_to_accuracy_above_0.73,iterations_to_accuracy_below_0.55")
        assert "sgld,accuracy,20,1,0.6,0.6,0.6,-1,10.0" in lines
        assert "svgd,accuracy,20,1,0.8,0.8,0.8,20.0,10.0" in lines

    def test_plot_files(self, tmp_path):
        write_trace(tmp_path, "svgd_0.csv", [(10, "ksd", 0.5)])
        write_trace(tmp_path, "po_sgmcmc_0.csv", [(10, "ksd", 0.25)])
        cmd_compare(tmp_path)
        lines = (tmp_path / "plot_ksd.csv").read_text().splitlines()
        assert lines[0] == "iteration,svgd_median,svgd_q25,svgd_q75,po_sgmcmc_median,po_sgmcmc_q25,po_sgmcmc_q75"
        assert lines[1] == "10,0.5,0.5,0.5,0.25,0.25,0.25"

    def test_inconsistent_hooks(self, tmp_path):
        write_trace(tmp_path, "svgd_0.csv", [(10, "ksd", 0.5)])
        write_trace(tmp_path, "svgd_1.csv", [(10, "accuracy", 0.5)])
        with pytest.raises(TraceFormatError):
            cmd_compare(tmp_path)

    def test_round_trip_from_run(self, tmp_path):
        report = cmd_run(write_config(tmp_path, GAUSSIAN_CONFIG))
        result = cmd_compare(report.outdir, [Threshold("mean_error", 10.0, below=True)])
        rows = {(s, m, i): n for s, m, i, n, *_ in result.summary}
        assert rows[("sgld", "ksd", 40)] == 3
        assert result.thresholds[0][:2] == ("sgld", "mean_error")

    def test_iterations_to_threshold(self):
        stream = [(10, 0.5), (20, 0.8), (30, 0.9)]
        assert iterations_to_threshold(stream, Threshold("accuracy", 0.75)) == 20
        assert iterations_to_threshold(stream, Threshold("ksd", 0.6, below=True)) == 10
        assert median_iterations([10, NOT_REACHED, NOT_REACHED]) == NOT_REACHED
        assert median_iterations([10, 30, NOT_REACHED]) == 30.0


class TestCli:
    """Exit codes of the click commands"""

    def test_run_config_error_exits_1(self, tmp_path):
        result = CliRunner().invoke(main, ["run", str(write_config(tmp_path, "target.kind=banana\n"))])
        assert result.exit_code == 1
        assert "target.kind" in result.output

    def test_run_divergence_exits_2(self, tmp_path):
        path = write_config(tmp_path, GAUSSIAN_CONFIG + "sampler.sgld.stepsize=1e6\n")
        assert CliRunner().invoke(main, ["run", str(path)]).exit_code == 2

    def test_run_and_compare(self, tmp_path):
        runner = CliRunner()
        assert runner.invoke(main, ["run", str(write_config(tmp_path, GAUSSIAN_CONFIG))]).exit_code == 0
        result = runner.invoke(main, ["compare", str(tmp_path / "out"), "--threshold", "ksd:1.0:below"])
        assert result.exit_code == 0
        assert (tmp_path / "out" / "summary.csv").is_file()

    def test_compare_empty_dir_exits_1(self, tmp_path):
        assert CliRunner().invoke(main, ["compare", str(tmp_path)]).exit_code == 1

    def test_unknown_suite_exits_1(self):
        result = CliRunner().invoke(main, ["validate", "unknown"])
        assert result.exit_code == 1
        assert "momentum-equivalence" in result.output

    def test_validate_lemma2(self):
        assert CliRunner().invoke(main, ["validate", "lemma2"]).exit_code == 0

    def test_synth(self, tmp_path):
        result = CliRunner().invoke(main, ["synth", "logistic", "--n", "50", "--d", "3", "--out", str(tmp_path)])
        assert result.exit_code == 0
        assert (tmp_path / "train.csv").read_text().startswith("label,x1,x2,x3\n")

    def test_synth_invalid_size_exits_1(self, tmp_path):
        result = CliRunner().invoke(main, ["synth", "logistic", "--n", "2", "--out", str(tmp_path)])
        assert result.exit_code == 1


@pytest.mark.slow
def test_momentum_reaches_accuracy_no_later_than_svgd(tmp_path):
    """Synthetic logistic task, N=1000, d=10, M=20, batch 32, 10 seeds, threshold accuracy 0.73"""
    cmd_synth("logistic", 1000, 10, 0, tmp_path / "data")
    text = (
        "target.kind=logistic\ntarget.train=data/train.csv\ntarget.test=data/test.csv\n"
        "run.samplers=svgd,po_sgmcmc\nrun.iterations=2000\nrun.hook_every=10\n"
        "run.seeds=0,1,2,3,4,5,6,7,8,9\nrun.particles=20\nrun.batch_size=32\nrun.outdir=out\n"
        "sampler.svgd.stepsize=0.01\nsampler.po_sgmcmc.stepsize=0.01\nsampler.po_sgmcmc.momentum=0.1\n"
        "compare.thresholds=accuracy:0.73\n"
    )
    report = cmd_run(write_config(tmp_path, text))
    assert report.exit_code == 0
    medians = {row[0]: row[4] for row in cmd_compare(report.outdir).thresholds}
    assert medians["svgd"] != NOT_REACHED and medians["po_sgmcmc"] != NOT_REACHED
    assert medians["po_sgmcmc"] <= medians["svgd"]


if __name__ == "__main__":
    print("Running experiment tests (slow calibration runs skipped)...")
    sys.exit(pytest.main([__file__, "-m", "not slow", "-q"]))
