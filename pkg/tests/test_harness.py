from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dpvb import cli, gibbs
from dpvb.harness import (
    EXIT_CONFIG,
    EXIT_ENGINE,
    EXIT_IO,
    ComponentSummary,
    ExperimentConfig,
    benchmark,
    default_merge_tol,
    estimate_truncation,
    merge_and_prune,
    verify_manifest,
)
from dpvb.model import ConfigError, GroupedDataset, ModelConfig
from dpvb.vb import run_vb

MERGE_EXAMPLE_A = [-2.24, -2.24, -0.55, 0.97, 2.06, 2.06, 2.06, 4.23, 7.12, 7.12]
MERGE_EXAMPLE_V = [0.167, 0.16, 0.12, 0.12, 0.01, 0.01, 0.01, 0.13, 0.13, 0.11]

SMALL = {"polya": {"total": 200, "stride": 5}, "blocked": {"total": 200, "stride": 5},
         "dataset": {"generator": {"n_groups": 20, "n_per_group": 10}, "n_train": 16}}


class TestMergeAndPrune:
    def test_worked_example(self):
        out = merge_and_prune(MERGE_EXAMPLE_A, MERGE_EXAMPLE_V, np.full(10, 0.01), merge_tol=0.1, prune_tol=0.05)
        assert out.count == 5
        np.testing.assert_allclose(out.locations, [-2.24, -0.55, 0.97, 4.23, 7.12], atol=1e-12)
        raw = np.array([0.327, 0.12, 0.12, 0.13, 0.24])
        np.testing.assert_allclose(out.weights, raw / raw.sum(), atol=1e-12)

    def test_all_identical(self):
        out = merge_and_prune([1.0] * 4, [0.1, 0.2, 0.3, 0.4], [0.5] * 4, 0.0, 0.02)
        assert out.count == 1 and out.weights[0] == 1.0

    def test_well_separated_kept(self):
        out = merge_and_prune([0.0, 10.0, 20.0, 30.0], [0.1, 0.2, 0.3, 0.4], [1.0] * 4, 1.0, 0.0)
        assert out.count == 4

    def test_merged_variance_is_mixture_variance(self):
        out = merge_and_prune([0.0, 1.0], [0.25, 0.75], [0.1, 0.3], 2.0, 0.0)
        assert out.locations[0] == pytest.approx(0.75)
        assert out.variances[0] == pytest.approx(0.25 * (0.1 + 0.75**2) + 0.75 * (0.3 + 0.25**2))

    def test_single_linkage_chains(self):
        out = merge_and_prune([0.0, 0.08, 0.16, 0.24], [0.25] * 4, [1.0] * 4, 0.1, 0.0)
        assert out.count == 1

    def test_all_pruned(self):
        with pytest.raises(ConfigError):
            merge_and_prune([0.0, 5.0], [0.5, 0.5], [1.0, 1.0], 0.1, 0.9)

    def test_idempotent_and_normalized(self):
        gen = np.random.default_rng(0)
        for _ in range(1000):
            B = int(gen.integers(1, 12))
            loc = np.sort(gen.normal(0, 3, B))
            w = gen.dirichlet(np.ones(B))
            var = gen.uniform(0.01, 1, B)
            first = merge_and_prune(loc, w, var, 0.3, 0.02)
            assert abs(first.weights.sum() - 1.0) < 1e-10
            second = merge_and_prune(first.locations, first.weights, first.variances, 0.3, 0.02)
            assert second.count == first.count
            np.testing.assert_allclose(second.locations, first.locations, atol=1e-12)
            np.testing.assert_allclose(second.weights, first.weights, atol=1e-12)

    def test_estimate_truncation_default_tol(self):
        data = GroupedDataset.from_groups([[0.0, 0.1]] * 6 + [[10.0, 10.2]] * 4)
        state, _ = run_vb(data, ModelConfig(6, 1.0))
        summary = estimate_truncation(state, prune_tol=0.1, data=data)
        assert default_merge_tol(data) == pytest.approx(0.05 * (10.1 - 0.05))
        assert isinstance(summary, ComponentSummary) and summary.count == 2
        np.testing.assert_allclose(summary.locations, [0.05, 10.1], atol=1e-3)
        with pytest.raises(ConfigError):
            estimate_truncation(state)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig.from_dict({})
        assert cfg.seed == 0 and cfg.model_config() == ModelConfig(10, 1.0)

    @pytest.mark.parametrize("raw", [{"seed": -1}, {"seed": "x"}, {"engines": ["mcmc"]},
                                     {"model": {"truncation": 0}}])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    def test_stage_streams_independent_and_stable(self):
        cfg = ExperimentConfig.from_dict({"seed": 3})
        a = cfg.stage_rng("polya").uniform(3)
        assert np.array_equal(a, cfg.stage_rng("polya").uniform(3))
        assert not np.array_equal(a, cfg.stage_rng("blocked").uniform(3))


def _write_config(tmp_path, raw) -> Path:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def _strip_wall(obj):
    if isinstance(obj, dict):
        return {k: _strip_wall(v) for k, v in obj.items() if "wall_time" not in k}
    if isinstance(obj, list):
        return [_strip_wall(v) for v in obj]
    return obj


def _normalized(path: Path):
    if path.suffix == ".json":
        return _strip_wall(json.loads(path.read_text()))
    if path.suffix == ".jsonl":
        return [_strip_wall(json.loads(line)) for line in path.read_text().splitlines()]
    if path.name == "predictive.csv":
        rows = list(csv.DictReader(path.open()))
        return [{k: v for k, v in r.items() if k != "wall_time_seconds"} for r in rows]
    return path.read_bytes()


class TestCLI:
    def test_pipeline_generate_fit_predict(self, tmp_path):
        cfg = _write_config(tmp_path, SMALL)
        out = tmp_path / "run"
        assert cli.main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.main(["fit-vb", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.main(["predict", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
        rows = list(csv.DictReader((out / "predictive.csv").open()))
        assert len(rows) == 4 and {r["method"] for r in rows} == {"vb"}
        assert list(rows[0]) == ["group_id", "method", "log_predictive", "wall_time_seconds"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["completed_stages"] == ["dataset", "fit-vb", "predict", "compare"]
        assert verify_manifest(out) == []
        report = json.loads((out / "vb" / "report.json").read_text())
        assert report["seed"] == 0 and {"iterations", "converged", "wall_time_seconds"} <= set(report)

    def test_gibbs_subcommands_and_overrides(self, tmp_path):
        out = tmp_path / "run"
        args = ["--out", str(out), "--seed", "5"]
        assert cli.main(["generate", *args]) == 0
        assert cli.main(["fit-gibbs-polya", *args, "--total", "60", "--stride", "3", "--s-aux", "2"]) == 0
        assert cli.main(["fit-gibbs-blocked", *args, "--total", "50", "--stride", "5"]) == 0
        trace = gibbs.Trace.load_jsonl(out / "polya" / "trace.jsonl")
        assert trace.total == 60 and len(trace) == 4 and trace.seed == 5
        assert len(gibbs.Trace.load_jsonl(out / "blocked" / "trace.jsonl")) == 2
        assert cli.main(["predict", *args, "--n-new-draws", "4"]) == 0
        comp = json.loads((out / "comparison.json").read_text())
        assert set(comp["pairs"]) == {"blocked_vs_polya"}

    def test_missing_dataset(self, tmp_path):
        out = tmp_path / "never"
        code = cli.main(["fit-vb", "--data", str(tmp_path / "nope.csv"), "--out", str(out)])
        assert code != 0 and not out.exists()

    def test_external_dataset(self, tmp_path):
        data = GroupedDataset.from_groups([[0.0, 0.1], [0.2, 0.0], [5.0, 5.1], [5.2, 4.9], [0.1, 0.2], [5.0, 5.0]])
        data.to_csv(tmp_path / "d.csv")
        cfg = _write_config(tmp_path, {"dataset": {"n_train": 4}, "model": {"truncation": 4}})
        out = tmp_path / "run"
        assert cli.main(["fit-vb", "--config", str(cfg), "--data", str(tmp_path / "d.csv"), "--out", str(out)]) == 0
        assert not (out / "dataset.csv").exists()

    def test_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        cfg = _write_config(tmp_path, {"model": {"truncation": 3}})
        assert cli.main(["fit-vb", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.main(["generate", "--out", str(blocker / "sub")]) == EXIT_IO

    def test_engine_failure_keeps_partial_outputs(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise gibbs.ChainDivergence("tau2 diverged")

        monkeypatch.setattr(gibbs, "run_chain", boom)
        cfg = _write_config(tmp_path, SMALL)
        out = tmp_path / "run"
        assert cli.main(["reproduce-paper", "--config", str(cfg), "--out", str(out)]) == EXIT_ENGINE
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert manifest["completed_stages"] == ["dataset", "fit-vb"]
        assert (out / "vb" / "state.json").is_file()

    def test_reproduce_is_deterministic(self, tmp_path):
        cfg = _write_config(tmp_path, SMALL)
        runs = [tmp_path / "a", tmp_path / "b"]
        for out in runs:
            assert cli.main(["reproduce-paper", "--config", str(cfg), "--out", str(out)]) == 0
        files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
        for rel in files:
            if rel.name == "manifest.json":
                continue
            assert _normalized(runs[0] / rel) == _normalized(runs[1] / rel), rel
        for rel in ("dataset.csv", "truth.json", "vb/state.json", "polya/components.json"):
            assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes()
        tables = json.loads((runs[0] / "tables.json").read_text())
        assert {"truth", "vb_components", "polya_component_counts", "log_predictive"} <= set(tables)

    def test_manifest_detects_tampering(self, tmp_path):
        cfg = _write_config(tmp_path, SMALL)
        out = tmp_path / "run"
        assert cli.main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
        with (out / "dataset.csv").open("a") as fh:
            fh.write("g999,1.0\n")
        assert verify_manifest(out) == ["dataset.csv"]


class TestBenchmark:
    def test_single_engine_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            benchmark(ExperimentConfig.from_dict(SMALL), engines=["vb"])
        cfg = _write_config(tmp_path, SMALL)
        assert cli.main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "o"),
                         "--engines", "vb"]) == EXIT_CONFIG

    def test_report(self):
        rep = benchmark(ExperimentConfig.from_dict(SMALL), engines=["vb", "blocked", "polya"],
                        blocked_total=300, polya_total=100)
        blocked = rep["runs"]["blocked"]
        assert blocked["iterations"] == 300
        assert blocked["extrapolated_seconds"] == pytest.approx(blocked["seconds_per_scan"] * 2.5e6)
        assert rep["runs"]["polya"]["reference_scans"] == 2e5
        assert rep["ratios"]["blocked/vb"] == pytest.approx(
            blocked["wall_time_seconds"] / rep["runs"]["vb"]["wall_time_seconds"])
        assert set(rep["ratios"]) == {"vb/blocked", "vb/polya", "blocked/vb", "blocked/polya",
                                      "polya/vb", "polya/blocked"}
        assert rep["seed"] == 0
