"""Experiment orchestration: configs, truncation estimate, full runs, benchmarks."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gibbs
from .model import ConfigError, GroundTruth, GroupedDataset, ModelConfig, StickBreakingMeasure, generate_dataset, study_truth
from .predictive import HeldOutGroup, compare_methods, predict_groups
from .special import Rng
from .vb import VBState, run_vb, save_state

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_ENGINE, EXIT_IO = 0, 2, 3, 4

# per-stage child streams of the experiment seed
STAGES = ("generate", "vb", "polya", "blocked", "predict", "benchmark")

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "path": None,
        "generator": {
            "atoms": list(study_truth().measure.atoms),
            "weights": list(study_truth().measure.weights),
            "mu": 0.0,
            "tau2": 16.0,
            "sigma2": 0.64,
            "n_groups": 60,
            "n_per_group": 80,
        },
        "n_train": 50,
    },
    "model": {"truncation": 10, "alpha": 1.0},
    "engines": ["vb", "polya", "blocked"],
    "vb": {"tol": 1e-6, "max_iter": 1000, "init": "gap"},
    "polya": {"total": 20000, "burnin_frac": 0.8, "stride": 25, "s_aux": 3},
    "blocked": {"total": 10000, "burnin_frac": 0.8, "stride": 25},
    "predict": {"n_new_draws": 32},
    "truncation": {"merge_tol": None, "prune_tol": 0.02},
    "benchmark": {"engines": ["vb", "blocked"], "blocked_total": 100000, "polya_total": 2000},
}


class EngineFailure(RuntimeError):
    """An engine stage raised; partial outputs are kept."""


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, obj: dict | None = None) -> "ExperimentConfig":
        raw = _merge(DEFAULT_CONFIG, obj or {})
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(obj)

    def validate(self) -> None:
        seed = self.raw.get("seed")
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("config needs an integer 'seed' in [0, 2**64)")
        self.model_config()
        for name in self.raw["engines"]:
            if name not in ("vb", "polya", "blocked"):
                raise ConfigError(f"unknown engine {name!r}")
        if self.raw["dataset"]["path"] is None and not self.raw["dataset"].get("generator"):
            raise ConfigError("dataset needs a 'path' or a 'generator'")

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def model_config(self) -> ModelConfig:
        m = self.raw["model"]
        return ModelConfig(int(m["truncation"]), float(m["alpha"]))

    def stage_rng(self, stage: str) -> Rng:
        return Rng(self.seed).spawn(len(STAGES))[STAGES.index(stage)]

    def truth(self) -> GroundTruth:
        gen = self.raw["dataset"]["generator"]
        w = np.asarray(gen["weights"], dtype=float)
        return GroundTruth(StickBreakingMeasure(np.asarray(gen["atoms"], dtype=float), w / w.sum()),
                           float(gen["mu"]), float(gen["tau2"]), float(gen["sigma2"]))


# -- truncation estimate -----------------------------------------------------

@dataclass
class ComponentSummary:
    locations: np.ndarray
    weights: np.ndarray
    variances: np.ndarray

    @property
    def count(self) -> int:
        return int(self.locations.size)

    def to_json(self) -> dict:
        return {"count": self.count, "locations": self.locations.tolist(),
                "weights": self.weights.tolist(), "variances": self.variances.tolist()}


def merge_and_prune(locations, weights, variances, merge_tol: float, prune_tol: float) -> ComponentSummary:
    """Single-linkage merge of nearby locations, then drop light components.

    A merged component sits at the weight-averaged location, carries the summed
    weight and the mixture variance of its members.  Surviving weights are
    renormalized to sum to one.
    """
    loc = np.asarray(locations, dtype=float)
    w = np.asarray(weights, dtype=float)
    var = np.asarray(variances, dtype=float)
    if merge_tol < 0 or not 0 <= prune_tol < 1:
        raise ConfigError("need merge_tol >= 0 and prune_tol in [0, 1)")
    order = np.argsort(loc, kind="stable")
    breaks = np.flatnonzero(np.diff(loc[order]) > merge_tol) + 1
    merged_loc, merged_w, merged_var = [], [], []
    for block in np.split(order, breaks):
        wb = w[block]
        total = float(wb.sum())
        if total > 0:
            center = float(np.dot(wb, loc[block]) / total)
            spread = float(np.dot(wb, var[block] + (loc[block] - center) ** 2) / total)
        else:
            center, spread = float(loc[block].mean()), float(var[block].mean())
        merged_loc.append(center)
        merged_w.append(total)
        merged_var.append(spread)
    merged_w = np.asarray(merged_w)
    keep = merged_w >= prune_tol
    if not keep.any() or merged_w[keep].sum() <= 0:
        raise ConfigError(f"prune_tol={prune_tol} removes every component")
    kept_w = merged_w[keep]
    return ComponentSummary(np.asarray(merged_loc)[keep], kept_w / kept_w.sum(),
                            np.asarray(merged_var)[keep])


def default_merge_tol(data: GroupedDataset) -> float:
    means = data.means
    return 0.05 * float(means.max() - means.min())


def estimate_truncation(state: VBState, merge_tol: float | None = None, prune_tol: float = 0.02,
                        data: GroupedDataset | None = None) -> ComponentSummary:
    """Collapse duplicate and empty components of a converged variational fit.

    Without an explicit ``merge_tol`` the default is 5% of the range of the
    group means of ``data``.
    """
    if merge_tol is None:
        if data is None:
            raise ConfigError("merge_tol or data is required")
        merge_tol = default_merge_tol(data)
    return merge_and_prune(state.a, state.expected_weights(), state.b2, merge_tol, prune_tol)


# -- file helpers ------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, stages: list[str], status: str, error: str | None = None) -> None:
    files = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[path.relative_to(out).as_posix()] = sha256_file(path)
    _write_json(out / "manifest.json", {"completed_stages": stages, "status": status,
                                        "error": error, "files": files})


def verify_manifest(out) -> list[str]:
    """Paths whose content no longer matches the manifest hash."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    bad = []
    for rel, digest in manifest["files"].items():
        path = out / rel
        if not path.is_file() or sha256_file(path) != digest:
            bad.append(rel)
    return bad


def write_predictive_csv(path: Path, results) -> None:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["group_id", "method", "log_predictive", "wall_time_seconds"])
    for res in results:
        writer.writerow([res.group_id, res.method, repr(res.log_predictive), repr(res.wall_time_seconds)])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_predictive_csv(path) -> dict[str, dict[str, float]]:
    by_method: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            by_method.setdefault(row["method"], {})[row["group_id"]] = float(row["log_predictive"])
    return by_method


def comparison_report(by_method: dict[str, dict[str, float]]) -> dict:
    report = {"means": {m: float(np.mean(list(v.values()))) for m, v in sorted(by_method.items())},
              "pairs": {}}
    methods = sorted(by_method)
    for i, first in enumerate(methods):
        for second in methods[i + 1:]:
            ids = [g for g in by_method[first] if g in by_method[second]]
            if len(ids) < 2:
                continue
            cmp = compare_methods([by_method[first][g] for g in ids], [by_method[second][g] for g in ids])
            report["pairs"][f"{first}_vs_{second}"] = cmp.to_json()
    return report


# -- stages ------------------------------------------------------------------

def load_or_generate(cfg: ExperimentConfig, out: Path | None = None) -> tuple[GroupedDataset, GroundTruth | None]:
    ds = cfg["dataset"]
    if ds["path"] is not None:
        path = Path(ds["path"])
        if not path.is_file():
            raise FileNotFoundError(f"dataset not found: {path}")
        return GroupedDataset.read_csv(path), None
    gen = ds["generator"]
    truth = cfg.truth()
    data = generate_dataset(cfg.stage_rng("generate"), truth, int(gen["n_groups"]), int(gen["n_per_group"]))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        data.to_csv(out / "dataset.csv")
        _write_json(out / "truth.json", truth.to_json())
    return data, truth


def split_dataset(cfg: ExperimentConfig, data: GroupedDataset) -> tuple[GroupedDataset, GroupedDataset]:
    return data.split(int(cfg["dataset"]["n_train"]))


def fit_vb_stage(cfg: ExperimentConfig, train: GroupedDataset, out: Path) -> tuple[VBState, dict]:
    p = cfg["vb"]
    state, report = run_vb(train, cfg.model_config(), init=p["init"], tol=float(p["tol"]),
                           max_iter=int(p["max_iter"]))
    t = cfg["truncation"]
    merge_tol = t["merge_tol"] if t["merge_tol"] is not None else default_merge_tol(train)
    summary = estimate_truncation(state, merge_tol, float(t["prune_tol"]))
    (out / "vb").mkdir(parents=True, exist_ok=True)
    save_state(state, out / "vb" / "state.json")
    _write_json(out / "vb" / "report.json", {**report.to_json(), "seed": cfg.seed})
    _write_json(out / "vb" / "components.json", {**summary.to_json(), "merge_tol": merge_tol,
                                                 "prune_tol": float(t["prune_tol"]), "seed": cfg.seed})
    log.info("vb: %d iterations, converged=%s, %d components", report.iterations, report.converged, summary.count)
    return state, {"engine": "vb", "wall_time_seconds": report.wall_time_seconds,
                   "iterations": report.iterations}


def fit_gibbs_stage(cfg: ExperimentConfig, engine: str, train: GroupedDataset, out: Path) -> tuple[gibbs.Trace, dict]:
    p = cfg[engine]
    trace = gibbs.run_chain(engine, train, cfg.model_config(), cfg.stage_rng(engine), total=int(p["total"]),
                            burnin_frac=float(p["burnin_frac"]), stride=int(p["stride"]),
                            s_aux=int(p.get("s_aux", 3)))
    trace.seed = cfg.seed
    (out / engine).mkdir(parents=True, exist_ok=True)
    trace.save_jsonl(out / engine / "trace.jsonl")
    hist = gibbs.count_components(trace)
    _write_json(out / engine / "components.json", {"histogram": {str(k): v for k, v in hist.items()},
                                                    "seed": cfg.seed, "tau2_skips": trace.tau2_skips})
    log.info("%s: %d scans, %d retained, %.2fs", engine, trace.total, len(trace), trace.wall_time_seconds)
    return trace, {"engine": engine, "wall_time_seconds": trace.wall_time_seconds, "iterations": trace.total}


def held_out_groups(test: GroupedDataset) -> list[HeldOutGroup]:
    return [HeldOutGroup(test.group(j), test.ids[j]) for j in range(test.n_groups)]


def predict_stage(cfg: ExperimentConfig, fitted: dict, test: GroupedDataset, out: Path) -> dict:
    groups = held_out_groups(test)
    rng = cfg.stage_rng("predict")
    n_new = int(cfg["predict"]["n_new_draws"])
    results = []
    for method in sorted(fitted):
        results.extend(predict_groups(method, fitted[method], groups, rng, n_new))
    write_predictive_csv(out / "predictive.csv", results)
    by_method: dict[str, dict[str, float]] = {}
    for res in results:
        by_method.setdefault(res.method, {})[res.group_id] = res.log_predictive
    report = comparison_report(by_method)
    _write_json(out / "comparison.json", report)
    return report


def run_experiment(cfg: ExperimentConfig, out) -> Path:
    """Dataset, every configured engine, predictive scores and comparisons.

    Raises FileNotFoundError before writing anything if the dataset path is
    missing; raises EngineFailure after writing a partial manifest if an
    engine fails.
    """
    out = Path(out)
    if cfg["dataset"]["path"] is not None and not Path(cfg["dataset"]["path"]).is_file():
        raise FileNotFoundError(f"dataset not found: {cfg['dataset']['path']}")
    out.mkdir(parents=True, exist_ok=True)
    stages: list[str] = []
    try:
        data, truth = load_or_generate(cfg, out)
        stages.append("dataset")
        train, test = split_dataset(cfg, data)
        fitted, bench = {}, []
        for engine in cfg["engines"]:
            if engine == "vb":
                fitted["vb"], timing = fit_vb_stage(cfg, train, out)
            else:
                fitted[engine], timing = fit_gibbs_stage(cfg, engine, train, out)
            bench.append(timing)
            stages.append(f"fit-{engine}")
        predict_stage(cfg, fitted, test, out)
        stages.append("predict")
        _write_json(out / "benchmark.json", {"runs": bench, "seed": cfg.seed})
        stages.append("benchmark")
    except (ConfigError, FileNotFoundError):
        write_manifest(out, stages, "failed")
        raise
    except Exception as exc:
        write_manifest(out, stages, "failed", repr(exc))
        raise EngineFailure(f"stage after {stages[-1] if stages else 'start'} failed: {exc}") from exc
    write_manifest(out, stages, "complete")
    return out


def benchmark(cfg: ExperimentConfig, engines=None, blocked_total=None, polya_total=None) -> dict:
    """Wall times of the selected engines on the training split and their ratios.

    Gibbs engines also report time per scan and the extrapolated cost of the
    long runs (2e5 Polya scans, 2.5e6 blocked scans).
    """
    b = cfg["benchmark"]
    engines = list(engines or b["engines"])
    if len(set(engines)) < 2:
        raise ConfigError("benchmark needs at least two engines")
    data, _ = load_or_generate(cfg)
    train, _ = split_dataset(cfg, data)
    model = cfg.model_config()
    totals = {"blocked": int(blocked_total or b["blocked_total"]), "polya": int(polya_total or b["polya_total"])}
    reference_scans = {"blocked": 2.5e6, "polya": 2e5}
    runs = {}
    for engine in engines:
        if engine == "vb":
            p = cfg["vb"]
            start = time.perf_counter()
            _, report = run_vb(train, model, init=p["init"], tol=float(p["tol"]), max_iter=int(p["max_iter"]))
            runs["vb"] = {"wall_time_seconds": time.perf_counter() - start, "iterations": report.iterations}
        else:
            p = cfg[engine]
            start = time.perf_counter()
            gibbs.run_chain(engine, train, model, cfg.stage_rng("benchmark"), total=totals[engine],
                            burnin_frac=float(p["burnin_frac"]), stride=int(p["stride"]),
                            s_aux=int(p.get("s_aux", 3)))
            wall = time.perf_counter() - start
            per_scan = wall / totals[engine]
            runs[engine] = {"wall_time_seconds": wall, "iterations": totals[engine],
                            "seconds_per_scan": per_scan,
                            "reference_scans": reference_scans[engine],
                            "extrapolated_seconds": per_scan * reference_scans[engine]}
    ratios = {}
    for first in engines:
        for second in engines:
            if first != second:
                ratios[f"{first}/{second}"] = runs[first]["wall_time_seconds"] / runs[second]["wall_time_seconds"]
    extrapolated = {}
    if "vb" in runs:
        for engine in engines:
            if engine != "vb":
                extrapolated[f"{engine}_reference_scale/vb"] = runs[engine]["extrapolated_seconds"] / runs["vb"]["wall_time_seconds"]
    return {"seed": cfg.seed, "runs": runs, "ratios": ratios, "extrapolated_ratios": extrapolated}


def study_tables(cfg: ExperimentConfig, out) -> dict:
    """Desk-scale versions of the four tables of the simulation study."""
    out = Path(out)
    truth = json.loads((out / "truth.json").read_text(encoding="utf-8")) if (out / "truth.json").is_file() else None
    tables: dict = {"truth": truth}
    if (out / "vb" / "report.json").is_file():
        rep = json.loads((out / "vb" / "report.json").read_text(encoding="utf-8"))
        comps = json.loads((out / "vb" / "components.json").read_text(encoding="utf-8"))
        tables["vb_components"] = {"expected_weights": rep["expected_weights"], "expected_atoms": rep["a"],
                               "iterations": rep["iterations"], "merged": comps}
    if (out / "polya" / "components.json").is_file():
        tables["polya_component_counts"] = json.loads((out / "polya" / "components.json").read_text(encoding="utf-8"))
    if (out / "predictive.csv").is_file():
        tables["log_predictive"] = read_predictive_csv(out / "predictive.csv")
        tables["t_tests"] = json.loads((out / "comparison.json").read_text(encoding="utf-8"))
    return tables

