"""Command-line entry point: ``dpvb <subcommand> --config cfg.json --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .gibbs import Trace
from .harness import EXIT_CONFIG, EXIT_ENGINE, EXIT_IO, EXIT_OK, EngineFailure, ExperimentConfig
from .model import ConfigError
from .special import DomainError
from .vb import load_state

log = logging.getLogger("dpvb")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config; missing keys take defaults")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--data", type=Path, help="dataset CSV (group_id,value); overrides the config")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpvb", description="DP random-effects: VB and Gibbs engines")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("generate", help="draw a synthetic dataset from the configured truth"))

    p = sub.add_parser("fit-vb", help="variational fit on the training groups")
    _add_common(p)
    p.add_argument("--truncation", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--init", choices=["gap", "quantile"])

    for engine in ("polya", "blocked"):
        p = sub.add_parser(f"fit-gibbs-{engine}", help=f"{engine} Gibbs chain on the training groups")
        _add_common(p)
        p.add_argument("--truncation", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--total", type=int, help="number of scans")
        p.add_argument("--burnin-frac", type=float)
        p.add_argument("--stride", type=int)
        if engine == "polya":
            p.add_argument("--s-aux", type=int, help="auxiliary atoms per update")

    p = sub.add_parser("predict", help="log predictive of held-out groups for every fitted engine")
    _add_common(p)
    p.add_argument("--n-new-draws", type=int)

    _add_common(sub.add_parser("compare", help="two-sample t-tests on predictive.csv"))

    p = sub.add_parser("benchmark", help="wall-time comparison of two or more engines")
    _add_common(p)
    p.add_argument("--engines", nargs="+", choices=["vb", "polya", "blocked"])
    p.add_argument("--blocked-total", type=int)
    p.add_argument("--polya-total", type=int)

    p = sub.add_parser("reproduce-paper", help="full simulation study at desk scale")
    _add_common(p)
    p.add_argument("--benchmark", action="store_true", help="also run the timing benchmark")
    return parser


def _config(args) -> ExperimentConfig:
    raw = {}
    if args.config is not None:
        try:
            raw = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.data is not None:
        raw.setdefault("dataset", {})["path"] = str(args.data)
    overrides = {
        ("model", "truncation"): "truncation", ("model", "alpha"): "alpha",
        ("vb", "tol"): "tol", ("vb", "max_iter"): "max_iter", ("vb", "init"): "init",
        ("predict", "n_new_draws"): "n_new_draws",
    }
    for (section, key), attr in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            raw.setdefault(section, {})[key] = value
    if args.command.startswith("fit-gibbs-"):
        engine = args.command.removeprefix("fit-gibbs-")
        for key in ("total", "burnin_frac", "stride", "s_aux"):
            value = getattr(args, key, None)
            if value is not None:
                raw.setdefault(engine, {})[key] = value
    if args.command == "benchmark":
        for key in ("engines", "blocked_total", "polya_total"):
            value = getattr(args, key)
            if value is not None:
                raw.setdefault("benchmark", {})[key] = value
    return ExperimentConfig.from_dict(raw)


def _dataset(cfg: ExperimentConfig, out: Path):
    """Configured CSV, else a dataset already generated in ``out``, else generate one."""
    if cfg["dataset"]["path"] is None and (out / "dataset.csv").is_file():
        cfg.raw["dataset"]["path"] = str(out / "dataset.csv")
    data, _ = harness.load_or_generate(cfg, out)
    return harness.split_dataset(cfg, data)


def _record(out: Path, stage: str) -> None:
    path = out / "manifest.json"
    stages = []
    if path.is_file():
        stages = json.loads(path.read_text(encoding="utf-8"))["completed_stages"]
    if stage not in stages:
        stages.append(stage)
    harness.write_manifest(out, stages, "complete")


def _run(args) -> None:
    cfg = _config(args)
    out: Path = args.out
    path = cfg["dataset"]["path"]
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    cmd = args.command

    if cmd == "reproduce-paper":
        harness.run_experiment(cfg, out)
        if args.benchmark:
            harness._write_json(out / "benchmark_timing.json", harness.benchmark(cfg))
        harness._write_json(out / "tables.json", harness.study_tables(cfg, out))
        _record(out, "tables")
        return

    if cmd == "generate":
        if path is not None:
            raise ConfigError("generate needs a generator config, not a dataset path")
        harness.load_or_generate(cfg, out)
        _record(out, "dataset")
        return

    if cmd == "compare":
        report = harness.comparison_report(harness.read_predictive_csv(out / "predictive.csv"))
        harness._write_json(out / "comparison.json", report)
        _record(out, "compare")
        return

    if cmd == "benchmark":
        out.mkdir(parents=True, exist_ok=True)
        harness._write_json(out / "benchmark.json", harness.benchmark(cfg))
        _record(out, "benchmark")
        return

    train, test = _dataset(cfg, out)
    try:
        if cmd == "fit-vb":
            harness.fit_vb_stage(cfg, train, out)
            _record(out, "fit-vb")
        elif cmd.startswith("fit-gibbs-"):
            engine = cmd.removeprefix("fit-gibbs-")
            harness.fit_gibbs_stage(cfg, engine, train, out)
            _record(out, f"fit-{engine}")
        elif cmd == "predict":
            fitted = {}
            if (out / "vb" / "state.json").is_file():
                fitted["vb"] = load_state(out / "vb" / "state.json")
            for engine in ("polya", "blocked"):
                if (out / engine / "trace.jsonl").is_file():
                    fitted[engine] = Trace.load_jsonl(out / engine / "trace.jsonl")
            if not fitted:
                raise FileNotFoundError(f"no fitted engine outputs under {out}")
            harness.predict_stage(cfg, fitted, test, out)
            _record(out, "predict")
    except (ConfigError, DomainError, OSError):
        raise
    except Exception as exc:
        raise EngineFailure(f"{cmd} failed: {exc}") from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except EngineFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
