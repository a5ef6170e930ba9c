"""Command-line entry point: ``upsteer <subcommand> [--config ...] [--out ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from upsteer.conformal import Threshold
from upsteer.harness import (
    MetricsReport,
    RunConfig,
    build_calibration_set,
    collect_traces,
    evaluate,
    generate_scenarios,
    report,
    steer,
    write_episodes,
)
from upsteer.residual import ResidualModel, mixed_sampler, recalibrate, train_residual, write_traces
from upsteer.scenario import ConfigurationError, write_scenarios
from upsteer.steering import parse_method

DEFAULT_METHOD = "CP:BayesianIntent"


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    return cfg.replace(**overrides) if overrides else cfg


def resolve_method(args, cfg: RunConfig):
    spec = args.method or DEFAULT_METHOD
    m = parse_method(spec, cfg.verifier("BayesianIntent"))
    return m


def _threshold_for(args, cfg, method):
    if getattr(args, "threshold", None):
        data = json.loads(Path(args.threshold).read_text())
        if data.get("config_hash") not in (None, cfg.hash):
            raise ConfigurationError("threshold file was calibrated under a different config")
        return Threshold.from_dict(data)
    return build_calibration_set(cfg, methods=[method]).thresholds[method.name]


def cmd_generate(args, cfg, out):
    cfg.save(out / "config.yaml")
    for split in ("calib", "test", "episodes"):
        path = write_scenarios(out / f"scenarios_{split}.jsonl", generate_scenarios(cfg, split), {"config_hash": cfg.hash})
        print(path)


def cmd_calibrate(args, cfg, out):
    method = resolve_method(args, cfg)
    thr = build_calibration_set(cfg, methods=[method]).thresholds[method.name]
    if thr is None:
        raise ConfigurationError(f"{method.name} needs no calibration")
    print(thr.save(out / "threshold.json", method=method.name, config_hash=cfg.hash))
    print(f"q_hat = {thr.q_hat:.6f}")


def cmd_evaluate(args, cfg, out):
    rep = evaluate(cfg, build_calibration_set(cfg))
    print(rep.save(out / "report.json"))


def cmd_steer(args, cfg, out):
    method = resolve_method(args, cfg)
    thr = _threshold_for(args, cfg, method)
    sampler = mixed_sampler(ResidualModel.load(args.model)) if args.model else None
    scenarios = generate_scenarios(cfg, "episodes")
    outcomes, rep = steer(cfg, method, thr, scenarios, sampler)
    print(write_episodes(out / "episodes.jsonl", scenarios, outcomes, method.name, cfg.hash))
    print(rep.save(out / "steer_report.json"))
    print(f"success rate = {rep.value(method.name, 'All', 'success_rate'):.3f}")


def cmd_train_residual(args, cfg, out):
    method = resolve_method(args, cfg)
    thr = _threshold_for(args, cfg, method)
    traces = collect_traces(cfg, method, thr)
    write_traces(out / "traces.jsonl", traces, {"config_hash": cfg.hash})
    model = train_residual(traces, cfg.residual_hyperparams())
    print(model.save(out / "residual_model.json"))


def cmd_recalibrate(args, cfg, out):
    method = resolve_method(args, cfg)
    model = ResidualModel.load(args.model)
    thr = recalibrate(model, generate_scenarios(cfg, "calib"), method, cfg.epsilon, cfg.K, cfg.workers)
    print(thr.save(out / "threshold.json", method=method.name, config_hash=cfg.hash, residual=str(args.model)))
    print(f"q_hat = {thr.q_hat:.6f}")


def cmd_report(args, cfg, out):
    reports = [MetricsReport.load(p) for p in args.inputs]
    merged = reports[0]
    for r in reports[1:]:
        merged = merged.merge(r)
    for path in report(merged, out):
        print(path)


COMMANDS = {
    "generate": (cmd_generate, "write calibration, test and episode scenario sets"),
    "calibrate": (cmd_calibrate, "calibrate one method and write its threshold"),
    "evaluate": (cmd_evaluate, "calibrate the method grid and compute UQ metrics"),
    "steer": (cmd_steer, "run closed-loop steering episodes"),
    "train-residual": (cmd_train_residual, "collect intervention traces and fit the residual corrector"),
    "recalibrate": (cmd_recalibrate, "recalibrate under mixed residual/base sampling"),
    "report": (cmd_report, "turn metric reports into CSV, table and plot files"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upsteer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="flat YAML file of RunConfig keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--method", help="<constructor>:<shaping>, e.g. CP:BayesianIntent")
        p.add_argument("--out", type=Path, default=Path("out"))
        if name in ("steer", "train-residual"):
            p.add_argument("--threshold", type=Path, help="threshold JSON from calibrate")
        if name == "steer":
            p.add_argument("--model", type=Path, help="residual model JSON for mixed sampling")
        if name == "recalibrate":
            p.add_argument("--model", type=Path, required=True, help="residual model JSON")
        if name == "report":
            p.add_argument("inputs", nargs="+", type=Path, help="report.json files to merge")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = load_config(args)
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("seed must be nonnegative")
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](args, cfg, args.out)
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
