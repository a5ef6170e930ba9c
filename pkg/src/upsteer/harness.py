"""Experiment orchestration: configuration, scenario splits, calibration,
evaluation sweeps, closed-loop runs and report files.

Every random draw is keyed on ``(config.seed, split, scenario index)`` so
results do not depend on evaluation order or on the number of workers.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import typing
import warnings
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from upsteer.baselines import InterventionLog, variance_gated_episode
from upsteer.conformal import ScoreFamily, Threshold
from upsteer.experiment import (
    calibrate_method,
    evaluate_sequence,
    parallel_map,
    score_sequence,
    simulate_sequence,
    summarize,
)
from upsteer.residual import (
    ResidualHyperparams,
    ResidualModel,
    collect_intervention,
    mixed_sampler,
    recalibrate,
    train_residual,
)
from upsteer.scenario import CATEGORIES, Category, ConfigurationError, MixConfig, Scenario, generate_scenario
from upsteer.steering import Confusion, Constructor, EpisodeOutcome, Method, run_episode
from upsteer.verifier import MiscalibrationProfile, Shaping, VerifierConfig
from upsteer.world import Mode, sample_rollouts

log = logging.getLogger(__name__)

SPLITS = {"calib": 1, "test": 2, "deploy": 3, "episodes": 4}
TRACE_STREAM = 303
VARIANCE_STREAM = 404
UQ_METRICS = ("coverage", "clarification_rate", "set_size")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epsilon: float = 0.15
    K: int = 10
    M: int = 2
    n_calib: int = 80
    n_test: int = 200
    n_episodes: int = 40
    n_deploy: int = 120
    frac_ambiguous: float = 0.5
    frac_incapable: float = 0.125
    temperature: float = 0.1
    majority_bias: float = 1.0
    noise_sigma: float = 0.1
    delta: float = 0.05
    prior_concentration: Optional[float] = None
    prior_resolution: Optional[float] = None
    constructors: tuple = ("CP", "SimpleSet", "APS")
    shapings: tuple = ("Vanilla", "BayesianIntent")
    score_family: str = "MinMin"
    max_clarifications: int = 3
    workers: int = 1
    ambiguous_fail: tuple = (0.0, 0.1)
    ambiguous_left_share: tuple = (0.4, 0.6)
    capable_instructed: tuple = (0.5, 0.9)
    capable_fail: tuple = (0.0, 0.1)
    incapable_instructed: tuple = (0.0, 0.02)
    incapable_fail: tuple = (0.1, 0.3)
    incapable_mode: str = "PlaceLeft"
    waypoint_noise_sigma: float = 0.05
    grasp_success_prob: float = 0.95
    chunk_length: int = 4
    horizon: int = 16
    residual_lr: float = 1e-4
    gate_lr: float = 1e-3
    residual_batch_size: int = 64
    residual_iterations: int = 20000
    residual_hidden: int = 32
    residual_seed: int = 0
    gate_threshold: float = 0.5
    intervention_budget: int = 10
    variance_threshold: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        if self.M != 2:
            raise ConfigurationError("the simulated task has exactly two phases (M = 2)")
        if self.K < 1 or self.workers < 1:
            raise ConfigurationError("K and workers must be positive")
        if min(self.n_calib, self.n_test, self.n_episodes, self.n_deploy) < 1:
            raise ConfigurationError("split sizes must be positive")
        fa, fi = self.frac_ambiguous, self.frac_incapable
        if not (0 <= fa <= 1 and 0 <= fi <= 1 and fa + fi <= 1):
            raise ConfigurationError("category fractions must be in [0, 1] and sum to at most 1")
        try:
            [Constructor(c) for c in self.constructors]
            [Shaping(s) for s in self.shapings]
            ScoreFamily(self.score_family)
            Mode(self.incapable_mode)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        self.mix()
        self.profile()

    # -- derived objects --------------------------------------------------

    def mix(self) -> MixConfig:
        return MixConfig(
            ambiguous_fail=self.ambiguous_fail,
            ambiguous_left_share=self.ambiguous_left_share,
            capable_instructed=self.capable_instructed,
            capable_fail=self.capable_fail,
            incapable_instructed=self.incapable_instructed,
            incapable_fail=self.incapable_fail,
            incapable_mode=Mode(self.incapable_mode),
            waypoint_noise_sigma=self.waypoint_noise_sigma,
            grasp_success_prob=self.grasp_success_prob,
            chunk_length=self.chunk_length,
            horizon=self.horizon,
        )

    def profile(self) -> MiscalibrationProfile:
        return MiscalibrationProfile(self.temperature, self.majority_bias, self.noise_sigma)

    def verifier(self, shaping) -> VerifierConfig:
        return VerifierConfig(
            Shaping(shaping), self.profile(), self.delta, self.prior_concentration, self.prior_resolution
        )

    def method(self, constructor, shaping) -> Method:
        return Method(Constructor(constructor), self.verifier(shaping), ScoreFamily(self.score_family))

    def methods(self) -> list:
        return [self.method(c, s) for c in self.constructors for s in self.shapings]

    def residual_hyperparams(self) -> ResidualHyperparams:
        return ResidualHyperparams(
            lr=self.residual_lr,
            gate_lr=self.gate_lr,
            batch_size=self.residual_batch_size,
            iterations=self.residual_iterations,
            hidden=self.residual_hidden,
            seed=self.residual_seed,
            gate_threshold=self.gate_threshold,
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @property
    def hash(self) -> str:
        # worker count never changes results, so it stays out of the hash
        d = {k: v for k, v in self.to_dict().items() if k != "workers"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return _coerce(self, changes)

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        return _coerce(cls(), data or {})

    @classmethod
    def load(cls, path) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text())
        if data is not None and not isinstance(data, dict):
            raise ConfigurationError("config file must be a flat key/value mapping")
        return cls.from_mapping(data)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _coerce(base: RunConfig, changes: dict) -> RunConfig:
    hints = typing.get_type_hints(RunConfig)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(changes) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, value in changes.items():
        hint = hints[key]
        try:
            if value is None:
                if hint is not Optional[float]:
                    raise TypeError("null not allowed")
                out[key] = None
            elif hint is tuple:
                if isinstance(value, str):
                    value = [v.strip() for v in value.split(",")]
                default = getattr(base, key)
                if default and isinstance(default[0], float):
                    value = [float(v) for v in value]
                out[key] = tuple(value)
            elif hint is bool or isinstance(value, (dict, list)):
                raise TypeError("expected a scalar")
            elif hint is int:
                if float(value) != int(value):
                    raise TypeError("expected an integer")
                out[key] = int(value)
            elif hint in (float, Optional[float]):
                out[key] = float(value)
            else:
                out[key] = str(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key}: {value!r} ({exc})") from exc
    return dataclasses.replace(base, **out)


# -- scenarios ---------------------------------------------------------------


def category_plan(config: RunConfig, n: int, rng: np.random.Generator) -> list:
    n_amb = int(round(n * config.frac_ambiguous))
    n_inc = min(n - n_amb, int(round(n * config.frac_incapable)))
    plan = [Category.AMBIGUOUS] * n_amb + [Category.INCAPABLE] * n_inc
    plan += [Category.CAPABLE] * (n - len(plan))
    return [plan[i] for i in rng.permutation(n)]


def split_size(config: RunConfig, split: str) -> int:
    return {
        "calib": config.n_calib,
        "test": config.n_test,
        "deploy": config.n_deploy,
        "episodes": config.n_episodes,
    }[split]


def generate_scenarios(
    config: RunConfig,
    split: str,
    n: Optional[int] = None,
    categories: Optional[Sequence[Category]] = None,
) -> list:
    """Scenario set for one split; scenario ``i`` depends only on (seed, split, i)."""
    tag = SPLITS[split]
    n = split_size(config, split) if n is None else n
    if categories is None:
        categories = category_plan(config, n, np.random.default_rng([config.seed, tag, 0]))
    elif len(categories) != n:
        raise ValueError("need one category per scenario")
    mix = config.mix()
    return [
        generate_scenario(cat, mix, np.random.default_rng([config.seed, tag, 1, i]), index=i)
        for i, cat in enumerate(categories)
    ]


def assert_disjoint(a: Sequence[Scenario], b: Sequence[Scenario]):
    overlap = {s.seed for s in a} & {s.seed for s in b}
    if overlap:
        raise ValueError(f"{len(overlap)} scenario seeds shared between splits")


# -- calibration and UQ evaluation -------------------------------------------


@dataclass
class Calibration:
    thresholds: dict  # method name -> Threshold or None
    config_hash: str
    scored: dict = field(default_factory=dict, repr=False)  # shaping -> scored sequences


def simulate_all(config: RunConfig, scenarios: Sequence[Scenario], sampler=None) -> list:
    fn = partial(simulate_sequence, K=config.K, sampler=sampler or sample_rollouts)
    return parallel_map(fn, list(scenarios), config.workers)


def score_all(config: RunConfig, sims: Sequence) -> dict:
    return {s: [score_sequence(seq, config.verifier(s)) for seq in sims] for s in config.shapings}


def build_calibration_set(
    config: RunConfig,
    scenarios: Optional[Sequence[Scenario]] = None,
    sampler=None,
    methods: Optional[Sequence[Method]] = None,
) -> Calibration:
    """Simulate the calibration split once and calibrate every method in the grid."""
    scenarios = generate_scenarios(config, "calib") if scenarios is None else scenarios
    sims = simulate_all(config, scenarios, sampler)
    scored = score_all(config, sims)
    methods = config.methods() if methods is None else methods
    thresholds = {
        m.name: calibrate_method(m, scored[m.verifier.shaping.value], config.epsilon) for m in methods
    }
    return Calibration(thresholds, config.hash, scored)


@dataclass(frozen=True)
class MetricsReport:
    config_hash: str
    seed: int
    records: tuple  # (method, category, metric, value), sorted

    def value(self, method: str, category: str, metric: str) -> float:
        for m, c, k, v in self.records:
            if (m, c, k) == (method, category, metric):
                return v
        raise KeyError((method, category, metric))

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        if other.config_hash != self.config_hash:
            raise ValueError(
                f"refusing to merge reports from different configs ({self.config_hash} vs {other.config_hash})"
            )
        merged = {r[:3]: r for r in self.records}
        merged.update({r[:3]: r for r in other.records})
        return MetricsReport(self.config_hash, self.seed, _sorted_records(merged.values()))

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "records": [list(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["config_hash"], int(d["seed"]), _sorted_records(tuple(r) for r in d["records"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


_CATEGORY_ORDER = {c.value: i for i, c in enumerate(CATEGORIES)}
_CATEGORY_ORDER["All"] = len(CATEGORIES)


def _sorted_records(records) -> tuple:
    return tuple(
        sorted(
            ((str(m), str(c), str(k), float(v)) for m, c, k, v in records),
            key=lambda r: (r[0], _CATEGORY_ORDER.get(r[1], 99), r[1], r[2]),
        )
    )


def uq_results(config: RunConfig, calibration: Calibration, scored: dict, methods=None) -> dict:
    """Per-method list of SequenceResults over pre-scored test sequences."""
    methods = config.methods() if methods is None else methods
    out = {}
    for m in methods:
        thr = calibration.thresholds.get(m.name)
        out[m.name] = [
            evaluate_sequence(m, thr, config.epsilon, phases) for phases in scored[m.verifier.shaping.value]
        ]
    return out


def evaluate(
    config: RunConfig,
    calibration: Calibration,
    scenarios: Optional[Sequence[Scenario]] = None,
    sampler=None,
) -> MetricsReport:
    """Coverage, clarification rate and set size per method and category on fresh sequences."""
    if calibration.config_hash != config.hash:
        raise ValueError("thresholds were calibrated under a different config")
    scenarios = generate_scenarios(config, "test") if scenarios is None else scenarios
    sims = simulate_all(config, scenarios, sampler)
    results = uq_results(config, calibration, score_all(config, sims))
    records = []
    for name, res in results.items():
        for cat in CATEGORIES:
            sl = [r for r, s in zip(res, scenarios) if s.category is cat]
            if not sl:
                continue
            for metric, v in summarize(sl).items():
                records.append((name, cat.value, metric, v))
    return MetricsReport(config.hash, config.seed, _sorted_records(records))


# -- closed loop -------------------------------------------------------------


def _episode(method, thr, K, epsilon, max_clar, sampler, scenario):
    return run_episode(scenario, method, thr, K, epsilon, max_clar, sampler or sample_rollouts)


def run_closed_loop(
    config: RunConfig,
    method: Method,
    thr: Optional[Threshold],
    scenarios: Sequence[Scenario],
    sampler=None,
) -> list:
    fn = partial(_episode, method, thr, config.K, config.epsilon, config.max_clarifications, sampler)
    return parallel_map(fn, list(scenarios), config.workers)


def trace_rng(scenario: Scenario) -> np.random.Generator:
    return np.random.default_rng([scenario.seed, TRACE_STREAM])


def episode_intervention(scenario: Scenario, outcome: EpisodeOutcome) -> InterventionLog:
    """Human effort for one steered episode.

    Each clarification costs one step; an intervention adds every step the
    expert spends correcting the episode from the state where it was requested.
    """
    T = scenario.policy_params.horizon
    human = outcome.clarification_count
    success = outcome.success
    if outcome.intervene_state is not None:
        trace = collect_intervention(scenario, rng=trace_rng(scenario), start_state=outcome.intervene_state)
        if trace is None:
            human += T
        else:
            human += trace.human_steps
            success = True
    return InterventionLog(human, 2 * T, success)


def intervention_rate(logs: Sequence[InterventionLog]) -> float:
    """Mean of human steps over trajectory length, skipping empty trajectories."""
    rates = []
    for lg in logs:
        if lg.length <= 0:
            warnings.warn("skipping a zero-length trajectory in the intervention rate")
            continue
        rates.append(lg.human_steps / lg.length)
    return float(np.mean(rates)) if rates else float("nan")


def _variance_episode(K, threshold, scenario):
    rng = np.random.default_rng([scenario.seed, VARIANCE_STREAM])
    return variance_gated_episode(scenario, K, threshold, rng)


def run_variance_gated(config: RunConfig, scenarios: Sequence[Scenario]) -> list:
    fn = partial(_variance_episode, config.K, config.variance_threshold)
    return parallel_map(fn, list(scenarios), config.workers)


def closed_loop_records(method_name: str, scenarios, outcomes, logs=None) -> list:
    records = []
    groups = [(c.value, [i for i, s in enumerate(scenarios) if s.category is c]) for c in CATEGORIES]
    groups.append(("All", list(range(len(scenarios)))))
    for cat, idx in groups:
        if not idx:
            continue
        outs = [outcomes[i] for i in idx]
        records.append((method_name, cat, "success_rate", float(np.mean([o.success for o in outs]))))
        for cell in Confusion:
            records.append((method_name, cat, cell.value, float(sum(o.confusion is cell for o in outs))))
        if logs is not None:
            records.append((method_name, cat, "intervention_rate", intervention_rate([logs[i] for i in idx])))
    return records


def steer(
    config: RunConfig,
    method: Method,
    thr: Optional[Threshold],
    scenarios: Optional[Sequence[Scenario]] = None,
    sampler=None,
) -> tuple:
    """Closed-loop episodes plus a report with success, confusion counts and intervention rate."""
    scenarios = generate_scenarios(config, "episodes") if scenarios is None else scenarios
    outcomes = run_closed_loop(config, method, thr, scenarios, sampler)
    logs = [episode_intervention(s, o) for s, o in zip(scenarios, outcomes)]
    rep = MetricsReport(config.hash, config.seed, _sorted_records(closed_loop_records(method.name, scenarios, outcomes, logs)))
    return outcomes, rep


def success_rate(outcomes: Sequence[EpisodeOutcome]) -> float:
    return float(np.mean([o.success for o in outcomes]))


# -- residual pipeline -------------------------------------------------------


def collect_traces(
    config: RunConfig,
    method: Method,
    thr: Optional[Threshold],
    scenarios: Optional[Sequence[Scenario]] = None,
) -> list:
    """Deploy, and gather expert traces for episodes that asked for help, up to the budget."""
    scenarios = generate_scenarios(config, "deploy") if scenarios is None else scenarios
    outcomes = run_closed_loop(config, method, thr, scenarios)
    traces = []
    for sc, out in zip(scenarios, outcomes):
        if len(traces) >= config.intervention_budget:
            break
        if out.intervene_state is None:
            continue
        tr = collect_intervention(sc, rng=trace_rng(sc), start_state=out.intervene_state)
        if tr is not None and tr.human_steps > 0:
            traces.append(tr)
    if len(traces) < config.intervention_budget:
        log.warning("collected %d traces, below the budget of %d", len(traces), config.intervention_budget)
    return traces


@dataclass
class ResidualRun:
    model: ResidualModel
    traces: list
    threshold_before: Threshold
    threshold_after: Threshold
    outcomes_before: list
    outcomes_after: list

    @property
    def success_before(self) -> float:
        return success_rate(self.outcomes_before)

    @property
    def success_after(self) -> float:
        return success_rate(self.outcomes_after)


def residual_pipeline(config: RunConfig, method: Optional[Method] = None) -> ResidualRun:
    """Calibrate, deploy, collect traces, train, recalibrate, and re-run the same episodes."""
    method = method or config.method("CP", "BayesianIntent")
    calib = generate_scenarios(config, "calib")
    thr = build_calibration_set(config, calib, methods=[method]).thresholds[method.name]
    episodes = generate_scenarios(config, "episodes")
    before = run_closed_loop(config, method, thr, episodes)
    traces = collect_traces(config, method, thr)
    model = train_residual(traces, config.residual_hyperparams())
    thr_new = recalibrate(model, calib, method, config.epsilon, config.K, config.workers)
    after = run_closed_loop(config, method, thr_new, episodes, mixed_sampler(model))
    return ResidualRun(model, traces, thr, thr_new, before, after)


# -- report files ------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def report(rep: MetricsReport, out_dir) -> list:
    """Write metrics.csv (one row per record), table.txt and plot_data.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash", "method", "category", "metric", "value"])
    for m, c, k, v in rep.records:
        w.writerow([rep.config_hash, m, c, k, _fmt(v)])
    (out / "metrics.csv").write_text(buf.getvalue())

    metrics = sorted({k for _, _, k, _ in rep.records})
    rows = sorted({(m, c) for m, c, _, _ in rep.records}, key=lambda r: (r[0], _CATEGORY_ORDER.get(r[1], 99)))
    table = {(m, c, k): v for m, c, k, v in rep.records}
    header = ["method", "category"] + metrics
    body = [[m, c] + [_fmt(table[(m, c, k)]) if (m, c, k) in table else "-" for k in metrics] for m, c in rows]
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = [f"config {rep.config_hash}  seed {rep.seed}"]
    lines.append("  ".join(h.ljust(wd) for h, wd in zip(header, widths)))
    lines.append("  ".join("-" * wd for wd in widths))
    lines += ["  ".join(str(x).ljust(wd) for x, wd in zip(r, widths)) for r in body]
    (out / "table.txt").write_text("\n".join(l.rstrip() for l in lines) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "category"] + list(UQ_METRICS))
    for m, c in rows:
        if all((m, c, k) in table for k in UQ_METRICS):
            w.writerow([m, c] + [_fmt(table[(m, c, k)]) for k in UQ_METRICS])
    (out / "plot_data.csv").write_text(buf.getvalue())
    return [out / "metrics.csv", out / "table.txt", out / "plot_data.csv"]


def write_episodes(path, scenarios, outcomes, method_name: str, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s, o in zip(scenarios, outcomes):
            rec = o.to_record(s, method_name)
            rec["config_hash"] = config_hash
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
