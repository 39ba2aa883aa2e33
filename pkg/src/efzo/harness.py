"""Seeded multi-run experiments, aggregation and CSV output.

Run ``r`` of every method and sweep point uses seed ``base_seed + r``, so
world randomness is paired across methods.  Runs may execute in worker
processes; results are always collected in run order, so output files do
not depend on the number of workers.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .compressors import CompressorSpec, parse_compressor
from .coverage import CoverageConfig, simulate_coverage
from .errors import ConfigurationError
from .metrics import FED, Method, MetricsSeries, get_method
from .optimizers import StepSchedule
from .synthetic import QuadraticStream, simulate_stream
from .tracking import TrackingConfig, simulate_tracking
from .zo import DEFAULT_MU

TRACKING = "tracking"
COVERAGE = "coverage"
SYNTHETIC = "synthetic-quadratic"
SCENARIOS = (TRACKING, COVERAGE, SYNTHETIC)
_SCENARIO_ALIASES = {
    "tracking": TRACKING,
    "coverage": COVERAGE,
    "synthetic-quadratic": SYNTHETIC,
    "syntheticquadratic": SYNTHETIC,
    "synthetic": SYNTHETIC,
}
DEFAULT_RUNS = {TRACKING: 100, COVERAGE: 5, SYNTHETIC: 50}

CSV_HEADER = ("step", "tracking_error", "cum_collisions", "grad_norm", "bytes")

# sweepable names -> scenario config field; "compressor", "delta" and "bits"
# change the method instead
_PARAM_ALIASES = {
    "n": "n_agents",
    "n_agents": "n_agents",
    "lambda": "lam",
    "lam": "lam",
    "eta": "eta",
    "mu": "mu",
    "steps": "steps",
    "beta": "beta",
    "neighbor_dropout": "neighbor_dropout",
    "normalize": "normalize",
    "sensing_radius": "sensing_radius",
    "overlap": "overlap",
    "dim": "dim",
    "sigma": "sigma",
}
_METHOD_PARAMS = ("compressor", "method", "delta", "bits")
SWEEP_PARAMS = tuple(sorted(set(_PARAM_ALIASES) | set(_METHOD_PARAMS)))


def canonical_scenario(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    if key not in _SCENARIO_ALIASES:
        raise ConfigurationError(f"unknown scenario {name!r}; valid: {list(SCENARIOS)}")
    return _SCENARIO_ALIASES[key]


@dataclass(frozen=True)
class Sweep:
    """One swept parameter.  Several sweeps in a config are zipped, not crossed."""

    name: str
    values: tuple

    def __post_init__(self):
        if self.name.lower() not in SWEEP_PARAMS:
            raise ConfigurationError(f"cannot sweep {self.name!r}; valid parameters: {list(SWEEP_PARAMS)}")
        if not self.values:
            raise ConfigurationError(f"sweep over {self.name!r} has no values")
        object.__setattr__(self, "name", self.name.lower())
        object.__setattr__(self, "values", tuple(self.values))

    @classmethod
    def parse(cls, text: str) -> "Sweep":
        """``"lambda=0,1,5"`` -> Sweep("lambda", (0, 1, 5)); numbers are parsed when possible."""
        name, sep, rest = text.partition("=")
        if not sep or not rest:
            raise ConfigurationError(f"sweep must look like name=v1,v2,..., got {text!r}")
        return cls(name.strip(), tuple(_parse_value(v.strip()) for v in rest.split(",")))


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = TRACKING
    methods: tuple = ("qsgd1b-ef",)
    runs: int | None = None
    base_seed: int = 0
    sweep: tuple = ()
    params: dict = field(default_factory=dict)
    output: str | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scenario", canonical_scenario(self.scenario))
        if isinstance(self.methods, str):
            object.__setattr__(self, "methods", (self.methods,))
        object.__setattr__(self, "methods", tuple(self.methods))
        sweeps = tuple(s if isinstance(s, Sweep) else Sweep.parse(s) if isinstance(s, str) else Sweep(*s)
                       for s in self.sweep)
        object.__setattr__(self, "sweep", sweeps)
        if self.runs is not None and self.runs < 1:
            raise ConfigurationError(f"runs must be >= 1, got {self.runs}")
        if self.base_seed < 0:
            raise ConfigurationError("base_seed must be non-negative")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if not self.methods:
            raise ConfigurationError("need at least one method")
        if len({len(s.values) for s in sweeps}) > 1:
            raise ConfigurationError("zipped sweeps must have equal lengths")
        for m in self.methods:
            get_method(m)
        for point in self.points():
            self.scenario_config(point)
            self.method_for(self.methods[0], point)

    @property
    def n_runs(self) -> int:
        return self.runs if self.runs is not None else DEFAULT_RUNS[self.scenario]

    def points(self) -> list[dict]:
        if not self.sweep:
            return [{}]
        return [{s.name: s.values[k] for s in self.sweep} for k in range(len(self.sweep[0].values))]

    def scenario_config(self, point: dict):
        overrides = {}
        for key, value in {**self.params, **point}.items():
            key = key.lower()
            if key in _METHOD_PARAMS:
                continue
            if key not in _PARAM_ALIASES:
                raise ConfigurationError(f"unknown parameter {key!r}; valid: {list(SWEEP_PARAMS)}")
            overrides[_PARAM_ALIASES[key]] = value
        base = {TRACKING: TrackingConfig, COVERAGE: CoverageConfig, SYNTHETIC: SyntheticConfig}[self.scenario]
        valid = {f.name for f in fields(base)}
        bad = sorted(set(overrides) - valid)
        if bad:
            raise ConfigurationError(f"{self.scenario} has no parameter(s) {bad}; valid: {sorted(valid)}")
        try:
            return base(**overrides)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def method_for(self, name: str, point: dict) -> Method:
        method = get_method(name)
        merged = {**self.params, **point}
        if "compressor" in merged or "method" in merged:
            method = get_method(str(merged.get("method", merged.get("compressor"))))
        if "delta" in merged:
            # delta is the drop probability of Dropout-B; 0 means no compression
            delta = float(merged["delta"])
            comp = CompressorSpec.identity() if delta == 0 else CompressorSpec.dropout_b(1.0 - delta)
            method = Method(f"dropout-b-delta{delta:g}", FED, comp, method.error_feedback)
        if "bits" in merged:
            bits = int(merged["bits"])
            method = Method(f"qsgd{bits}b", FED, parse_compressor(f"qsgd:{bits}"), method.error_feedback)
        return method

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "methods": list(self.methods),
            "runs": self.n_runs,
            "base_seed": self.base_seed,
            "sweep": [{"name": s.name, "values": list(s.values)} for s in self.sweep],
            "params": dict(self.params),
            "output": self.output,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys {unknown}; valid: {sorted(known)}")
        data = dict(data)
        sweeps = []
        for s in data.get("sweep", ()):
            if isinstance(s, dict):
                sweeps.append(Sweep(s["name"], tuple(s["values"])))
            else:
                sweeps.append(s)
        data["sweep"] = tuple(sweeps)
        return cls(**data)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read an experiment config from a JSON file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


@dataclass(frozen=True)
class SyntheticConfig:
    """Scenario wrapper around :class:`QuadraticStream` for the harness."""

    dim: int = 10
    steps: int = 1000
    sigma: float = 1.0
    eta: float | None = None
    mu: float | None = None

    @property
    def stream(self) -> QuadraticStream:
        return QuadraticStream(dim=self.dim, sigma=self.sigma)

    def schedule(self, comp: CompressorSpec) -> StepSchedule | None:
        if self.eta is None and self.mu is None:
            return None
        return StepSchedule(eta=self.eta if self.eta is not None else 1.0, mu=self.mu if self.mu is not None else DEFAULT_MU)


def run_single(scenario: str, scfg, method: Method, seed: int) -> MetricsSeries:
    if scenario == TRACKING:
        return simulate_tracking(scfg, method, seed)
    if scenario == COVERAGE:
        return simulate_coverage(scfg, method, seed)
    return simulate_stream(scfg.stream, scfg.steps, method.compressor, seed,
                           scfg.schedule(method.compressor), method.error_feedback)


def _run_task(task):
    return run_single(*task)


@dataclass
class Aggregate:
    mean: dict
    ci: dict
    runs: int
    diverged: int

    @property
    def used(self) -> int:
        return self.runs - self.diverged


_SERIES_FIELDS = ("tracking_error", "cumulative_collisions", "grad_norm", "bytes_transmitted")


def aggregate(series: list[MetricsSeries]) -> Aggregate:
    """Pointwise mean and 95% normal-approximation CI half-width.

    Diverged runs are excluded from the statistics and counted.
    """
    if not series:
        raise ConfigurationError("cannot aggregate an empty list of runs")
    lengths = {s.steps for s in series}
    if len(lengths) != 1:
        raise ConfigurationError(f"runs have different lengths: {sorted(lengths)}")
    kept = [s for s in series if not s.diverged]
    steps = lengths.pop()
    mean, ci = {}, {}
    extra_keys = sorted(set.intersection(*(set(s.extra) for s in series))) if series else []
    for name in (*_SERIES_FIELDS, *extra_keys):
        if not kept:
            mean[name] = np.full(steps, np.nan)
            ci[name] = np.full(steps, np.nan)
            continue
        data = np.stack([np.asarray(s.extra[name] if name in extra_keys else getattr(s, name), dtype=np.float64)
                         for s in kept])
        # sort along runs first so the sums are independent of run order
        data = np.sort(data, axis=0)
        mean[name] = data.mean(axis=0)
        if len(kept) > 1:
            ci[name] = 1.959963984540054 * data.std(axis=0, ddof=1) / math.sqrt(len(kept))
        else:
            ci[name] = np.zeros(steps)
    return Aggregate(mean=mean, ci=ci, runs=len(series), diverged=len(series) - len(kept))


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _rows(columns: dict):
    n = len(columns["tracking_error"])
    for t in range(n):
        yield [str(t)] + [_fmt(columns[name][t]) for name in _SERIES_FIELDS]


def emit_csv(series, path: str | os.PathLike) -> Path:
    """Write one row per step under the fixed header.

    ``series`` is a :class:`MetricsSeries` or a dict of the four per-step
    arrays (e.g. ``Aggregate.mean``).  Floats use the shortest repr that
    round-trips.
    """
    path = Path(path)
    columns = series if isinstance(series, dict) else {name: getattr(series, name) for name in _SERIES_FIELDS}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            writer.writerows(_rows(columns))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None
    return path


def read_csv(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return {name: np.array([float(r[k]) for r in rows]) for k, name in enumerate(header)}


def converged(errors: np.ndarray, window: int = 100, ratio: float = 0.1, band: float = 2.0) -> bool:
    """Did a tracking-error curve settle?

    The floor (minimum over the last ``window`` steps) must be at most
    ``ratio`` times the initial error, and the curve must stay within
    ``band`` times that floor over the whole final window.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < window or not np.all(np.isfinite(errors[-window:])):
        return False
    tail = errors[-window:]
    floor = float(tail.min())
    return floor <= ratio * float(errors[0]) and float(tail.max()) <= band * max(floor, 1e-12)


@dataclass
class PointResult:
    label: str
    method: Method
    point: dict
    series: list
    summary: Aggregate

    @property
    def final_collisions(self) -> np.ndarray:
        return np.array([s.total_collisions for s in self.series if not s.diverged], dtype=float)


def _label(method: Method, point: dict) -> str:
    parts = [method.name] + [f"{k}={v}" for k, v in point.items() if k not in _METHOD_PARAMS]
    return "_".join(parts).replace("/", "-").replace(":", "-")


def run_experiment(cfg: ExperimentConfig) -> list[PointResult]:
    """Run every (sweep point, method) pair for ``cfg.n_runs`` seeds.

    With ``cfg.output`` set, writes ``<label>/run_<r>.csv``, ``<label>/mean.csv``,
    ``<label>/ci.csv`` and a ``summary.csv`` with one row per pair.
    """
    out_dir = Path(cfg.output) if cfg.output else None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigurationError(f"output path {out_dir} is not writable: {exc.strerror}") from None
        if not os.access(out_dir, os.W_OK):
            raise ConfigurationError(f"output path {out_dir} is not writable")

    jobs = []
    for point in cfg.points():
        scfg = cfg.scenario_config(point)
        seen = set()
        for name in cfg.methods:
            method = cfg.method_for(name, point)
            label = _label(method, point)
            if label in seen:
                continue
            seen.add(label)
            jobs.append((label, method, point, scfg))

    tasks = [(cfg.scenario, scfg, method, cfg.base_seed + r) for _, method, _, scfg in jobs for r in range(cfg.n_runs)]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            flat = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
    else:
        flat = [_run_task(t) for t in tasks]

    results = []
    for k, (label, method, point, _) in enumerate(jobs):
        runs = flat[k * cfg.n_runs:(k + 1) * cfg.n_runs]
        results.append(PointResult(label, method, point, runs, aggregate(runs)))

    if out_dir is not None:
        _write_outputs(cfg, results, out_dir)
    return results


def _write_outputs(cfg: ExperimentConfig, results: list[PointResult], out_dir: Path):
    for res in results:
        base = out_dir / res.label
        for r, s in enumerate(res.series):
            emit_csv(s, base / f"run_{r:03d}.csv")
        emit_csv(res.summary.mean, base / "mean.csv")
        emit_csv(res.summary.ci, base / "ci.csv")
    extra_keys = sorted({k for res in results for k in res.summary.mean if k not in _SERIES_FIELDS})
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "method", *[s.name for s in cfg.sweep], "runs", "diverged", "converged",
                         "final_error", "final_error_ci", "collisions", "collisions_ci", *extra_keys])
        for res in results:
            m, c = res.summary.mean, res.summary.ci
            n_conv = sum(converged(s.tracking_error) for s in res.series if not s.diverged)
            writer.writerow([
                res.label, res.method.name, *[res.point.get(s.name, "") for s in cfg.sweep],
                res.summary.runs, res.summary.diverged, n_conv,
                _fmt(m["tracking_error"][-1]), _fmt(c["tracking_error"][-1]),
                _fmt(m["cumulative_collisions"][-1]), _fmt(c["cumulative_collisions"][-1]),
                *[_fmt(m[k][-1]) if k in m else "" for k in extra_keys],
            ])
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        # worker count and output path do not affect results, so leave them out
        saved = {k: v for k, v in cfg.to_dict().items() if k not in ("workers", "output")}
        json.dump(saved, fh, indent=2, sort_keys=True)
        fh.write("\n")
