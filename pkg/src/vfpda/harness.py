"""Twin experiments: configuration, truth and observation generation, dispatch
and result files."""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import itertools
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from . import baselines
from .assimilate import MethodSpec, etkf_filter_run, run_filter, vfp_filter_run
from .densities import CauchyError, GaussianError, ObservationModel
from .dynamics import ModelSystem, Trajectory, integrate, lorenz63, lorenz96
from .flow import DiffusionSpec, FlowConfig
from .metrics import MetricSeries, chi_square_uniform

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the field path."""


# ---------------------------------------------------------------------------
# configuration tree
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    name: str = "lorenz63"
    parameters: dict = field(default_factory=dict)
    dt: float = 0.12
    max_step: float = 0.01
    spinup_time: float = 10.0


@dataclass
class ScheduleConfig:
    cycles: int = 2000
    spinup: int = 200
    repetitions: int = 4


@dataclass
class ObservationConfig:
    error: str = "gaussian"
    variance: float = 8.0
    gamma: float = 1.0
    indices: list = field(default_factory=list)
    add_noise: bool = True


@dataclass
class MethodConfig:
    name: str = "VFP(GG)"
    radius: float = 5.0
    window: int = 5
    delta1: float = 1.0
    delta2: float = 1.0
    # ETKF: a value >= 1 is used as is; 0 tunes on the inflation grid
    inflation: float = 0.0
    tuning_cycles: int = 1000
    surrogate_variance: float = 1.0


@dataclass
class FlowSection:
    metric: str = "identity"
    diffusion: str = "background"
    alpha: float = 0.1
    beta: float = 0.01
    dt0: float = 0.1
    dt_max: float = 1.0
    grow: float = 1.2
    shrink: float = 0.5
    max_steps: int = 100
    eps: float = 0.01
    solver: str = "block"
    jacobian: str = "posterior"
    gmres_tol: float = 1e-8
    gmres_maxiter: int = 40
    climatology_cycles: int = 1000


@dataclass
class EnsembleConfig:
    n_ens: int = 50
    spread: float = 1.0
    burn_in: int = 0


@dataclass
class SeedConfig:
    truth: int = 1
    obs_noise: int = 2
    init: int = 3
    flow: int = 4


@dataclass
class OutputConfig:
    directory: str = "results"
    rank_component: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    flow: FlowSection = field(default_factory=FlowSection)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # -- conversion ----------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = _build(cls, data, "")
        cfg.validate()
        return cfg

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"<file>: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_toml(Path(path).read_text())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, path: str, value) -> "ExperimentConfig":
        """Copy with one dotted field path overridden, e.g. ``flow.alpha``."""
        data = self.to_dict()
        node = data
        keys = path.split(".")
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"{path}: unknown field")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"{path}: unknown field")
        node[keys[-1]] = value
        return ExperimentConfig.from_dict(data)

    # -- checks ------------------------------------------------------------------
    def validate(self):
        s, o, e = self.schedule, self.observation, self.ensemble
        if self.model.name not in MODELS:
            raise ConfigError(f"model.name: unknown model {self.model.name!r}")
        if self.model.dt <= 0 or self.model.max_step <= 0:
            raise ConfigError("model.dt: intervals must be positive")
        if s.cycles < 1:
            raise ConfigError("schedule.cycles: must be positive")
        if not 0 <= s.spinup < s.cycles:
            raise ConfigError("schedule.spinup: must satisfy 0 <= spinup < cycles")
        if s.repetitions < 1:
            raise ConfigError("schedule.repetitions: must be positive")
        n = self.build_model().dimension
        if any((not isinstance(i, int)) or i < 0 or i >= n for i in o.indices):
            raise ConfigError(f"observation.indices: must lie in [0, {n})")
        if o.error not in ("gaussian", "cauchy"):
            raise ConfigError(f"observation.error: unknown error family {o.error!r}")
        if o.variance <= 0 or o.gamma <= 0:
            raise ConfigError("observation.variance: error scales must be positive")
        if e.n_ens < 2:
            raise ConfigError("ensemble.n_ens: need at least two particles")
        if e.spread < 0 or e.burn_in < 0:
            raise ConfigError("ensemble.spread: must be nonnegative")
        if not 0 <= self.output.rank_component < n:
            raise ConfigError("output.rank_component: out of range")
        try:
            self.method_spec()
            self.flow_config(None)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"method/flow: {exc}") from exc

    # -- builders ----------------------------------------------------------------
    def build_model(self) -> ModelSystem:
        try:
            return MODELS[self.model.name](**self.model.parameters)
        except TypeError as exc:
            raise ConfigError(f"model.parameters: {exc}") from exc

    @property
    def is_baseline(self) -> bool:
        return self.method.name.upper() in ("ETKF", "SIR")

    def method_spec(self) -> MethodSpec | None:
        if self.is_baseline:
            return None
        m = self.method
        try:
            return MethodSpec.from_name(m.name, radius=m.radius, window=m.window,
                                        delta1=m.delta1, delta2=m.delta2)
        except ValueError as exc:
            raise ConfigError(f"method.name: {exc}") from exc

    def flow_config(self, climatology_factor, repetition: int = 0) -> FlowConfig:
        f = self.flow
        kind = f.diffusion if f.alpha > 0 else "none"
        factor = climatology_factor
        if kind == "climatological" and factor is None:
            factor = np.eye(1)  # placeholder for validation only
        try:
            spec = DiffusionSpec(kind, f.alpha, factor)
            return FlowConfig(metric=f.metric, diffusion=spec, beta=f.beta, dt0=f.dt0,
                              dt_max=f.dt_max, grow=f.grow, shrink=f.shrink,
                              max_steps=f.max_steps, eps=f.eps, solver=f.solver,
                              jacobian=f.jacobian, gmres_tol=f.gmres_tol,
                              gmres_maxiter=f.gmres_maxiter,
                              seed=self.seeds.flow + repetition)
        except ValueError as exc:
            raise ConfigError(f"flow: {exc}") from exc


MODELS = {"lorenz63": lorenz63, "lorenz96": lorenz96}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{_join(path, sorted(unknown)[0])}: unknown field")
    kw = {}
    for name, value in data.items():
        f = fields[name]
        sub = _join(path, name)
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, sub)
        else:
            kw[name] = _coerce(default, value, sub)
    return cls(**kw)


def _join(path, name):
    return f"{path}.{name}" if path else name


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return dict(value)
    return value


# ---------------------------------------------------------------------------
# truth and observations
# ---------------------------------------------------------------------------

def observation_error(cfg: ExperimentConfig, n_obs: int):
    o = cfg.observation
    if o.error == "gaussian":
        return GaussianError(o.variance * np.eye(n_obs))
    return CauchyError(o.gamma, size=n_obs)


def observation_template(cfg: ExperimentConfig, n: int):
    idx = cfg.observation.indices or list(range(n))
    err = observation_error(cfg, len(idx))
    if len(idx) == n and idx == list(range(n)):
        return ObservationModel.identity(n, err, np.zeros(n))
    return ObservationModel.select(n, idx, err, np.zeros(len(idx)))


def _truth_start(cfg: ExperimentConfig, model: ModelSystem):
    rng = np.random.default_rng(cfg.seeds.truth)
    if model.name == "lorenz96":
        x = model.parameters["F"] + 0.01 * rng.standard_normal(model.dimension)
    else:
        x = rng.standard_normal(model.dimension)
    if cfg.model.spinup_time > 0:
        x = integrate(model, x, 0.0, cfg.model.spinup_time, max_step=cfg.model.max_step).final
    return x


def generate_truth(cfg: ExperimentConfig, model: ModelSystem | None = None) -> Trajectory:
    """Truth at cycles ``-burn_in .. cycles`` (``times`` counts intervals from cycle 0)."""
    model = model or cfg.build_model()
    x = _truth_start(cfg, model)
    dt, steps = cfg.model.dt, cfg.ensemble.burn_in + cfg.schedule.cycles
    sub = max(1, int(np.ceil(dt / cfg.model.max_step - 1e-9)))
    traj = integrate(model, x, 0.0, steps * dt, substeps=sub * steps)
    states = np.array(traj.states[::sub])
    times = (np.arange(steps + 1) - cfg.ensemble.burn_in) * dt
    return Trajectory(times, list(states))


def generate_observations(cfg: ExperimentConfig, truth: Trajectory, repetition: int = 0):
    """Noisy observations of the truth at cycles ``1 .. cycles`` for one repetition."""
    n = len(truth.states[0])
    template = observation_template(cfg, n)
    rng = np.random.default_rng([cfg.seeds.obs_noise, repetition])
    start = cfg.ensemble.burn_in + 1
    out = []
    for x in truth.states[start:]:
        y = template.operator(np.asarray(x)[:, None])[:, 0]
        if cfg.observation.add_noise:
            y = y + template.error.sample(rng)
        out.append(template.with_value(y))
    return out


def generate_truth_and_obs(cfg: ExperimentConfig, repetition: int = 0):
    truth = generate_truth(cfg)
    return truth, generate_observations(cfg, truth, repetition)


def climatology(cfg: ExperimentConfig, model: ModelSystem, x_start) -> np.ndarray:
    """Sample covariance of a long free run of the truth model."""
    dt, K = cfg.model.dt, cfg.flow.climatology_cycles
    sub = max(1, int(np.ceil(dt / cfg.model.max_step - 1e-9)))
    traj = integrate(model, x_start, 0.0, K * dt, substeps=sub * K)
    S = np.array(traj.states[::sub])
    return np.cov(S.T)


def _sym_sqrt(B):
    lam, V = np.linalg.eigh(B)
    return (V * np.sqrt(np.maximum(lam, 0.0))) @ V.T


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def initial_ensemble(cfg: ExperimentConfig, truth: Trajectory, repetition: int = 0):
    rng = np.random.default_rng([cfg.seeds.init, repetition])
    x0 = np.asarray(truth.states[0])
    return x0[:, None] + cfg.ensemble.spread * rng.standard_normal((x0.size, cfg.ensemble.n_ens))


def _burn_in(cfg, model, X):
    from .dynamics import propagate
    for _ in range(cfg.ensemble.burn_in):
        X = propagate(model, X, cfg.model.dt, max_step=cfg.model.max_step)
    return X


def run_repetition(cfg: ExperimentConfig, truth: Trajectory, repetition: int = 0,
                   *, B=None, model: ModelSystem | None = None,
                   inflation: float | None = None) -> tuple[MetricSeries, dict]:
    """One assimilation run on ``truth`` with a fresh observation realization."""
    model = model or cfg.build_model()
    obs = generate_observations(cfg, truth, repetition)
    X0 = _burn_in(cfg, model, initial_ensemble(cfg, truth, repetition))
    T = np.array(truth.states[cfg.ensemble.burn_in + 1:])
    common = dict(dt=cfg.model.dt, spinup=cfg.schedule.spinup, max_step=cfg.model.max_step,
                  rank_component=cfg.output.rank_component,
                  rank_seed=cfg.seeds.flow + repetition)
    extra = {}
    name = cfg.method.name.upper()
    if name == "ETKF":
        surrogate = _surrogate(cfg, obs[0].y.size)
        infl = inflation or cfg.method.inflation
        if infl <= 0:
            infl, scores = tune_inflation(cfg, truth, model)
            extra["inflation_scores"] = scores
        extra["inflation"] = infl
        series = etkf_filter_run(model, T, obs, X0, infl, surrogate_error=surrogate, **common)
    elif name == "SIR":
        rng = np.random.default_rng([cfg.seeds.flow, repetition])
        N = X0.shape[1]
        w = np.full(N, 1.0 / N)

        def analysis(Xb, ob, k):
            Xa, _, degenerate = baselines.sir_step(Xb, w, ob, rng)
            return Xa, 0, not degenerate

        series = run_filter(model, T, obs, X0, analysis, **common)
    else:
        spec = cfg.method_spec()
        factor = _sym_sqrt(B) if B is not None else None
        fcfg = cfg.flow_config(factor, repetition)
        series = vfp_filter_run(model, T, obs, X0, spec, fcfg, climatology=B, **common)
    return series, extra


def tune_inflation(cfg: ExperimentConfig, truth: Trajectory, model: ModelSystem | None = None,
                   grid=baselines.INFLATION_GRID):
    """Pick one ETKF inflation for the whole experiment.

    Each grid value is scored by the RMSE over the leading ``tuning_cycles``
    cycles, averaged over all repetitions; the lowest average wins. Runs that
    blow up score infinity.
    """
    model = model or cfg.build_model()
    T = np.array(truth.states[cfg.ensemble.burn_in + 1:])
    K = min(cfg.method.tuning_cycles, len(T))
    spin = min(cfg.schedule.spinup, K // 4)
    runs = []
    for r in range(cfg.schedule.repetitions):
        obs = generate_observations(cfg, truth, r)[:K]
        X0 = _burn_in(cfg, model, initial_ensemble(cfg, truth, r))
        runs.append((obs, X0))
    surrogate = _surrogate(cfg, runs[0][0][0].y.size)
    scores = {}
    for infl in grid:
        vals = []
        for obs, X0 in runs:
            s = etkf_filter_run(model, T[:K], obs, X0, float(infl), dt=cfg.model.dt, spinup=spin,
                                max_step=cfg.model.max_step, surrogate_error=surrogate)
            vals.append(s.rmse() if s.finite else float("inf"))
        val = float(np.mean(vals))
        scores[f"{float(infl):.2f}"] = val if np.isfinite(val) else None
    finite = {k: v for k, v in scores.items() if v is not None}
    best = min(finite, key=finite.get) if finite else f"{grid[-1]:.2f}"
    log.info("ETKF inflation tuned to %s", best)
    return float(best), scores


def _surrogate(cfg: ExperimentConfig, n_obs: int):
    if cfg.observation.error == "gaussian":
        return None
    return GaussianError(cfg.method.surrogate_variance * np.eye(n_obs))


# ---------------------------------------------------------------------------
# experiments and result files
# ---------------------------------------------------------------------------

def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _header(cfg: ExperimentConfig) -> str:
    return "# config: " + json.dumps(_clean(cfg.to_dict()), sort_keys=True) + "\n"


def series_csv(series: MetricSeries, cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle", "rmse_instant", "flow_steps", "converged", "truth_rank"])
    for k, (r, s, c, rank) in enumerate(zip(series.rmse_instant, series.flow_steps,
                                            series.converged, series.ranks)):
        w.writerow([k, repr(float(r)), int(s), int(bool(c)), int(rank)])
    return buf.getvalue()


def rank_csv(counts, cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "count"])
    for b, c in enumerate(counts):
        w.writerow([b, int(c)])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, output=None) -> dict:
    """Run every repetition, write result files, return the summary record.

    Files: ``summary.json``, ``series_rep<k>.csv`` per repetition and
    ``rank_histogram.csv`` with counts summed over repetitions.
    """
    model = cfg.build_model()
    truth = generate_truth(cfg, model)
    B = None
    if not cfg.is_baseline and cfg.flow.diffusion == "climatological" and cfg.flow.alpha > 0:
        B = climatology(cfg, model, truth.states[-1])
    inflation, tuning = None, None
    if cfg.method.name.upper() == "ETKF" and cfg.method.inflation <= 0:
        inflation, tuning = tune_inflation(cfg, truth, model)
    reps, per_run_ranks, csvs = [], [], {}
    for r in range(cfg.schedule.repetitions):
        series, extra = run_repetition(cfg, truth, r, B=B, model=model, inflation=inflation)
        counts = series.rank_counts()
        per_run_ranks.append(counts)
        inst = series.rmse_instant
        rec = {
            "repetition": r,
            "rmse": series.rmse() if series.finite else None,
            "max_rmse_instant": float(np.max(inst)) if series.finite else None,
            "finite": series.finite,
            "aborted": bool(series.info.get("aborted", False)),
            "flow_steps_mean": float(np.mean(series.flow_steps)),
            "converged_fraction": float(np.mean(series.converged)),
            "rank_chi_square": chi_square_uniform(counts) if counts.sum() else None,
        }
        rec.update(extra)
        reps.append(rec)
        csvs[f"series_rep{r}.csv"] = series_csv(series, cfg)
    total = np.sum(per_run_ranks, axis=0)
    vals = [x["rmse"] for x in reps]
    ok = all(v is not None for v in vals)
    summary = {
        "name": cfg.name,
        "method": cfg.method.name,
        "config": cfg.to_dict(),
        "seeds": dataclasses.asdict(cfg.seeds),
        "repetitions": reps,
        "mean_rmse": float(np.mean(vals)) if ok else None,
        "rank_counts": total,
        "rank_counts_per_run": per_run_ranks,
        "rank_chi_square": chi_square_uniform(total) if total.sum() else None,
        "flow_steps_mean": float(np.mean([x["flow_steps_mean"] for x in reps])),
        "converged_fraction": float(np.mean([x["converged_fraction"] for x in reps])),
        "inflation": inflation,
        "inflation_scores": tuning,
        "status": "ok" if ok and not any(x["aborted"] for x in reps) else "partial",
    }
    summary = _clean(summary)
    out = Path(output or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for fname, text in csvs.items():
        (out / fname).write_text(text)
    (out / "rank_histogram.csv").write_text(rank_csv(total, cfg))
    return summary


def load_grid(path) -> dict:
    """Sweep axes from a TOML file: ``[grid]`` maps dotted field paths to value lists."""
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"<grid>: {exc}") from exc
    grid = data.get("grid")
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid: expected a non-empty [grid] table")
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid.{k}: expected a non-empty list")
    return grid


def run_sweep(cfg: ExperimentConfig, grid: dict, output=None) -> dict:
    """Cartesian sweep; each point gets its own result directory."""
    out = Path(output or cfg.output.directory)
    keys = list(grid)
    points = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = cfg
        for k, v in zip(keys, values):
            point = point.replace(k, v)
        tag = "_".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, values))
        point = dataclasses.replace(point, name=f"{cfg.name}[{tag}]")
        summary = run_experiment(point, out / tag)
        points.append({"point": dict(zip(keys, values)), "directory": tag,
                       "mean_rmse": summary["mean_rmse"],
                       "rank_counts": summary["rank_counts"],
                       "rank_chi_square": summary["rank_chi_square"],
                       "status": summary["status"]})
    result = _clean({"name": cfg.name, "axes": {k: grid[k] for k in keys}, "points": points,
                     "config": cfg.to_dict()})
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    return result


def collect_reports(directory) -> list[dict]:
    rows = []
    for p in sorted(Path(directory).rglob("summary.json")):
        s = json.loads(p.read_text())
        rows.append({"path": str(p.parent), "name": s.get("name"), "method": s.get("method"),
                     "mean_rmse": s.get("mean_rmse"), "rank_chi_square": s.get("rank_chi_square"),
                     "status": s.get("status")})
    return rows


def with_seed_offset(cfg: ExperimentConfig, offset: int) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    s = cfg.seeds
    cfg.seeds = SeedConfig(s.truth + offset, s.obs_noise + offset, s.init + offset,
                           s.flow + offset)
    return cfg
