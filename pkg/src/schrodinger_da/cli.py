"""Experiment runner: twin experiments, sweeps and single-cycle smoothing.

Configuration files are INI-style (``[section]`` headers, ``key = value``
lines, ``#`` comments). Vectors are comma separated, matrix rows are
separated by ``;``. See the README for the full list of keys.

Random streams are keyed by ``make_rng(seed, k)``: k = 0 truth, 1
observation noise, 2 initial ensemble, 3 filter.

CSV output of a run has the header ``step,time,rmse,ess,log_evidence``.
RMSE is the spatial RMSE of the (weighted) ensemble mean against the truth,
sqrt(mean over components); a run is summarised by its time mean after
discarding the first ``burn_in`` fraction of records.
"""
import argparse
import configparser
import io
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import List, Optional, Tuple

import numpy as np

from .ensemble import Ensemble, RunRecord
from .exceptions import ConfigError, ConvergenceError, DegeneracyError, ModelError, StepError
from .filters_continuous import VARIANTS, ContinuousFilterConfig, continuous_step
from .filters_discrete import SCENARIOS, FilterStep
from .models import (GaussianMapModel, ObservationModel, SdeModel, double_well_drift, euler_maruyama_paths,
                     linear_drift, log_likelihood, lorenz63_drift, make_rng)

log = logging.getLogger(__name__)

NUMERICAL_ERRORS = (StepError, DegeneracyError, ConvergenceError, FloatingPointError, np.linalg.LinAlgError)

MODELS = ("gaussian_map", "double_well", "lorenz63", "brownian", "linear_sde")
OPERATORS = ("identity", "first", "drift")
STREAM_TRUTH, STREAM_OBS, STREAM_INIT, STREAM_FILTER = 0, 1, 2, 3
SWEEP_HEADER = "method,M,mean_rmse,stderr,n_runs"
KNOWN_KEYS = {
    "experiment": {"mode", "seed", "cycles", "horizon", "burn_in", "record_every", "output", "snapshots",
                   "histogram_bins", "histogram_range"},
    "model": {"name", "gamma", "dt", "interval", "dim", "z0", "a", "b"},
    "observation": {"operator", "r", "y"},
    "ensemble": {"m", "init", "mean", "var", "atoms", "replicate"},
    "filter": {"method", "k", "tau_ess", "eps", "n_homotopy"},
    "sweep": {"methods", "m", "seeds", "skip", "workers"},
}


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "gaussian_map"
    gamma: float = 0.1
    dt: float = 0.01
    interval: float = 1.0
    dim: int = 1
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    z0: Optional[np.ndarray] = None
    operator: str = "identity"
    R: np.ndarray = field(default_factory=lambda: np.eye(1))
    y: Optional[np.ndarray] = None
    M: int = 10
    init: str = "gaussian"
    mean: Optional[np.ndarray] = None
    var: np.ndarray = field(default_factory=lambda: np.eye(1))
    atoms: Tuple[float, float] = (-1.0, 1.0)
    replicate: int = 1
    mode: str = "discrete"
    method: str = "bootstrap"
    K: int = 0
    tau_ess: float = 0.5
    eps: Optional[float] = None
    n_homotopy: int = 100
    seed: int = 0
    cycles: int = 1
    horizon: float = 1.0
    burn_in: float = 0.1
    record_every: int = 1
    output: Optional[str] = None
    snapshots: bool = False
    histogram_bins: int = 0
    histogram_range: Tuple[float, float] = (-3.0, 3.0)
    sweep_methods: Tuple[str, ...] = ()
    sweep_M: Tuple[int, ...] = ()
    sweep_seeds: Tuple[int, ...] = (0,)
    sweep_skip: Tuple[Tuple[str, int], ...] = ()
    workers: int = 1

    @property
    def n_steps(self):
        """Number of filter steps (cycles, or time steps in continuous mode)."""
        if self.mode == "continuous":
            return int(round(self.horizon / self.dt))
        return self.cycles


class _Reader:
    """Typed access to a parsed config with line/field diagnostics."""

    def __init__(self, parser, text, source):
        self.p = parser
        self.text = text
        self.source = source

    def _line(self, section, key):
        sec = None
        for i, raw in enumerate(self.text.splitlines(), 1):
            s = raw.strip()
            if s.startswith("[") and s.endswith("]"):
                sec = s[1:-1].strip()
            elif sec == section and "=" in s and s.split("=", 1)[0].strip().lower() == key.lower():
                return i
        return None

    def fail(self, section, key, msg):
        line = self._line(section, key)
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: [{section}] {key}: {msg}")

    def raw(self, section, key, default=None):
        if self.p.has_option(section, key):
            return self.p.get(section, key).strip()
        return default

    def get(self, section, key, conv, default):
        s = self.raw(section, key)
        if s is None or s == "":
            return default
        try:
            return conv(s)
        except (ValueError, TypeError) as err:
            self.fail(section, key, f"cannot parse {s!r} ({err})")


def _vector(s):
    return np.array([float(x) for x in s.replace(";", ",").split(",") if x.strip()])


def _matrix(s):
    rows = [[float(x) for x in r.split(",") if x.strip()] for r in s.split(";") if r.strip()]
    A = np.array(rows, dtype=float)
    if A.size == 1:
        return A.reshape(1, 1)
    return A


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError("expected yes/no")


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _names(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _square(A, n, reader, section, key):
    A = np.atleast_2d(A)
    if A.shape == (1, 1) and n > 1:
        return A[0, 0] * np.eye(n)
    if A.shape != (n, n):
        reader.fail(section, key, f"expected a scalar or a {n}x{n} matrix, got shape {A.shape}")
    return A


def bundled_configs():
    """Names of the configurations shipped with the package."""
    files = resources.files("schrodinger_da") / "configs"
    return sorted(f.name[:-4] for f in files.iterdir() if f.name.endswith(".cfg"))


def _read_source(source):
    if os.path.exists(source):
        with open(source) as fh:
            return fh.read(), source
    name = source[:-4] if source.endswith(".cfg") else source
    f = resources.files("schrodinger_da") / "configs" / f"{name}.cfg"
    if f.is_file():
        return f.read_text(), f"{name}.cfg"
    raise ConfigError(f"no config file or bundled config named {source!r} (bundled: {', '.join(bundled_configs())})")


def parse_config(text, source="<string>", overrides=()) -> ExperimentConfig:
    """Parse config text; ``overrides`` are "section.key=value" strings."""
    p = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        p.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    for o in overrides:
        if "=" not in o or "." not in o.split("=", 1)[0]:
            raise ConfigError(f"override {o!r} must look like section.key=value")
        k, v = o.split("=", 1)
        sec, key = k.strip().split(".", 1)
        if not p.has_section(sec):
            p.add_section(sec)
        p.set(sec, key.strip(), v.strip())
    r = _Reader(p, text, source)
    for sec in p.sections():
        if sec not in KNOWN_KEYS:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key in p.options(sec):
            if key not in KNOWN_KEYS[sec]:
                r.fail(sec, key, "unknown key")
    c = {}

    name = r.get("model", "name", str, "gaussian_map")
    if name not in MODELS:
        r.fail("model", "name", f"unknown model {name!r}; choose from {', '.join(MODELS)}")
    c["model"] = name
    c["gamma"] = r.get("model", "gamma", float, 0.1)
    c["dt"] = r.get("model", "dt", float, 0.01)
    c["interval"] = r.get("model", "interval", float, 1.0)
    z0 = r.get("model", "z0", _vector, None)
    dim = {"double_well": 1, "lorenz63": 3}.get(name)
    if dim is None:
        dim = r.get("model", "dim", int, z0.size if z0 is not None else 1)
    if z0 is not None and z0.size != dim:
        r.fail("model", "z0", f"expected {dim} entries")
    c["dim"] = dim
    c["z0"] = z0 if z0 is not None else np.zeros(dim)
    A = r.get("model", "A", _matrix, None)
    c["A"] = None if A is None else _square(A, dim, r, "model", "A")
    B = r.get("model", "B", _matrix, np.eye(1))
    c["B"] = _square(B, dim, r, "model", "B")

    op = r.get("observation", "operator", str, "identity")
    if op not in OPERATORS:
        r.fail("observation", "operator", f"unknown operator {op!r}; choose from {', '.join(OPERATORS)}")
    if op == "drift" and name not in ("double_well", "lorenz63", "linear_sde"):
        r.fail("observation", "operator", "the drift operator needs an SDE model with a drift")
    c["operator"] = op
    ny = 1 if op == "first" else dim
    c["R"] = _square(r.get("observation", "R", _matrix, np.eye(1)), ny, r, "observation", "R")
    y = r.get("observation", "y", _vector, None)
    if y is not None and y.size != ny:
        r.fail("observation", "y", f"expected {ny} entries")
    c["y"] = y

    c["M"] = r.get("ensemble", "M", int, 10)
    if c["M"] < 1:
        r.fail("ensemble", "M", "must be >= 1")
    init = r.get("ensemble", "init", str, "gaussian")
    if init not in ("gaussian", "atoms"):
        r.fail("ensemble", "init", "must be gaussian or atoms")
    c["init"] = init
    mean = r.get("ensemble", "mean", _vector, None)
    if mean is not None and mean.size != dim:
        r.fail("ensemble", "mean", f"expected {dim} entries")
    c["mean"] = mean
    var = r.get("ensemble", "var", _matrix, np.eye(1))
    c["var"] = _square(var, dim, r, "ensemble", "var")
    atoms = r.get("ensemble", "atoms", _vector, np.array([-1.0, 1.0]))
    if atoms.size != 2:
        r.fail("ensemble", "atoms", "expected a range lo, hi")
    c["atoms"] = (float(atoms[0]), float(atoms[1]))
    c["replicate"] = r.get("ensemble", "replicate", int, 1)

    mode = r.get("experiment", "mode", str, "discrete")
    if mode not in ("discrete", "continuous"):
        r.fail("experiment", "mode", "must be discrete or continuous")
    c["mode"] = mode
    c["method"] = r.get("filter", "method", str, "bootstrap" if mode == "discrete" else "enkbf-stoch-mean")
    c["K"] = r.get("filter", "K", int, 0)
    c["tau_ess"] = r.get("filter", "tau_ess", float, 0.5)
    c["eps"] = r.get("filter", "eps", float, None)
    c["n_homotopy"] = r.get("filter", "n_homotopy", int, 100)

    c["seed"] = r.get("experiment", "seed", int, 0)
    c["cycles"] = r.get("experiment", "cycles", int, 1)
    c["horizon"] = r.get("experiment", "horizon", float, 1.0)
    c["burn_in"] = r.get("experiment", "burn_in", float, 0.1)
    c["record_every"] = r.get("experiment", "record_every", int, 1)
    c["output"] = r.get("experiment", "output", str, None)
    c["snapshots"] = r.get("experiment", "snapshots", _bool, False)
    c["histogram_bins"] = r.get("experiment", "histogram_bins", int, 0)
    hr = r.get("experiment", "histogram_range", _vector, np.array([-3.0, 3.0]))
    c["histogram_range"] = (float(hr[0]), float(hr[-1]))

    c["sweep_methods"] = r.get("sweep", "methods", _names, ())
    c["sweep_M"] = r.get("sweep", "M", _ints, ())
    c["sweep_seeds"] = r.get("sweep", "seeds", _ints, (c["seed"],))
    skip = []
    for item in r.get("sweep", "skip", _names, ()):
        if ":" not in item:
            r.fail("sweep", "skip", f"entry {item!r} must look like method:M")
        m, n = item.rsplit(":", 1)
        skip.append((m.strip(), int(n)))
    c["sweep_skip"] = tuple(skip)
    c["workers"] = r.get("sweep", "workers", int, 1)

    cfg = ExperimentConfig(**c)
    try:
        validate(cfg)
    except ConfigError as err:
        raise ConfigError(f"{source}: {err}") from None
    return cfg


def validate(cfg: ExperimentConfig):
    """Cross-field checks; raises ConfigError."""
    sde = cfg.model != "gaussian_map"
    methods = (cfg.method,) + tuple(cfg.sweep_methods)
    allowed = VARIANTS if cfg.mode == "continuous" else SCENARIOS
    for m in methods:
        if m not in allowed:
            raise ConfigError(f"[filter] method: {m!r} is not a {cfg.mode} method ({', '.join(allowed)})")
    if cfg.mode == "continuous":
        if not sde:
            raise ConfigError("continuous mode needs an SDE model")
        n = cfg.horizon / cfg.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ConfigError("[experiment] horizon: must be a positive multiple of dt")
    elif sde:
        n = cfg.interval / cfg.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError("[model] interval: must be divisible by dt")
    if cfg.cycles < 1 or cfg.record_every < 1:
        raise ConfigError("[experiment] cycles and record_every must be >= 1")
    if not 0.0 <= cfg.burn_in < 1.0:
        raise ConfigError("[experiment] burn_in: must lie in [0, 1)")
    if cfg.replicate < 1:
        raise ConfigError("[ensemble] replicate: must be >= 1")
    if cfg.mode == "continuous" and cfg.y is not None:
        raise ConfigError("[observation] y: a fixed datum is only used in discrete mode")


def load_config(source, overrides=()) -> ExperimentConfig:
    """Load a config file path or the name of a bundled config."""
    text, name = _read_source(source)
    return parse_config(text, name, overrides)


# -- building models -----------------------------------------------------------

def build_model(cfg: ExperimentConfig):
    try:
        if cfg.model == "gaussian_map":
            A = cfg.A
            fmap = (lambda z: z) if A is None else (lambda z: z @ A.T)
            return GaussianMapModel(fmap, cfg.B, cfg.gamma)
        drift = {"double_well": double_well_drift, "lorenz63": lorenz63_drift,
                 "brownian": lambda t, z: np.zeros_like(z)}.get(cfg.model)
        if drift is None:
            drift = linear_drift(cfg.A if cfg.A is not None else np.zeros((cfg.dim, cfg.dim)))
        interval = cfg.dt if cfg.mode == "continuous" else cfg.interval
        return SdeModel(drift, cfg.gamma, cfg.dt, interval=interval)
    except ModelError as err:
        raise ConfigError(f"[model]: {err}") from None


def build_observation(cfg: ExperimentConfig, model):
    ny = cfg.R.shape[0]
    y = cfg.y if cfg.y is not None else np.zeros(ny)
    try:
        if cfg.operator == "identity":
            return ObservationModel.linear(np.eye(cfg.dim), cfg.R, y)
        if cfg.operator == "first":
            return ObservationModel.linear(np.eye(cfg.dim)[:1], cfg.R, y)
        return ObservationModel(h=lambda z: model.drift(0.0, z), R=cfg.R, y=y)
    except ModelError as err:
        raise ConfigError(f"[observation]: {err}") from None


def initial_ensemble(cfg: ExperimentConfig, rng):
    if cfg.init == "atoms":
        if cfg.dim != 1:
            raise ConfigError("[ensemble] init: atoms are only defined for scalar models")
        z = np.linspace(cfg.atoms[0], cfg.atoms[1], cfg.M)[:, None]
    else:
        mean = cfg.mean if cfg.mean is not None else cfg.z0
        # eigh instead of cholesky so that a zero variance is allowed
        lam, U = np.linalg.eigh(cfg.var)
        S = U * np.sqrt(np.clip(lam, 0.0, None))
        z = mean + rng.standard_normal((cfg.M, cfg.dim)) @ S.T
    return Ensemble(np.repeat(z, cfg.replicate, axis=0))


# -- twin experiment -----------------------------------------------------------

@dataclass
class RunResult:
    records: List[RunRecord]
    final: Optional[Ensemble] = None
    error: Optional[str] = None
    snapshots: List[tuple] = field(default_factory=list)
    histograms: List[tuple] = field(default_factory=list)
    coupling: Optional[np.ndarray] = None
    rmse_steps: np.ndarray = field(default_factory=lambda: np.empty(0))  # every step, not only records

    @property
    def ok(self):
        return self.error is None

    def summary(self, burn_in=0.1):
        """Time mean of the per-step RMSE after the burn-in fraction."""
        r = self.rmse_steps
        if r.size == 0:
            return float("nan")
        return float(np.mean(r[int(burn_in * r.size):]))


def simulate_truth(cfg: ExperimentConfig, model=None, obs=None):
    """Truth states (n+1, Nz) and observations (n, Ny).

    Discrete mode observes the truth after each cycle; with a fixed datum
    every cycle sees that datum. Continuous mode returns the increments
    dy_n = h(z_n) dt + (R dt)^1/2 xi_n.
    """
    model = model or build_model(cfg)
    obs = obs or build_observation(cfg, model)
    n = cfg.n_steps
    rt, ro = make_rng(cfg.seed, STREAM_TRUTH), make_rng(cfg.seed, STREAM_OBS)
    z = np.empty((n + 1, cfg.dim))
    z[0] = cfg.z0
    if cfg.mode == "continuous":
        noise = rt.standard_normal((n, cfg.dim))
        for k in range(n):
            z[k + 1] = model.step(k * cfg.dt, z[k:k + 1], noise[k:k + 1])[0]
        hz = obs.apply(z[:-1])
        y = hz * cfg.dt + np.sqrt(cfg.dt) * ro.standard_normal(hz.shape) @ obs.chol.T
        return z, y
    for k in range(n):
        if isinstance(model, GaussianMapModel):
            z[k + 1] = model.sample(z[k:k + 1], rt)[0]
        else:
            seed = int(rt.integers(0, 2 ** 63 - 1))
            z[k + 1] = euler_maruyama_paths(model, z[k:k + 1], seed, t0=k * model.interval)[0, -1]
    if cfg.y is not None:
        y = np.tile(cfg.y, (n, 1))
    else:
        y = obs.apply(z[1:]) + ro.standard_normal((n, obs.dim)) @ obs.chol.T
    return z, y


def _weighted_mean(e: Ensemble):
    w = e.weights
    return w @ e.states / w.sum()


def _discrete_step(cfg, step, ens, model, obs, rng, k):
    if isinstance(model, SdeModel) and k > 0:
        # the filter scenarios integrate from t = 0; shift time-dependent drifts
        model = replace(model, drift=lambda t, z, _f=model.drift, _s=k * model.interval: _f(t + _s, z))
    return step(ens, model, obs, rng)


def run_twin_experiment(cfg: ExperimentConfig, method=None, M=None, seed=None, keep_final=False,
                        dump_coupling=False) -> RunResult:
    """Simulate truth and data, run one filter, return per-step records.

    Filter failures stop the run; the records up to the failure are kept
    and the error message is stored in ``RunResult.error``.
    """
    if method is not None or M is not None or seed is not None:
        cfg = replace(cfg, method=method or cfg.method, M=M or cfg.M,
                      seed=cfg.seed if seed is None else seed)
        validate(cfg)
    model = build_model(cfg)
    obs = build_observation(cfg, model)
    truth, ys = simulate_truth(cfg, model, obs)
    ens = initial_ensemble(cfg, make_rng(cfg.seed, STREAM_INIT))
    rng = make_rng(cfg.seed, STREAM_FILTER)
    out = RunResult([])
    if cfg.mode == "continuous":
        fcfg = ContinuousFilterConfig(cfg.method, cfg.dt, cfg.eps, max(cfg.K, 1))
        dt = cfg.dt
    else:
        step = FilterStep(cfg.method, cfg.K, cfg.tau_ess, cfg.n_homotopy)
        dt = cfg.interval if isinstance(model, SdeModel) else 1.0
    edges = None
    if cfg.histogram_bins > 0:
        edges = np.linspace(*cfg.histogram_range, cfg.histogram_bins + 1)
    rmse_all = []
    for k in range(cfg.n_steps):
        try:
            if cfg.mode == "continuous":
                ens = continuous_step(fcfg, ens, model, obs, ys[k], rng, t=k * dt)
            else:
                ens = _discrete_step(cfg, step, ens, model, obs.with_datum(ys[k]), rng, k)
            mean = _weighted_mean(ens)
            if not np.all(np.isfinite(mean)):
                raise StepError("non-finite ensemble mean", step=k)
        except NUMERICAL_ERRORS as err:
            out.error = f"step {k + 1}: {type(err).__name__}: {err}"
            log.error("%s with M=%d seed=%d failed at %s", cfg.method, cfg.M, cfg.seed, out.error)
            break
        rmse = float(np.sqrt(np.mean((mean - truth[k + 1]) ** 2))) if cfg.y is None else float("nan")
        rmse_all.append(rmse)
        if (k + 1) % cfg.record_every == 0 or k + 1 == cfg.n_steps:
            info = ens.info
            out.records.append(RunRecord(k + 1, (k + 1) * dt, rmse, float(info.get("ess", math.nan)),
                                         float(info.get("log_evidence", math.nan))))
            if cfg.snapshots:
                out.snapshots.append((k + 1, ens.states.copy(), ens.weights.copy()))
            if edges is not None and ens.dim == 1:
                mass, _ = np.histogram(ens.states[:, 0], bins=edges, weights=ens.weights)
                out.histograms.append((k + 1, edges, mass / ens.weights.sum()))
    if keep_final or cfg.snapshots:
        out.final = ens
    if dump_coupling and "coupling" in ens.info:
        out.coupling = np.asarray(ens.info["coupling"].P)
    out.rmse_steps = np.array(rmse_all)
    return out


# -- output --------------------------------------------------------------------

def _fmt(x):
    return f"{x:.10e}"


def records_csv(records) -> str:
    lines = [RunRecord.HEADER] + [r.csv_row() for r in records]
    return "\n".join(lines) + "\n"


def _sibling(path, tag):
    base, ext = os.path.splitext(path)
    return f"{base}.{tag}{ext or '.csv'}"


def write_run(result: RunResult, path):
    """Write the run CSV plus snapshot, histogram and coupling files."""
    _write(path, records_csv(result.records))
    if result.snapshots:
        nz = result.snapshots[0][1].shape[1]
        lines = ["step,particle,weight," + ",".join(f"z{i}" for i in range(nz))]
        for k, z, w in result.snapshots:
            for i in range(z.shape[0]):
                lines.append(f"{k},{i},{_fmt(w[i])}," + ",".join(_fmt(v) for v in z[i]))
        _write(_sibling(path, "ensemble"), "\n".join(lines) + "\n")
    if result.histograms:
        lines = ["step,left,right,mass"]
        for k, edges, mass in result.histograms:
            for i in range(mass.size):
                lines.append(f"{k},{_fmt(edges[i])},{_fmt(edges[i + 1])},{_fmt(mass[i])}")
        _write(_sibling(path, "hist"), "\n".join(lines) + "\n")
    if result.coupling is not None:
        _write(_sibling(path, "coupling"), _matrix_csv(result.coupling))


def _matrix_csv(P):
    return "\n".join(",".join(_fmt(v) for v in row) for row in P) + "\n"


def _write(path, text):
    if path == "-":
        sys.stdout.write(text)
        return
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- sweeps --------------------------------------------------------------------

def _sweep_cell(args):
    cfg, method, M, seed = args
    res = run_twin_experiment(cfg, method=method, M=M, seed=seed)
    return method, M, seed, (res.summary(cfg.burn_in) if res.ok else None), res.error


def sweep_cells(cfg: ExperimentConfig):
    methods = cfg.sweep_methods or (cfg.method,)
    Ms = cfg.sweep_M or (cfg.M,)
    skip = set(cfg.sweep_skip)
    return [(cfg, m, M, s) for m in methods for M in Ms if (m, M) not in skip for s in cfg.sweep_seeds]


def run_sweep(cfg: ExperimentConfig, workers=None):
    """Run every (method, M, seed) cell and aggregate over seeds.

    Returns (rows, cells). Each row is (method, M, mean_rmse, stderr,
    n_runs) with stderr the sample standard deviation over sqrt(n_runs)
    (nan for a single run). Failed cells are left out of the aggregate and
    reported in ``cells`` with a None summary.
    """
    if not cfg.sweep_seeds:
        raise ConfigError("[sweep] seeds: at least one seed is required")
    cells = sweep_cells(cfg)
    workers = workers or cfg.workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    rows = []
    keys = []
    for _, m, M, _ in cells:
        if (m, M) not in keys:
            keys.append((m, M))
    for m, M in keys:
        vals = np.array([r[3] for r in results if r[0] == m and r[1] == M and r[3] is not None])
        n = vals.size
        mean = float(vals.mean()) if n else float("nan")
        se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        rows.append((m, M, mean, se, n))
    return rows, results


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_HEADER + "\n")
    for m, M, mean, se, n in rows:
        buf.write(f"{m},{M},{_fmt(mean)},{_fmt(se)},{n}\n")
    return buf.getvalue()


def cells_csv(results) -> str:
    lines = ["method,M,seed,summary_rmse,error"]
    for m, M, s, val, err in results:
        v = _fmt(val) if val is not None else ""
        e = (err or "").replace(",", ";").replace("\n", " ")
        lines.append(f"{m},{M},{s},{v},{e}")
    return "\n".join(lines) + "\n"


# -- smoothing -----------------------------------------------------------------

def smoothing_at_zero(cfg: ExperimentConfig, fbsde=False):
    """t=0 smoothing weights for the configured prior and datum.

    Gaussian map models with a linear operator use the closed form; SDE
    models weight each initial particle by the likelihood of its forecast.
    With ``fbsde`` (SDE models) the backward FBSDE values y_0 are returned
    as well. Returns (states, weights, values or None).
    """
    from .smoothing import smoothing_weights

    model = build_model(cfg)
    obs = build_observation(cfg, model)
    if cfg.y is None:
        _, ys = simulate_truth(replace(cfg, cycles=1, mode="discrete"), model, obs)
        obs = obs.with_datum(ys[0])
    prior = initial_ensemble(cfg, make_rng(cfg.seed, STREAM_INIT))
    if isinstance(model, GaussianMapModel):
        if obs.H is None:
            raise ConfigError("[observation] operator: closed-form smoothing needs a linear operator")
        return prior.states, smoothing_weights(prior, model, obs), None
    from .ensemble import normalize_log_weights
    seed = int(make_rng(cfg.seed, STREAM_FILTER).integers(0, 2 ** 63 - 1))
    paths = euler_maruyama_paths(model, prior.states, seed)
    ll = np.atleast_1d(log_likelihood(obs, paths[:, -1]))
    w = normalize_log_weights(ll)
    values = None
    if fbsde:
        from .fbsde import solve_backward
        values = solve_backward(paths, model, ll, form="log").values[0]
    return prior.states, w, values


def smoothing_csv(states, weights, values=None) -> str:
    nz = states.shape[1]
    head = ["particle"] + [f"z{i}" for i in range(nz)] + ["weight"] + (["fbsde_value"] if values is not None else [])
    lines = [",".join(head)]
    for i in range(states.shape[0]):
        row = [str(i)] + [_fmt(v) for v in states[i]] + [_fmt(weights[i])]
        if values is not None:
            row.append(_fmt(values[i]))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# -- command line --------------------------------------------------------------

def _parser():
    ap = argparse.ArgumentParser(prog="schrodinger-da", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, default_mode):
        p.add_argument("--config", required=True, help="config file or bundled config name")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        p.add_argument("--out", help="output CSV path ('-' for stdout)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config entry (repeatable)")
        p.set_defaults(mode=default_mode)
        return p

    common(sub.add_parser("simulate", help="write truth and observations"), None)
    f = common(sub.add_parser("filter", help="discrete-time twin experiment"), "discrete")
    f.add_argument("--scenario", help="filter scenario (%s)" % ", ".join(SCENARIOS))
    f.add_argument("--dump-coupling", action="store_true", help="write the last coupling matrix")
    s = common(sub.add_parser("smooth", help="t=0 smoothing weights"), "discrete")
    s.add_argument("--fbsde", action="store_true", help="also report backward FBSDE values (SDE models)")
    c = common(sub.add_parser("cfilter", help="continuous-time twin experiment"), "continuous")
    c.add_argument("--variant", help="continuous filter (%s)" % ", ".join(VARIANTS))
    c.add_argument("--eps", type=float, help="diffusion-map bandwidth for the FPF")
    c.add_argument("--dt", type=float, help="time step")
    w = common(sub.add_parser("sweep", help="aggregate RMSE over methods, M and seeds"), None)
    w.add_argument("--workers", type=int, help="parallel worker processes")
    w.add_argument("--cells", help="also write per-run summaries to this CSV")
    return ap


def _overrides(args):
    ov = list(args.set)
    if args.seed is not None:
        ov.append(f"experiment.seed={args.seed}")
    if args.mode is not None:
        ov.append(f"experiment.mode={args.mode}")
    for attr, key in (("scenario", "filter.method"), ("variant", "filter.method"), ("eps", "filter.eps"),
                      ("dt", "model.dt")):
        v = getattr(args, attr, None)
        if v is not None:
            ov.append(f"{key}={v}")
    return ov


def main(argv=None):
    """Entry point; returns the process exit code (0 ok, 1 config, 2 numerical)."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    out = args.out or cfg.output or "-"
    try:
        if args.command == "simulate":
            z, y = simulate_truth(cfg)
            dt = cfg.dt if cfg.mode == "continuous" else (cfg.interval if cfg.model != "gaussian_map" else 1.0)
            head = ["step", "time"] + [f"z{i}" for i in range(z.shape[1])] + [f"y{i}" for i in range(y.shape[1])]
            lines = [",".join(head)]
            for k in range(z.shape[0]):
                yk = y[k - 1] if k > 0 else np.full(y.shape[1], np.nan)
                lines.append(",".join([str(k), f"{k * dt:.6f}"] + [_fmt(v) for v in z[k]] + [_fmt(v) for v in yk]))
            _write(out, "\n".join(lines) + "\n")
            return 0
        if args.command == "smooth":
            states, w, values = smoothing_at_zero(cfg, fbsde=args.fbsde)
            _write(out, smoothing_csv(states, w, values))
            return 0
        if args.command == "sweep":
            rows, results = run_sweep(cfg, args.workers)
            _write(out, sweep_csv(rows))
            if args.cells:
                _write(args.cells, cells_csv(results))
            return 0
        res = run_twin_experiment(cfg, keep_final=True, dump_coupling=getattr(args, "dump_coupling", False))
        if out == "-":
            _write(out, records_csv(res.records))
        else:
            write_run(res, out)
        if not res.ok:
            print(f"numerical failure: {res.error}", file=sys.stderr)
            return 2
        if cfg.y is None:
            print(f"mean RMSE after burn-in: {res.summary(cfg.burn_in):.6g}", file=sys.stderr)
        else:
            m = _weighted_mean(res.final) if res.final is not None else None
            print(f"posterior mean: {m}", file=sys.stderr)
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
