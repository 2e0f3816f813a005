"""Experiment configs, campaign orchestration and run manifests.

A config is a TOML file::

    kind = "compare"            # mc | is | sweep | hjb | action | compare
    preset = "ou-chain-2x1"
    eps = [0.5, 0.25]
    n_samples = 100000
    dt = 0.01
    seed = 2024
    output_dir = "runs/compare"

    [params]                    # preset overrides (L, s, T, sigma, x0)
    L = 1.0

    [grid]                      # HJB / exit-probability grid
    points = 81

    [action]
    knots = 32

Every key has a default (see :class:`ExperimentConfig`).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .action import asymptotic_comparison, gap_trend, minimize_action
from .errors import ConfigError, DegenerateEstimatorError
from .estimators import (REPORT_COLUMNS, delta_ratio, importance_sampled, log_efficiency_metric, plain_mc,
                         varadhan_check)
from .fields import read_field_csv, write_field_csv
from .hjb import GridSpec, extract_control, solve_exit_bvp, solve_hjb
from .presets import PRESET_DEFAULTS, get_preset
from .sde import sample_paths

__all__ = ["ExperimentConfig", "RunManifest", "load_config", "parse_config", "run", "cache_control", "KINDS"]

KINDS = ("mc", "is", "sweep", "hjb", "action", "compare")
CLAMP_WARN = 0.01


@dataclass
class ExperimentConfig:
    kind: str = "mc"
    preset: str = "free-bm-1"
    params: dict = field(default_factory=dict)
    eps: list = field(default_factory=lambda: [1.0])
    n_samples: int = 10_000
    dt: float = 0.01
    seed: int = 0
    output_dir: str = "raresim-out"
    workers: int = 0  # 0: one per CPU
    estimator: str = "plain"  # sweep/action sampling: plain | is
    bridge: bool = True
    max_steps: int = 10_000_000
    chunk_size: int = 8192
    dump_paths: bool = False
    dump_count: int = 20
    grid_points: int = 81
    store_slices: int = 101
    control_cap: float = None
    penalty: float = None
    control_cache: str = None  # directory holding field_v.csv from an earlier hjb run
    action_knots: int = 32
    action_restarts: int = 2
    action_max_iter: int = 1000

    def validate(self, source: str = None):
        def bad(msg, key):
            raise ConfigError(_locate(msg, key, source), field=key, line=_line_of(key, source))

        if self.kind not in KINDS:
            bad(f"kind must be one of {KINDS}, got {self.kind!r}", "kind")
        if self.preset not in PRESET_DEFAULTS:
            bad(f"unknown preset {self.preset!r}", "preset")
        unknown = set(self.params) - set(PRESET_DEFAULTS[self.preset])
        if unknown:
            bad(f"unknown preset parameter(s) {sorted(unknown)}", sorted(unknown)[0])
        if not self.eps or any(not (isinstance(e, (int, float)) and e > 0 and math.isfinite(e)) for e in self.eps):
            bad(f"eps entries must be positive numbers, got {self.eps!r}", "eps")
        if not (isinstance(self.n_samples, int) and self.n_samples >= 2):
            bad(f"n_samples must be an integer >= 2, got {self.n_samples!r}", "n_samples")
        if not (isinstance(self.dt, (int, float)) and self.dt > 0):
            bad(f"dt must be positive, got {self.dt!r}", "dt")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2 ** 64):
            bad(f"seed must be an integer in [0, 2^64), got {self.seed!r}", "seed")
        if self.estimator not in ("plain", "is"):
            bad(f"estimator must be 'plain' or 'is', got {self.estimator!r}", "estimator")
        if not (isinstance(self.grid_points, int) and self.grid_points >= 5):
            bad(f"grid points must be an integer >= 5, got {self.grid_points!r}", "points")
        if not (isinstance(self.store_slices, int) and self.store_slices >= 2):
            bad("store_slices must be an integer >= 2", "store_slices")
        if self.control_cap is not None and not self.control_cap > 0:
            bad("control_cap must be positive", "control_cap")
        if self.penalty is not None and not self.penalty > 0:
            bad("penalty must be positive", "penalty")
        if not (isinstance(self.action_knots, int) and self.action_knots >= 8):
            bad("action knots must be an integer >= 8", "knots")
        if not (isinstance(self.action_restarts, int) and self.action_restarts >= 1):
            bad("action restarts must be an integer >= 1", "restarts")
        if not (isinstance(self.workers, int) and self.workers >= 0):
            bad("workers must be a nonnegative integer", "workers")
        if not (isinstance(self.chunk_size, int) and self.chunk_size >= 1):
            bad("chunk_size must be a positive integer", "chunk_size")
        return self

    def echo(self) -> dict:
        return dataclasses.asdict(self)


# nested TOML tables map onto flat config fields
_TABLES = {
    "grid": {"points": "grid_points", "store_slices": "store_slices", "control_cap": "control_cap",
             "penalty": "penalty"},
    "action": {"knots": "action_knots", "restarts": "action_restarts", "max_iter": "action_max_iter"},
    "simulation": {"bridge": "bridge", "max_steps": "max_steps", "chunk_size": "chunk_size",
                   "dump_paths": "dump_paths", "dump_count": "dump_count"},
}


def _line_of(key, source):
    if not source or key is None:
        return None
    pat = re.compile(rf"^[ \t]*{re.escape(str(key))}\s*=", re.M)
    m = pat.search(source)
    return source.count("\n", 0, m.start()) + 1 if m else None


def _locate(msg, key, source):
    line = _line_of(key, source)
    return f"line {line}: {msg}" if line else msg


def parse_config(text: str) -> ExperimentConfig:
    """Parse TOML text into a validated config; errors carry line numbers."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        line = int(m.group(1)) if m else (len(text.splitlines()) if "end of document" in str(exc) else None)
        raise ConfigError(f"invalid TOML: {exc}", line=line) from exc
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, val in raw.items():
        if key in _TABLES and isinstance(val, dict):
            for sub, sval in val.items():
                if sub not in _TABLES[key]:
                    raise ConfigError(_locate(f"unknown key {key}.{sub}", sub, text), field=f"{key}.{sub}",
                                      line=_line_of(sub, text))
                kwargs[_TABLES[key][sub]] = sval
        elif key == "params":
            if not isinstance(val, dict):
                raise ConfigError(_locate("params must be a table", key, text), field=key, line=_line_of(key, text))
            kwargs["params"] = dict(val)
        elif key in names:
            kwargs[key] = val
        else:
            raise ConfigError(_locate(f"unknown key {key!r}", key, text), field=key, line=_line_of(key, text))
    if "eps" in kwargs and not isinstance(kwargs["eps"], list):
        kwargs["eps"] = [kwargs["eps"]]
    if isinstance(kwargs.get("dt"), int):
        kwargs["dt"] = float(kwargs["dt"])
    cfg = ExperimentConfig(**kwargs)
    return cfg.validate(text)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    stages: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str)


class _Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(cfg.echo())
        self.workers = cfg.workers or os.cpu_count() or 1
        try:
            self.scenario = get_preset(cfg.preset, **cfg.params)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"cannot build preset {cfg.preset!r} with params {cfg.params}: {exc}",
                              field="params") from exc
        self._controls = {}

    # ------------------------------------------------------------ helpers
    def stage(self, name):
        run = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, et, ev, tb):
                run.manifest.stages.append({"stage": name, "seconds": time.perf_counter() - self.t0})
                if ev is not None and not getattr(ev, "_staged", False):
                    ev.args = (f"[stage {name}] {ev.args[0] if ev.args else ev}",) + tuple(ev.args[1:])
                    ev._staged = True
                return False

        return _Stage()

    def warn(self, msg):
        self.manifest.warnings.append(msg)

    def sim_kwargs(self):
        c = self.cfg
        return {"workers": self.workers, "chunk_size": c.chunk_size, "bridge": c.bridge, "max_steps": c.max_steps}

    def write_csv(self, name, header, rows):
        with open(self.out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        return name

    def control_for(self, eps):
        if eps in self._controls:
            return self._controls[eps]
        c = self.cfg
        sc = self.scenario
        if c.control_cache:
            path = Path(c.control_cache) / _field_name("v", eps, None)
            if not path.exists():
                path = Path(c.control_cache) / _field_name("v", eps, [eps])
            with self.stage(f"load control eps={eps}"):
                ctl = cache_control(path, sc, eps, c.grid_points)
        else:
            with self.stage(f"hjb eps={eps}"):
                grid = GridSpec.for_problem(sc.system, sc.domain, eps, c.grid_points, terminal=sc.terminal,
                                            n_store=c.store_slices, penalty=c.penalty)
                J = solve_hjb(sc.system, sc.domain, sc.terminal, eps, grid, penalty=c.penalty)
                ctl = extract_control(J, sc.system, c.control_cap)
        self._controls[eps] = ctl
        return ctl

    def note_report(self, rep):
        if rep.degenerate:
            self.warn(f"degenerate {rep.estimator_kind} estimate at eps={rep.eps}: no successes in {rep.n_samples}")
        if rep.clamp_fraction > CLAMP_WARN:
            self.warn(f"control cap active on {rep.clamp_fraction:.2%} of steps at eps={rep.eps}")
        elif rep.clamp_fraction > 0:
            self.warn(f"control cap hit on {rep.clamp_fraction:.4%} of steps at eps={rep.eps}")

    def estimate(self, eps, kind):
        c, sc = self.cfg, self.scenario
        if kind == "plain":
            with self.stage(f"plain eps={eps}"):
                rep = plain_mc(sc.system, sc.domain, sc.terminal, eps, c.n_samples, c.dt, c.seed, **self.sim_kwargs())
        else:
            ctl = self.control_for(eps)
            with self.stage(f"is eps={eps}"):
                rep = importance_sampled(sc.system, sc.domain, sc.terminal, eps, c.n_samples, c.dt, c.seed, ctl,
                                         **self.sim_kwargs())
        self.note_report(rep)
        return rep

    def dump_paths(self, eps, kind):
        c, sc = self.cfg, self.scenario
        m = min(c.dump_count, c.n_samples)
        ctl = self.control_for(eps) if kind == "is" else None
        res = sample_paths(sc.system, sc.domain, eps, c.dt, c.seed, m, ctl, record=True, bridge=c.bridge,
                           max_steps=c.max_steps)
        rows = []
        for j, (ts, xs), lw in zip(res.indices, res.paths, res.path_log_weights):
            for t, x, w in zip(ts, xs, lw):
                rows.append([kind, repr(float(eps)), int(j), repr(float(t))] + [repr(float(v)) for v in x]
                            + [repr(float(w))])
        return rows

    # ------------------------------------------------------------ kinds
    def reports(self, reps):
        return self.write_csv("reports.csv", list(REPORT_COLUMNS),
                              [[r.row()[k] for k in REPORT_COLUMNS] for r in reps])

    def run_mc(self):
        reps = [self.estimate(e, "plain") for e in self.cfg.eps]
        return [self.reports(reps)]

    def run_is(self):
        reps = [self.estimate(e, "is") for e in self.cfg.eps]
        return [self.reports(reps)]

    def run_compare(self):
        reps, rows = [], []
        for e in self.cfg.eps:
            p, q = self.estimate(e, "plain"), self.estimate(e, "is")
            reps += [p, q]
            eff = log_efficiency_metric([(e, _delta(p)), (e, _delta(q))])
            rows.append([repr(float(e)), repr(_delta(p)), repr(_delta(q)), repr(p.rel_err), repr(q.rel_err),
                         repr(eff[0].metric), repr(eff[1].metric), repr(q.clamp_fraction)])
            if not _delta(q) < _delta(p):
                self.warn(f"no variance reduction at eps={e}: delta_is={_delta(q)!r} delta_plain={_delta(p)!r}")
        return [self.reports(reps),
                self.write_csv("compare.csv", ["eps", "delta_plain", "delta_is", "rel_err_plain", "rel_err_is",
                                               "logeff_plain", "logeff_is", "clamp_fraction"], rows)]

    def run_sweep(self):
        reps = [self.estimate(e, self.cfg.estimator) for e in self.cfg.eps]
        rows = [[repr(r.eps), repr(r.log_mean), repr(r.log_second), int(r.flagged)] for r in varadhan_check(reps)]
        return [self.reports(reps), self.write_csv("sweep.csv", ["eps", "log_mean", "log_second", "flagged"], rows)]

    def run_hjb(self):
        c, sc = self.cfg, self.scenario
        written, rows = [], []
        for e in c.eps:
            ctl = self.control_for(e)
            with self.stage(f"exit bvp eps={e}"):
                qgrid = GridSpec.for_problem(sc.system, sc.domain, e, c.grid_points, nonlinear=False,
                                             n_store=c.store_slices)
                q = solve_exit_bvp(sc.system, sc.domain, e, qgrid)
            with self.stage(f"hjb eps={e} (value)"):
                grid = GridSpec.for_problem(sc.system, sc.domain, e, c.grid_points, terminal=sc.terminal,
                                            n_store=c.store_slices, penalty=c.penalty)
                J = solve_hjb(sc.system, sc.domain, sc.terminal, e, grid, penalty=c.penalty)
            extra = {"preset": c.preset, "params": sc.params}
            with self.stage(f"write fields eps={e}"):
                for kind, fld in (("J", J), ("v", ctl), ("q", q)):
                    name = _field_name(kind, e, c.eps)
                    write_field_csv(self.out / name, fld, kind, extra)
                    written.append(name)
            start = sc.domain.start[None]
            J0 = float(J.at(sc.domain.s, start)[0])
            q0 = float(q.at(sc.domain.s, start)[0])
            interior = ~(np.asarray(sc.domain.signed_distance(grid.nodes())) >= 0)
            gap = float(np.max(np.abs(np.exp(-J.values[0] / e) - q.values[0])[interior]))
            if J.meta.get("characteristic_nodes"):
                self.warn(f"{J.meta['characteristic_nodes']} boundary nodes have drift tangent to the boundary "
                          f"at eps={e}; they carry Dirichlet data like the rest of the boundary")
            if ctl.clamp_fraction > 0:
                self.warn(f"control cap {ctl.cap!r} active on {ctl.clamp_fraction:.2%} of stored nodes at eps={e}")
            rows.append([repr(float(e)), repr(J0), repr(q0), repr(math.exp(-J0 / e)), repr(gap), repr(ctl.cap),
                         repr(ctl.clamp_fraction), grid.n_steps, qgrid.n_steps, repr(J.meta["penalty"])])
        written.append(self.write_csv("hjb.csv", ["eps", "J_start", "q_start", "expJ_start", "sup_gap", "cap",
                                                  "clamp_fraction", "steps_J", "steps_q", "penalty"], rows))
        return written

    def run_action(self):
        c, sc = self.cfg, self.scenario
        with self.stage("minimize action"):
            path, val = minimize_action(sc.system, sc.domain, knots=c.action_knots, restarts=c.action_restarts,
                                        max_iter=c.action_max_iter, seed=c.seed)
        if not val.converged:
            self.warn(f"action minimisation did not converge (grad norm {val.grad_norm!r})")
        header = ["t"] + [f"x{k}" for k in range(sc.system.dim)]
        written = [self.write_csv("action.csv", header, list(path.rows()))]
        reps = [self.estimate(e, c.estimator) for e in c.eps]
        rows = asymptotic_comparison(reps, val.value)
        for r in rows:
            if r.flagged:
                self.warn(f"zero estimate at eps={r.eps}; log comparison undefined")
        written.append(self.reports(reps))
        written.append(self.write_csv(
            "comparison.csv", ["eps", "log_estimate", "action", "gap", "se_log", "flagged"],
            [[repr(r.eps), repr(r.log_estimate), repr(r.action), repr(r.gap), repr(r.se_log), int(r.flagged)]
             for r in rows]))
        written.append(self.write_csv(
            "action_summary.csv", ["action", "theta", "grad_norm", "converged", "iterations", "restart", "gap_trend"],
            [[repr(val.value), repr(path.theta), repr(val.grad_norm), int(val.converged), val.iterations,
              val.restart, int(gap_trend(rows))]]))
        return written


def _delta(rep):
    try:
        return delta_ratio(rep)
    except DegenerateEstimatorError:
        return math.nan


def _field_name(kind, eps, eps_list):
    if eps_list is None or len(eps_list) == 1:
        return f"field_{kind}.csv"
    return f"field_{kind}_eps{float(eps)!r}.csv"


def cache_control(path, scenario, eps: float, points: int = None):
    """Reload a control field dumped by an ``hjb`` run, checking it matches the model."""
    expect = {"kind": "v", "eps": float(eps), "preset": scenario.name,
              "intervals": [list(iv) for iv in scenario.domain.bounding_box]}
    if points is not None:
        expect["points"] = [int(points)] * scenario.system.dim
    field_ = read_field_csv(path, expect)
    params = field_.meta.get("params")
    if params is not None and json.loads(json.dumps(scenario.params)) != params:
        from .errors import CacheInvalidError
        raise CacheInvalidError(f"cached field was built for params {params}, model has {scenario.params}")
    return field_


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run(cfg: ExperimentConfig) -> RunManifest:
    """Execute one experiment; writes its CSVs and ``manifest.json``."""
    cfg.validate()
    r = _Run(cfg)
    written = getattr(r, f"run_{cfg.kind}")()
    if cfg.dump_paths:
        rows = []
        kinds = ["plain", "is"] if cfg.kind in ("is", "compare") else ["plain"]
        with r.stage("dump paths"):
            for k in kinds:
                rows += r.dump_paths(cfg.eps[0], k)
        header = ["estimator", "eps", "sample", "t"] + [f"x{k}" for k in range(r.scenario.system.dim)] + ["log_weight"]
        written.append(r.write_csv("paths.csv", header, rows))
    r.manifest.outputs = {name: _sha256(r.out / name) for name in written}
    (r.out / "manifest.json").write_text(r.manifest.to_json() + "\n")
    return r.manifest
