"""Experiment runner: ``exp-sq-lab <experiment> --config <path> [--seed S] [--threads T] [--out DIR]``.

Every run writes CSV/JSON artifacts and ``manifest.json`` into the output
directory.  Exit codes: 0 all checks passed, 1 a check failed, 2 bad config.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from .lattice import LatticeConfig
from .noise import MollifierSpec, mollifier
from .solver import ConvergenceError, ModelParams

EXPERIMENTS = ("decay", "coupling", "malliavin-check", "kernel-decay", "green-check", "selftest")
THREADS_ENV = "EXP_SQ_LAB_THREADS"


class ConfigError(ValueError):
    pass


# configuration ---------------------------------------------------------------------

LATTICE_KEYS = {f.name for f in fields(LatticeConfig)}
MODEL_KEYS = {f.name for f in fields(ModelParams)}
RUN_KEYS = {"n_samples", "master_seed", "thread_count", "output_dir"}

OPTION_DEFAULTS: dict[str, dict[str, Any]] = {
    "decay": {"distances": [2, 4, 6, 8, 10, 12], "observable": "tanh_mean", "scale": 1.0,
              "control": True, "min_r2": 0.9, "control_band": 0.15},
    "coupling": {"distances": [9, 12, 15, 18], "min_r2": 0.9},
    "malliavin-check": {"hsteps": [1e-2, 3e-3, 1e-3], "hstep": 1e-3, "fd_tol": 1e-3, "z": None,
                        "probe_offsets": [[0, 0], [1, 0], [3, 2]], "fk_walkers": 0, "fk_dt": None,
                        "fk_samples": 1},
    "kernel-decay": {"r_range": None, "band": 0.15},
    "green-check": {"dims": [1, 2, 3, 4], "m": None, "long_range_dims": [1, 2, 3],
                    "r_min": 1e-3, "r_max": 12.0, "n_r": 60},
    "selftest": {},
}

SAMPLING = {"decay", "coupling", "malliavin-check"}


@dataclass
class ExperimentConfig:
    experiment: str
    lattice: LatticeConfig = None
    model: ModelParams = None
    n_samples: int = 0
    master_seed: int = 0
    thread_count: int = 1
    output_dir: str = "out"
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _strict(section: str, data: dict, allowed: set):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    extra = set(data) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")


def _model_from(data: dict, lat: LatticeConfig) -> ModelParams:
    d = dict(data)
    if d.get("R", None) is None:
        d["R"] = math.inf
    d.setdefault("m", lat.m if lat else 1.0)
    if lat is not None and not math.isclose(d["m"], lat.m):
        raise ConfigError(f"model mass {d['m']} differs from lattice mass {lat.m}")
    if "alpha" not in d:
        raise ConfigError("model.alpha is required")
    return ModelParams(**d)


def load_config(raw: dict, experiment: str = None) -> ExperimentConfig:
    """Validate a config mapping; raises ConfigError on any problem."""
    try:
        _strict("config", raw, {"experiment", "lattice", "model", "run", "options"})
        exp = raw.get("experiment", experiment)
        if experiment is not None and exp != experiment:
            raise ConfigError(f"config is for {exp!r}, command line asks for {experiment!r}")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {exp!r}")
        cfg = ExperimentConfig(exp, raw=raw)
        if "lattice" in raw:
            _strict("lattice", raw["lattice"], LATTICE_KEYS)
            cfg.lattice = LatticeConfig(**raw["lattice"])
        if "model" in raw:
            _strict("model", raw["model"], MODEL_KEYS)
            cfg.model = _model_from(raw["model"], cfg.lattice)
        run = raw.get("run", {})
        _strict("run", run, RUN_KEYS)
        cfg.n_samples = run.get("n_samples", 0)
        cfg.master_seed = run.get("master_seed", 0)
        cfg.thread_count = run.get("thread_count", 1)
        cfg.output_dir = run.get("output_dir", "out")
        for k in ("n_samples", "master_seed", "thread_count"):
            if not isinstance(getattr(cfg, k), int) or isinstance(getattr(cfg, k), bool):
                raise ConfigError(f"run.{k} must be an integer")
        if cfg.thread_count < 1:
            raise ConfigError("run.thread_count must be >= 1")
        opts = raw.get("options", {})
        _strict("options", opts, set(OPTION_DEFAULTS[exp]))
        cfg.options = {**OPTION_DEFAULTS[exp], **opts}
        _validate(cfg)
        return cfg
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _validate(cfg: ExperimentConfig):
    exp, lat, o = cfg.experiment, cfg.lattice, cfg.options
    if exp in SAMPLING or exp == "kernel-decay":
        if lat is None or cfg.model is None:
            raise ConfigError(f"{exp} needs lattice and model sections")
        mollifier(lat, MollifierSpec(cfg.model.eps))
    if exp in ("decay", "coupling"):
        if cfg.n_samples < 2:
            raise ConfigError(f"{exp} needs run.n_samples >= 2")
    if exp == "malliavin-check" and cfg.n_samples < 1:
        raise ConfigError("malliavin-check needs run.n_samples >= 1")
    if exp == "decay":
        r = np.asarray(o["distances"], dtype=float)
        if len(r) < 3:
            raise ConfigError("decay needs at least three distances")
        if np.any(r < 1) or np.any(r > lat.L / 2 - 2):
            raise ConfigError("decay distances must lie in [1, L/2 - 2]")
        if np.any(np.abs(np.rint(r / lat.h) * lat.h - r) > 1e-9):
            raise ConfigError("decay distances must be multiples of h")
        if o["observable"] not in ("tanh_mean", "clipped_mean"):
            raise ConfigError("decay observable must be tanh_mean or clipped_mean")
    if exp == "coupling":
        from .coupling import diagonal_placement

        for l in o["distances"]:
            if l <= 4 * cfg.model.eps:
                raise ConfigError(f"separation {l} leaves no room for the gluing identity (eps >= l/4)")
            _, la = diagonal_placement(lat, l)
            if la / 2 >= lat.L / 2 or abs(la - l) > lat.h:
                raise ConfigError(f"separation {l} does not fit the torus")
    if exp == "malliavin-check":
        if o["fk_walkers"] and o["fk_walkers"] < 2:
            raise ConfigError("fk_walkers must be 0 or >= 2")
        for off in o["probe_offsets"]:
            if len(off) != lat.d:
                raise ConfigError("probe offsets must have d coordinates")
    if exp == "kernel-decay" and o["r_range"] is not None:
        lo, hi = o["r_range"]
        if lo < 2 / lat.m or hi > lat.L / 4:
            raise ConfigError("kernel-decay r_range must lie in [2/m, L/4]")
    if exp == "green-check":
        if any(int(d) < 1 for d in o["dims"]):
            raise ConfigError("dimensions must be >= 1")


# artifacts ----------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (tuple, list)):
        return ";".join(fmt(x) for x in v)
    return "" if v is None else str(v)


def write_csv(path: str, columns: list[str], rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    return o


def write_json(path: str, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunResult:
    tables: dict = field(default_factory=dict)  # name -> (columns, rows)
    documents: dict = field(default_factory=dict)  # name -> json object
    checks: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


class Stage:
    def __init__(self, res: RunResult, name: str):
        self.res, self.name = res, name

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.res.timings[self.name] = self.res.timings.get(self.name, 0.0) + time.perf_counter() - self.t


# experiments -------------------------------------------------------------------------


def run_decay(cfg: ExperimentConfig) -> RunResult:
    from .correlations import ObservableSpec, decay_scan, free_slope_oracle

    res = RunResult()
    o = cfg.options
    spec = ObservableSpec(o["observable"], o["scale"])
    runs = [("decay", cfg.model)]
    if o["control"] and cfg.model.alpha != 0:
        runs.append(("decay_control", cfg.model.with_(alpha=0.0, C_eps=None)))
    for name, params in runs:
        with Stage(res, name):
            scan = decay_scan(spec, spec, o["distances"], params, cfg.n_samples, cfg.lattice,
                              cfg.master_seed, cfg.thread_count)
        res.tables[f"{name}.csv"] = (["r", "cov", "stderr", "n_usable"], scan.rows())
        doc = scan.fit.to_dict()
        doc.update(alpha=params.alpha, n=scan.n, tainted=scan.tainted, monotone=scan.monotone)
        fit = scan.fit
        if params.alpha == 0 and fit.reliable:
            oracle = free_slope_oracle(cfg.lattice, params, scan.r[scan.usable])
            doc["oracle_slope"] = oracle.slope
            ok = abs(fit.slope / oracle.slope - 1) <= o["control_band"]
            res.checks[f"{name}.matches_free_kernel"] = bool(ok)
        if name == "decay":
            res.checks["decay.slope_negative"] = bool(fit.reliable and fit.slope < 0)
            res.checks["decay.r2"] = bool(fit.reliable and fit.r2 >= o["min_r2"])
        res.diagnostics[f"{name}.monotone"] = scan.monotone
        res.documents[f"{name}_fit.json"] = doc
    return res


def run_coupling(cfg: ExperimentConfig) -> RunResult:
    from .coupling import coupling_decay_experiment

    res = RunResult()
    o = cfg.options
    with Stage(res, "coupling"):
        cr = coupling_decay_experiment(cfg.model, cfg.lattice, o["distances"], cfg.n_samples,
                                       cfg.master_seed, cfg.thread_count)
    cols = ["l", "mean_error", "stderr", "n", "p", "beta", "slope_ref"]
    res.tables["coupling.csv"] = (cols, cr.rows())
    doc = cr.fit.to_dict()
    doc.update(beta=cr.beta, slope_ref=cr.slope_ref, tainted=cr.tainted, gluing_checked=cr.gluing_checked,
               l_target=cr.l_target, oracle=cr.oracle)
    res.documents["coupling_fit.json"] = doc
    res.checks["coupling.slope_negative"] = bool(cr.fit.reliable and cr.fit.slope < 0)
    res.checks["coupling.r2"] = bool(cr.fit.reliable and cr.fit.r2 >= o["min_r2"])
    res.checks["coupling.gluing"] = bool(cr.gluing_ok)
    res.diagnostics["coupling.below_reference"] = bool(cr.fit.slope <= 0.5 * cr.slope_ref)
    return res


def run_malliavin(cfg: ExperimentConfig) -> RunResult:
    from . import malliavin as mal
    from .noise import RngStream, make_noise_bundle
    from .solver import solve_sample

    res = RunResult()
    lat, params, o = cfg.lattice, cfg.model, cfg.options
    C = params.wick_constant(lat)
    z = lat.point(o["z"] if o["z"] is not None else (lat.N // 2,) * lat.d)
    probes = [lat.point(np.add(z, off)) for off in o["probe_offsets"]]
    dt = o["fk_dt"] if o["fk_dt"] is not None else lat.h ** 2 / (2 * lat.d)
    hsteps = sorted(set(o["hsteps"]) | {o["hstep"]}, reverse=True)

    def task(i):
        b = make_noise_bundle(lat, params.mollifier(), RngStream(cfg.master_seed, i), copies=False)
        sol = solve_sample(b, params, C)
        V = mal.linearized_potential(sol.phi, params, C)
        th = mal.solve_malliavin_derivative(sol.phi, z, params, C, V)
        errs = {}
        fds = {}
        for hs in hsteps:
            fd = mal.finite_difference_oracle(b, z, hs, params, C)
            fds[hs] = fd
            errs[hs] = float(np.max(np.abs(fd.values - th.theta.values)) / th.theta.sup())
        fk = {}
        if o["fk_walkers"] and i < o["fk_samples"]:
            band = mal.fk_discretization_band(V, z, dt, params.mollifier(), th.theta)
            for j, x in enumerate(probes):
                est, se = mal.feynman_kac_estimator(V, z, x, o["fk_walkers"], dt, params.mollifier(),
                                                    seed=cfg.master_seed * 1000003 + i * 101 + j)
                fk[x] = (est, se, float(band[x]))
        free = mal.Linv_array(mal.shifted_mollifier(lat, params.mollifier(), z).values, lat)
        return dict(errs=errs, theta=th.theta, fd=fds[o["hstep"]], fk=fk,
                    ident=abs(mal.integral_identity(th, V) - 1),
                    pos=-float(th.theta.values.min()),
                    comp=float(np.max(th.theta.values - free)), tainted=sol.report.tainted)

    from .fitting import map_ordered

    with Stage(res, "samples"):
        out = map_ordered(task, range(cfg.n_samples), cfg.thread_count)
    rows, fdrows = [], []
    for i, r in enumerate(out):
        for hs in hsteps:
            fdrows.append(dict(sample=i, hstep=hs, rel_err=r["errs"][hs]))
        for x in probes:
            est, se, band = r["fk"].get(x, (float("nan"), float("nan"), float("nan")))
            rows.append(dict(sample=i, z=z, x=x, theta_solve=r["theta"][x], theta_fd=r["fd"][x],
                             theta_fk=est, fk_stderr=se, fk_band=band))
    res.tables["probes.csv"] = (["sample", "z", "x", "theta_solve", "theta_fd", "theta_fk", "fk_stderr", "fk_band"],
                                rows)
    res.tables["malliavin_fd.csv"] = (["sample", "hstep", "rel_err"], fdrows)
    worst = max(r["errs"][o["hstep"]] for r in out)
    res.checks["malliavin.fd_rel_err"] = worst <= o["fd_tol"]
    # second order: the error ratio between the two coarsest steps tracks (h1/h2)^2
    h1, h2 = hsteps[0], hsteps[1]
    orders = [math.log(r["errs"][h1] / r["errs"][h2]) / math.log(h1 / h2) for r in out]
    res.checks["malliavin.fd_second_order"] = all(1.8 <= q <= 2.2 for q in orders)
    res.checks["malliavin.integral_identity"] = max(r["ident"] for r in out) <= 1e-9
    res.checks["malliavin.positivity"] = max(r["pos"] for r in out) <= 1e-12
    res.checks["malliavin.comparison"] = max(r["comp"] for r in out) <= 1e-12
    fkrows = [row for row in rows if math.isfinite(row["theta_fk"])]
    if fkrows:
        res.checks["malliavin.feynman_kac"] = all(
            abs(row["theta_fk"] - row["theta_solve"]) <= 3 * row["fk_stderr"] + row["fk_band"] for row in fkrows)
    res.documents["malliavin_summary.json"] = dict(worst_fd_rel_err=worst, fd_orders=orders, dt=dt,
                                                  hsteps=hsteps, z=list(z))
    return res


def run_kernel(cfg: ExperimentConfig) -> RunResult:
    from .malliavin import kernel_decay_check, kernel_profile

    res = RunResult()
    lat = cfg.lattice
    with Stage(res, "kernel"):
        prof = kernel_profile(lat, cfg.model.mollifier())
        fit, ok = kernel_decay_check(cfg.model.mollifier(), lat,
                                     tuple(cfg.options["r_range"]) if cfg.options["r_range"] else None,
                                     cfg.options["band"])
    rows = []
    for k in range(0, lat.N // 2 + 1):
        v = float(prof[(k,) + (0,) * (lat.d - 1)])
        rows.append(dict(r=k * lat.h, I=v, log_I=math.log(v) if v > 0 else float("nan")))
    res.tables["kernel.csv"] = (["r", "I", "log_I"], rows)
    res.documents["kernel_fit.json"] = fit.to_dict()
    res.checks["kernel.slope_band"] = ok
    res.checks["kernel.slope_negative"] = fit.slope < 0
    return res


def run_green(cfg: ExperimentConfig) -> RunResult:
    from .greenfn import GreenSpec, green_bounds_check, green_log_slope, green_quadrature

    res = RunResult()
    o = cfg.options
    m = o["m"] if o["m"] is not None else (cfg.lattice.m if cfg.lattice else 1.0)
    rows, reports = [], {}
    rs = np.geomspace(o["r_min"], o["r_max"], o["n_r"])
    with Stage(res, "green"):
        for d in o["dims"]:
            spec = GreenSpec(int(d), m)
            for r in rs:
                G = green_quadrature(float(r), spec)
                rows.append(dict(d=int(d), r=float(r), G=G, logG=math.log(G), local_slope=green_log_slope(float(r), spec)))
            rep = green_bounds_check(spec)
            reports[str(d)] = asdict(rep)
            if rep.short_exponent_ok is not None:
                res.checks[f"green.d{d}.short_exponent"] = rep.short_exponent_ok
            if rep.log_coefficient_ok is not None:
                res.checks[f"green.d{d}.log_coefficient"] = rep.log_coefficient_ok
            if int(d) in o["long_range_dims"]:
                res.checks[f"green.d{d}.long_range"] = rep.long_range_ok
            else:
                res.diagnostics[f"green.d{d}.long_range"] = rep.long_range_ok
            if int(d) in (1, 3):
                from .oracles import green_closed_form

                dev = max(abs(green_quadrature(r, spec) / green_closed_form(r, int(d), m) - 1)
                          for r in (0.1, 1.0, 5.0))
                res.checks[f"green.d{d}.closed_form"] = dev <= 1e-8
    res.tables["green.csv"] = (["d", "r", "G", "logG", "local_slope"], rows)
    res.documents["green_report.json"] = reports
    return res


def run_selftest_exp(cfg: ExperimentConfig) -> RunResult:
    from .selftest import run_selftest

    res = RunResult()
    lat = cfg.lattice or LatticeConfig(2, 64, 8.0)
    with Stage(res, "selftest"):
        checks = run_selftest(lat.d, lat.N, lat.L, cfg.master_seed)
    res.tables["selftest.csv"] = (["check", "passed", "value", "limit"],
                                  [dict(check=c.name, passed=c.passed, value=c.value, limit=c.limit) for c in checks])
    for c in checks:
        res.checks[c.name] = c.passed
    return res


RUNNERS: dict[str, Callable[[ExperimentConfig], RunResult]] = {
    "decay": run_decay,
    "coupling": run_coupling,
    "malliavin-check": run_malliavin,
    "kernel-decay": run_kernel,
    "green-check": run_green,
    "selftest": run_selftest_exp,
}


# driver ------------------------------------------------------------------------------


def effective_raw(cfg: ExperimentConfig) -> dict:
    raw = json.loads(json.dumps(cfg.raw))
    raw["experiment"] = cfg.experiment
    raw.setdefault("run", {})
    raw["run"].update(n_samples=cfg.n_samples, master_seed=cfg.master_seed, thread_count=cfg.thread_count,
                      output_dir=cfg.output_dir)
    return raw


def run(cfg: ExperimentConfig, plot: bool = False) -> tuple[int, dict]:
    """Execute one experiment; returns (exit code, manifest)."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    t0 = time.perf_counter()
    error = None
    try:
        res = RUNNERS[cfg.experiment](cfg)
    except (ConvergenceError, ArithmeticError) as e:
        res = RunResult(checks={"run.completed": False})
        error = f"{type(e).__name__}: {e}"
    artifacts = {}
    with Stage(res, "write"):
        for name, (cols, rows) in sorted(res.tables.items()):
            p = os.path.join(cfg.output_dir, name)
            write_csv(p, cols, rows)
            artifacts[name] = sha256(p)
        for name, doc in sorted(res.documents.items()):
            p = os.path.join(cfg.output_dir, name)
            write_json(p, doc)
            artifacts[name] = sha256(p)
    figures = []
    if plot:
        from .plotting import render

        with Stage(res, "plot"):
            figures = [os.path.basename(p) for p in render(cfg.output_dir)]
    passed = all(bool(v) for v in res.checks.values())
    manifest = dict(
        version=__version__,
        experiment=cfg.experiment,
        config=effective_raw(cfg),
        artifacts=artifacts,
        figures=figures,
        checks={k: bool(v) for k, v in res.checks.items()},
        failing=[k for k, v in res.checks.items() if not v],
        diagnostics=res.diagnostics,
        passed=passed,
        error=error,
        wall_time=time.perf_counter() - t0,
        timings=res.timings,
        environment=dict(python=platform.python_version(), numpy=np.__version__, scipy=scipy.__version__),
    )
    write_json(os.path.join(cfg.output_dir, "manifest.json"), manifest)
    return (0 if passed else 1), manifest


def _threads(flag: int | None, cfg_value: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            v = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}")
        if v < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1")
        return v
    return cfg_value


def _apply_overrides(cfg: ExperimentConfig, seed, threads, out) -> ExperimentConfig:
    if seed is not None:
        cfg.master_seed = seed
    cfg.thread_count = _threads(threads, cfg.thread_count)
    if cfg.thread_count < 1:
        raise ConfigError("thread count must be >= 1")
    if out is not None:
        cfg.output_dir = out
    return cfg


def first_divergence(a: str, b: str) -> str:
    with open(a) as fa, open(b) as fb:
        la, lb = fa.read().splitlines(), fb.read().splitlines()
    for i, (x, y) in enumerate(zip(la, lb)):
        if x != y:
            return f"line {i + 1}: {x!r} != {y!r}"
    return f"length {len(la)} != {len(lb)}"


def replay(manifest_path: str, seed=None, threads=None, out=None) -> tuple[int, dict]:
    """Rerun a manifest's config and diff the artifacts; 0 identical, 1 divergent, 2 refused."""
    man = json.load(open(manifest_path))
    if man.get("version") != __version__:
        raise ConfigError(f"manifest written by version {man.get('version')}, this is {__version__}")
    src_dir = os.path.dirname(os.path.abspath(manifest_path))
    cfg = load_config(man["config"])
    out = out or tempfile.mkdtemp(prefix="exp-sq-lab-replay-")
    cfg = _apply_overrides(cfg, seed, threads, out)
    _, new = run(cfg)
    report = dict(identical=True, divergences=[], replay_dir=out)
    for name, digest in sorted(man["artifacts"].items()):
        if not name.endswith(".csv"):
            continue
        if new["artifacts"].get(name) != digest:
            report["identical"] = False
            report["divergences"].append(dict(artifact=name,
                                              first=first_divergence(os.path.join(src_dir, name),
                                                                     os.path.join(out, name))))
            break
    return (0 if report["identical"] else 1), report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exp-sq-lab", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS + ("replay", "plot"))
    p.add_argument("target", nargs="?", help="manifest (replay) or output directory (plot)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true", help="render PNG figures next to the CSV artifacts")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.experiment == "plot":
            from .plotting import render

            if not args.target:
                raise ConfigError("plot needs an output directory")
            for path in render(args.target):
                print(path)
            return 0
        if args.experiment == "replay":
            if not args.target:
                raise ConfigError("replay needs a manifest path")
            code, rep = replay(args.target, args.seed, args.threads, args.out)
            print(json.dumps(rep, indent=2))
            return code
        raw = {}
        if args.config:
            with open(args.config) as fh:
                try:
                    raw = json.load(fh)
                except json.JSONDecodeError as e:
                    raise ConfigError(f"invalid JSON: {e}")
        elif args.experiment not in ("selftest", "green-check"):
            raise ConfigError(f"{args.experiment} needs --config")
        cfg = _apply_overrides(load_config(raw, args.experiment), args.seed, args.threads, args.out)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    code, man = run(cfg, plot=args.plot)
    for k, v in man["checks"].items():
        print(f"{'PASS' if v else 'FAIL'}  {k}")
    if man["error"]:
        print(f"error: {man['error']}", file=sys.stderr)
    print(f"wrote {cfg.output_dir}/manifest.json ({man['wall_time']:.1f} s)")
    return code


if __name__ == "__main__":
    sys.exit(main())
