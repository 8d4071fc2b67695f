"""Command-line front end.

``semirep <command> [flags]`` with commands ``fit``, ``summarize``,
``bootstrap``, ``avar`` and ``simulate``.  Artifacts are written to
``--out-dir``; every JSON artifact carries the fully resolved configuration
and a ``diagnostics`` array.  Exit status: 0 success, 1 invalid input,
2 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import csv
import io
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import avar, simlab, summaries
from .backfit import FitConfig, FitResult, fit as fit_model
from .core_model import ClusterDataset
from .errors import ConfigError, NumericalError, SemirepError, ValidationError
from .io import (dumps, fmt, load_dataset, params_from_dict, params_to_dict, theta_from_dict,
                 theta_to_dict, write_dataset)

DEFAULT_C_GRID = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "data": {"path": "", "columns": []},
    "model": {"p": 0},
    "fit": {"path": ""},
    "smoother": {"auto": True, "h": 0.0, "grid_points": 101, "undersmooth": True,
                 "candidates": 25, "span": [0.05, 0.5]},
    "backfit": {"tol_inner": 1e-8, "max_inner": 100, "tol_outer": 1e-6, "max_outer": 50,
                "scheme": "profiled", "variance": "df-adjusted"},
    "summary": {"functional": "survival", "c": DEFAULT_C_GRID, "fixed": {}, "knot": 4.0,
                "estimator": "semi"},
    "variance": {"method": "plugin"},
    "bootstrap": {"B": 200, "scheme": "cluster", "reselect": False},
    "avar": {"grid": 41, "bandwidth": 0.0, "trim": 0.01},
    "sim": {"design": "uniform", "n": 100, "m": 2, "R": 3, "beta": [1.0, 1.0],
            "sigma2": 1.0, "rho": 0.4, "theta": "sin8",
            "missingness": {"kind": "none", "pi": 1.0, "zeta": []},
            "replicates": 200, "output": "report", "oracle": True},
}

# values that are mappings themselves rather than sub-sections
_LEAF_TABLES = {"summary.fixed"}

log = logging.getLogger("semirep")


# ---------------------------------------------------------------------------
# configuration

def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and path not in _LEAF_TABLES:
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


def _set(d: dict, path: str, value) -> None:
    keys = path.split(".")
    for k in keys[:-1]:
        d = d[k]
    d[keys[-1]] = value


def _get(d: dict, path: str):
    for k in path.split("."):
        d = d[k]
    return d


def _coerce(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table, got {value!r}")
        return value
    return value


def resolve_config(user: Optional[dict] = None) -> dict:
    """Merge user settings over the defaults, rejecting unknown keys."""
    cfg = copy.deepcopy(DEFAULTS)
    flat_default = _flatten(DEFAULTS)
    for path, value in _flatten(user or {}).items():
        if path not in flat_default:
            raise ConfigError(f"unknown configuration key {path!r}")
        _set(cfg, path, _coerce(path, flat_default[path], value))
    return cfg


def read_config(path: Optional[str]) -> dict:
    if not path:
        return resolve_config()
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    return resolve_config(user)


def fit_config(cfg: dict) -> FitConfig:
    sm, bf = cfg["smoother"], cfg["backfit"]
    h = None if sm["auto"] else sm["h"]
    if h is not None and not h > 0:
        raise ConfigError("smoother.h must be positive when smoother.auto = false")
    span = tuple(float(v) for v in sm["span"])
    if len(span) != 2:
        raise ConfigError("smoother.span needs two entries")
    return FitConfig(h=h, grid_points=sm["grid_points"], tol_inner=bf["tol_inner"],
                     max_inner=bf["max_inner"], tol_outer=bf["tol_outer"],
                     max_outer=bf["max_outer"], n_candidates=sm["candidates"], span=span,
                     undersmooth=sm["undersmooth"], scheme=bf["scheme"],
                     variance=bf["variance"])


def _column_names(cfg: dict, p: int) -> list:
    names = list(cfg["data"]["columns"])
    if names and len(names) != p:
        raise ConfigError(f"data.columns names {len(names)} columns but the data have {p}")
    return names or [f"x{k + 1}" for k in range(p)]


def fixed_mask(cfg: dict, p: int) -> dict:
    """Column-index mask from ``summary.fixed``; names may be ``x<k>``,
    configured column names or 0-based integers.  Fixing a column whose
    ``<name>_knee`` companion exists also fixes the companion at
    ``(value - summary.knot)+`` unless it is given explicitly."""
    names = _column_names(cfg, p)
    out = {}
    for key, value in cfg["summary"]["fixed"].items():
        if key in names:
            col = names.index(key)
        elif key.startswith("x") and key[1:].isdigit() and 1 <= int(key[1:]) <= p:
            col = int(key[1:]) - 1
        elif key.isdigit() and int(key) < p:
            col = int(key)
        else:
            raise ConfigError(f"summary.fixed: unknown column {key!r}")
        out[col] = float(value)
    for col, value in list(out.items()):
        knee = f"{names[col]}_knee"
        if knee in names and names.index(knee) not in out:
            out.update(summaries.month_mask(value, col, names.index(knee), cfg["summary"]["knot"]))
    return out


def _parse_fix(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--fix expects name=value, got {item!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ConfigError(f"--fix value for {key!r} is not a number") from None
    return out


# ---------------------------------------------------------------------------
# diagnostics capture

class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.records = []

    def emit(self, record):
        self.records.append({"source": record.name, "message": record.getMessage()})


class Diagnostics:
    """Collects warnings from the logging and warnings machinery."""

    def __init__(self):
        self.items = []
        self._handler = _Collector()
        self._catch = warnings.catch_warnings(record=True)

    def __enter__(self):
        root = logging.getLogger("semirep")
        root.addHandler(self._handler)
        self._prev = root.propagate
        root.propagate = False
        self._w = self._catch.__enter__()
        warnings.simplefilter("always")
        return self

    def __exit__(self, *exc):
        root = logging.getLogger("semirep")
        root.removeHandler(self._handler)
        root.propagate = self._prev
        self._catch.__exit__(*exc)
        return False

    def add(self, source: str, message: str):
        self.items.append({"source": source, "message": message})

    def collect(self) -> list:
        out = list(self.items) + list(self._handler.records)
        out += [{"source": "warnings", "message": str(w.message)} for w in self._w]
        seen, uniq = set(), []
        for d in out:
            key = (d["source"], d["message"])
            if key not in seen:
                seen.add(key)
                uniq.append(d)
        return uniq


# ---------------------------------------------------------------------------
# helpers

def _write(out_dir: Path, name: str, text: str) -> Path:
    path = out_dir / name
    path.write_text(text)
    return path


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _load_data(cfg: dict) -> ClusterDataset:
    path = cfg["data"]["path"]
    if not path:
        raise ConfigError("no dataset given (use --data or data.path)")
    ds = load_dataset(path)
    if cfg["model"]["p"] and cfg["model"]["p"] != ds.p:
        raise ConfigError(f"model.p = {cfg['model']['p']} but the data have {ds.p} columns")
    return ds


def fit_to_dict(f: FitResult) -> dict:
    diag = {k: v for k, v in f.diagnostics.items() if k != "warnings"}
    return {"params": params_to_dict(f.params), "bandwidth": float(f.bandwidth),
            "iterations": f.iterations, "converged": f.converged,
            "param_change": float(f.param_change), "theta_change": float(f.theta_change),
            "loglik_trace": [float(v) for v in f.loglik_trace], "theta": theta_to_dict(f.theta),
            "details": diag}


def fit_from_dict(d: dict) -> FitResult:
    return FitResult(params_from_dict(d["params"]), theta_from_dict(d["theta"]),
                     float(d["bandwidth"]), int(d["iterations"]), bool(d["converged"]),
                     float(d["param_change"]), float(d["theta_change"]),
                     tuple(float(v) for v in d["loglik_trace"]), dict(d.get("details", {})))


def _get_fit(cfg: dict, ds: ClusterDataset, diag: Diagnostics) -> FitResult:
    if cfg["fit"]["path"]:
        try:
            doc = json.loads(Path(cfg["fit"]["path"]).read_text())
            return fit_from_dict(doc["fit"])
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read fit artifact {cfg['fit']['path']}: {exc}") from None
    f = fit_model(ds, fit_config(cfg))
    for w in f.warnings:
        diag.add("backfit", w)
    return f


def _functionals(cfg: dict, p: int) -> list:
    """(label, c or None, functional object) triples for the configured summary."""
    name = cfg["summary"]["functional"]
    fixed = fixed_mask(cfg, p)
    if name in ("survival", "indicator-above-c"):
        return [(name, float(c), summaries.get_functional(name, c=float(c), fixed=fixed))
                for c in cfg["summary"]["c"]]
    if fixed and name in ("mean", "second-moment"):
        base = {"mean": summaries.mean_functional, "second-moment":
                summaries.second_moment_functional}[name]
        return [(name, None, base(fixed))]
    return [(name, None, summaries.get_functional(name))]


def _response(obj):
    return obj if isinstance(obj, summaries.ResponseFunctional) else None


def _estimate(cfg, ds, f, label, fn, pv, diag) -> summaries.SummaryEstimate:
    est_kind = cfg["summary"]["estimator"]
    if est_kind == "semi":
        if cfg["variance"]["method"] == "plugin":
            return avar.plugin_estimate(ds, f, fn, machinery=pv)
        return summaries.kappa_semi(ds, f, fn)
    rf = _response(fn)
    if rf is None:
        raise ConfigError(f"estimator {est_kind!r} needs a response functional "
                          "(mean, second-moment or indicator-above-c)")
    if est_kind == "imputed":
        est = summaries.kappa_imputed(ds, f, rf)
        if cfg["variance"]["method"] == "plugin":
            pieces = pv.pieces(rf, "imputed")
            est = est.with_variance(avar.plug_in_variance(pieces, ds, "imputed", rf), "plugin")
        return est
    if est_kind == "ipw":
        pi = summaries.PiModel().fit(ds)
        est = summaries.kappa_ipw(ds, f, rf, pi)
        for w in est.diagnostics.get("warnings", []):
            diag.add("summaries", w)
        return est
    raise ConfigError(f"unknown summary.estimator {est_kind!r}")


def _estimator_fn(cfg, fns, bandwidth=None):
    """Replicate estimator for bootstrap variance; replicates are fitted at
    ``bandwidth`` unless ``bootstrap.reselect`` asks for per-replicate selection."""
    fc = fit_config(cfg)
    if bandwidth is not None and not cfg["bootstrap"]["reselect"]:
        fc = dataclasses.replace(fc, h=float(bandwidth))
    kind = cfg["summary"]["estimator"]

    def run(ds):
        f = fit_model(ds, fc)
        vals = []
        for _, _, fn in fns:
            if kind == "semi":
                vals.append(summaries.kappa_semi(ds, f, fn).kappa)
            elif kind == "imputed":
                vals.append(summaries.kappa_imputed(ds, f, _response(fn)).kappa)
            else:
                pi = summaries.PiModel().fit(ds)
                vals.append(summaries.kappa_ipw(ds, f, _response(fn), pi).kappa)
        return np.array(vals)
    return run


# ---------------------------------------------------------------------------
# commands

def cmd_fit(cfg, out_dir, diag):
    ds = _load_data(cfg)
    f = _get_fit(cfg, ds, diag)
    lo, hi = float(f.theta.eval_points[0]), float(f.theta.eval_points[-1])
    grid = np.linspace(lo, hi, cfg["smoother"]["grid_points"])
    th = f.theta(grid)
    sl = np.interp(grid, f.theta.eval_points, f.theta.slopes)
    _write(out_dir, "theta.csv", _csv(zip(grid, th, sl), ["z", "theta", "slope"]))
    return "fit.json", {"fit": fit_to_dict(f)}


def cmd_summarize(cfg, out_dir, diag):
    ds = _load_data(cfg)
    f = _get_fit(cfg, ds, diag)
    fns = _functionals(cfg, ds.p)
    method = cfg["variance"]["method"]
    if method not in ("plugin", "bootstrap", "none"):
        raise ConfigError(f"unknown variance.method {method!r}")
    pv = None
    if method == "plugin":
        pv = avar.PluginVariance(ds, f, grid_points=cfg["avar"]["grid"],
                                 bandwidth=cfg["avar"]["bandwidth"] or None,
                                 trim=cfg["avar"]["trim"])
    ests = [_estimate(cfg, ds, f, label, fn, pv, diag) for label, _, fn in fns]
    if method == "bootstrap":
        br = avar.bootstrap_variance(ds, _estimator_fn(cfg, fns, f.bandwidth), cfg["bootstrap"]["B"],
                                     scheme=cfg["bootstrap"]["scheme"], seed=cfg["seed"],
                                     threads=cfg["threads"], fit=f)
        if br.failures:
            diag.add("bootstrap", f"{br.failures} bootstrap replicates failed")
        ests = [e.with_variance(float(v), "bootstrap") for e, v in zip(ests, br.variance)]
    rows = []
    records = []
    for (label, c, _), e in zip(fns, ests):
        ci = e.ci95
        rec = {"functional": label, "c": c, "estimator": e.method, "kappa": float(e.kappa),
               "variance": None if e.variance is None else float(e.variance),
               "se": None if e.se is None else float(e.se),
               "ci95": None if ci is None else [float(ci[0]), float(ci[1])],
               "variance_source": e.variance_source, "n": e.n_used}
        records.append(rec)
        if c is not None:
            nan = float("nan")
            rows.append((c, e.kappa, nan if e.variance is None else e.variance,
                         nan if ci is None else ci[0], nan if ci is None else ci[1]))
    if rows:
        _write(out_dir, "curve.csv", _csv(rows, ["c", "kappa", "var", "lo95", "hi95"]))
    return "summary.json", {"fixed": {str(k): v for k, v in fixed_mask(cfg, ds.p).items()},
                            "estimates": records}


def cmd_bootstrap(cfg, out_dir, diag):
    ds = _load_data(cfg)
    f = _get_fit(cfg, ds, diag)
    fns = _functionals(cfg, ds.p)
    br = avar.bootstrap_variance(ds, _estimator_fn(cfg, fns, f.bandwidth), cfg["bootstrap"]["B"],
                                 scheme=cfg["bootstrap"]["scheme"], seed=cfg["seed"],
                                 threads=cfg["threads"], fit=f)
    if br.failures:
        diag.add("bootstrap", f"{br.failures} bootstrap replicates failed")
    labels = [lab if c is None else f"{lab}(c={c!r})" for lab, c, _ in fns]
    _write(out_dir, "replicates.csv",
           _csv([[b] + list(r) for b, r in enumerate(br.replicates)], ["replicate"] + labels))
    d = br.to_dict()
    return "bootstrap.json", {"quantities": labels,
                              "estimate": [float(v) for v in br.estimate],
                              "variance": [float(v) for v in br.variance],
                              "raw_variance": [float(v) for v in br.raw_variance],
                              "ci95": [[float(a), float(b)] for a, b in br.ci95],
                              "failures": d["failures"], "replicates": d["replicates"],
                              "scheme": d["scheme"]}


def cmd_avar(cfg, out_dir, diag):
    ds = _load_data(cfg)
    f = _get_fit(cfg, ds, diag)
    pv = avar.PluginVariance(ds, f, grid_points=cfg["avar"]["grid"],
                             bandwidth=cfg["avar"]["bandwidth"] or None, trim=cfg["avar"]["trim"])
    out = []
    for label, c, fn in _functionals(cfg, ds.p):
        pieces = pv.pieces(fn)
        v = avar.plug_in_variance(pieces, ds)
        info = pieces.info
        out.append({"functional": label, "c": c,
                    "kappa": float(summaries.kappa_semi(ds, f, fn).kappa),
                    "plugin_variance": float(v),
                    "M1_eigenvalues": [float(e) for e in info["M1_eigenvalues"]],
                    "trimmed_mass": float(info["trimmed_mass"]),
                    "bandwidth": float(info["bandwidth"]),
                    "residuals": {"G": float(info["G_residual"]),
                                  "theta_B": float(info["theta_B_residual"])}})
    return "avar.json", {"pieces": out}


def _sim_design(cfg):
    s = cfg["sim"]
    if s["design"] == "kenya":
        return simlab.KenyaDesign(n=s["n"], sigma2=s["sigma2"], rho=s["rho"],
                                  beta=tuple(s["beta"]) if len(s["beta"]) == 4
                                  else simlab.KenyaDesign.beta)
    if s["design"] != "uniform":
        raise ConfigError(f"unknown sim.design {s['design']!r}")
    mm = s["missingness"]
    mech = simlab.MissingnessMechanism(mm["kind"], float(mm["pi"]),
                                       tuple(float(v) for v in mm["zeta"]))
    return simlab.SimDesign(n=s["n"], m=s["m"], R=s["R"], beta=tuple(float(b) for b in s["beta"]),
                            sigma2=s["sigma2"], rho=s["rho"], theta=s["theta"], missingness=mech)


def cmd_simulate(cfg, out_dir, diag):
    s = cfg["sim"]
    design = _sim_design(cfg)
    gen = (simlab.generate_kenya_like if isinstance(design, simlab.KenyaDesign)
           else simlab.generate_sim_dataset)
    if s["output"] == "dataset":
        ds = gen(design, cfg["seed"])
        write_dataset(ds, out_dir / "data.csv")
        return "dataset.json", {"n": ds.n, "m": ds.m, "R": ds.R, "p": ds.p,
                                "truth": params_to_dict(design.params),
                                "columns": ds.meta.get("columns", [f"x{k + 1}" for k in range(ds.p)])}
    if s["output"] != "report":
        raise ConfigError(f"unknown sim.output {s['output']!r}")
    fns = _functionals(cfg, design.p if isinstance(design, simlab.SimDesign) else 4)
    labels = [lab if c is None else f"{lab}(c={c!r})" for lab, c, _ in fns]
    fc = fit_config(cfg)
    method = cfg["variance"]["method"]

    def pipeline(ds, ss):
        f = fit_model(ds, fc)
        out = {}
        pv = avar.PluginVariance(ds, f, grid_points=cfg["avar"]["grid"]) if method == "plugin" else None
        ests = [summaries.kappa_semi(ds, f, fn) if pv is None else
                avar.plugin_estimate(ds, f, fn, machinery=pv) for _, _, fn in fns]
        if method == "bootstrap":
            seed = int(ss.generate_state(1)[0])
            br = avar.bootstrap_variance(ds, _estimator_fn(cfg, fns, f.bandwidth), cfg["bootstrap"]["B"],
                                         scheme=cfg["bootstrap"]["scheme"], seed=seed)
            ests = [e.with_variance(float(v), "bootstrap") for e, v in zip(ests, br.variance)]
        for lab, e in zip(labels, ests):
            out[lab] = e.kappa if e.ci95 is None else (e.kappa, *e.ci95)
        return out

    oracle = {}
    if s["oracle"] and isinstance(design, simlab.SimDesign):
        name = cfg["summary"]["functional"]
        fixed = fixed_mask(cfg, design.p)
        for label, (lab, c, _) in zip(labels, fns):
            spec = ("survival", {"c": c, "fixed": fixed}) if c is not None else (name, {"fixed": fixed})
            try:
                oracle[label] = simlab.true_kappa_oracle(design, spec).value
            except ValidationError as exc:
                diag.add("simlab", f"no oracle for {lab}: {exc}")
    rep = simlab.run_experiment(lambda ss: gen(design, ss), pipeline, s["replicates"],
                                cfg["seed"], threads=cfg["threads"], oracle=oracle)
    for r, err in rep.failures:
        diag.add("simlab", f"replicate {r} failed: {err}")
    _write(out_dir, "replicates.csv", rep.to_csv())
    return "report.json", {"report": rep.to_dict()}


COMMANDS = {"fit": cmd_fit, "summarize": cmd_summarize, "bootstrap": cmd_bootstrap,
            "avar": cmd_avar, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semirep", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="TOML configuration file")
    ap.add_argument("--data", help="dataset CSV (overrides data.path)")
    ap.add_argument("--fit", dest="fit_path", help="fit.json from a previous `fit` run")
    ap.add_argument("--out-dir", default=".", help="directory for artifacts")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--bandwidth", type=float, help="fixed smoothing bandwidth")
    ap.add_argument("--replicates", type=int,
                    help="bootstrap.B for bootstrap/summarize, sim.replicates for simulate")
    ap.add_argument("--functional", help="summary functional by registered name")
    ap.add_argument("--fix", action="append", metavar="NAME=VALUE",
                    help="fix a covariate column (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return ap


def apply_flags(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.data:
        cfg["data"]["path"] = args.data
    if args.fit_path:
        cfg["fit"]["path"] = args.fit_path
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg["threads"] = args.threads
    if args.bandwidth is not None:
        cfg["smoother"]["auto"] = False
        cfg["smoother"]["h"] = args.bandwidth
    if args.replicates is not None:
        key = "sim.replicates" if args.command == "simulate" else "bootstrap.B"
        _set(cfg, key, args.replicates)
    if args.functional:
        cfg["summary"]["functional"] = args.functional
    if args.fix:
        cfg["summary"]["fixed"] = dict(cfg["summary"]["fixed"], **_parse_fix(args.fix))
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    try:
        cfg = apply_flags(read_config(args.config), args)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with Diagnostics() as diag:
            name, body = COMMANDS[args.command](cfg, out_dir, diag)
            items = diag.collect()
        doc = {"command": args.command, "config": cfg}
        doc.update(body)
        doc["diagnostics"] = items
        _write(out_dir, name, dumps(doc))
    except ValidationError as exc:
        print(f"semirep: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"semirep: numerical failure: {exc}", file=sys.stderr)
        return 2
    except SemirepError as exc:
        print(f"semirep: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
