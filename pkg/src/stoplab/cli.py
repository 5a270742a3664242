"""Configuration-driven runner: ``stoplab {simulate,estimate,verify,suite,run}``.

Exit codes: 0 success or pass, 1 a check failed, 2 configuration or input
error, 3 numerical error. Errors are also written to stderr as one JSON record.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .errors import ConfigError, NumericalError, StoplabError
from .paths import TimeGrid, fmt_float, write_path_csv
from .processes import adaptation_from_dict, simulate_ensemble, spec_from_dict
from .stopderiv import (ShrinkFamily, _clean, characteristic_at, covariance_matrix_at,
                        covariance_rate_at, drift_at, variance_rate_at)
from .stopping import rule_from_dict
from .theorems import (PASS, CheckReport, RuleId, Scenario, check_characteristic,
                       check_distinct_distributions, check_first_exit_mean, check_ftc,
                       check_identity, check_levy_time_change, check_quadratic_variation,
                       check_zero_drift, run_suite, suite_ids)

log = logging.getLogger("stoplab")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

ESTIMATES = ("drift", "variance_rate", "covariance", "characteristic")
THEOREM_CHECKS = ("zero_drift", "ftc", "quadratic_variation", "levy_time_change",
                  "distinct_distributions", "first_exit_mean", "characteristic")

_POS = {"type": "number", "exclusiveMinimum": 0}
_OBJ = {"type": "object"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "experiment"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"type": "string"},
        "process": _OBJ,
        "grid": {"type": "object", "additionalProperties": False,
                 "properties": {"dt": _POS, "horizon": _POS}},
        "anchor": _OBJ,
        "family": {"type": "object", "additionalProperties": False,
                   "properties": {"kind": {"enum": ["offset", "first_exit"]},
                                  "initial": _POS,
                                  "factor": {"type": "number", "exclusiveMinimum": 0,
                                             "exclusiveMaximum": 1},
                                  "levels": {"type": "integer", "minimum": 2},
                                  "cap": _POS}},
        "sizes": {"type": "object", "additionalProperties": False,
                  "properties": {"outer": {"type": "integer", "minimum": 1},
                                 "continuations": {"type": "integer", "minimum": 2},
                                 "paths": {"type": "integer", "minimum": 1}}},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "threads": {"type": "integer", "minimum": 1},
        "tolerances": {"type": "object", "additionalProperties": False,
                       "properties": {"z": _POS, "tol_abs": {"type": "number", "minimum": 0}}},
        "options": _OBJ,
        "output": {"type": "object", "additionalProperties": False,
                   "properties": {"prefix": {"type": "string", "minLength": 1}}},
    },
}

# experiment-specific option keys
OPTION_KEYS = {
    "simulate": set(),
    "suite": set(),
    "drift": {"coord"},
    "variance_rate": {"coord", "variant", "centre", "integrand"},
    "covariance": {"coords", "driver", "matrix"},
    "characteristic": {"function"},
    "check:zero_drift": {"anchors", "spot_checks"},
    "check:ftc": {"x0", "drift", "diffusion", "anchors"},
    "check:quadratic_variation": {"rate", "t", "paths", "anchors"},
    "check:levy_time_change": {"rate", "s_max", "dt", "horizon", "on_exhaustion",
                               "require_positive"},
    "check:distinct_distributions": {"process_b", "t", "dt", "compare_rates"},
    "check:first_exit_mean": {"eps", "dt"},
    "check:characteristic": {"x0"},
}

TEST_FUNCTIONS = {"square": np.square, "cube": lambda x: x ** 3, "exp": np.exp, "cos": np.cos}

DEFAULTS = {"grid": {"dt": 1e-4, "horizon": 1.0},
            "anchor": {"kind": "at_time", "t": 0.5},
            "family": {"kind": "offset", "initial": 0.1, "factor": 0.5, "levels": 4},
            "sizes": {"outer": 200, "continuations": 1000, "paths": 2000},
            "tolerances": {"z": 3.0, "tol_abs": 0.02}}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class Config:
    """A validated experiment document with defaults filled in."""

    def __init__(self, doc: dict, seed: Optional[int] = None, threads: Optional[int] = None):
        validate(doc)
        self.doc = doc
        self.experiment = doc["experiment"]
        self.kind = self.experiment
        if self.kind not in OPTION_KEYS and not self._suite_or_rule():
            raise ConfigError(f"unknown experiment {self.kind!r}", field="experiment")
        opts = doc.get("options", {})
        allowed = OPTION_KEYS.get(self.kind, set())
        extra = sorted(set(opts) - allowed)
        if extra:
            raise ConfigError(f"unknown option {extra[0]!r} for {self.kind}",
                              field=f"options.{extra[0]}")
        self.options = opts
        s = doc.get("seed") if seed is None else seed
        if s is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)", field="seed")
        self.seed = int(s)
        self.threads = int(threads or doc.get("threads", 1))
        g = {**DEFAULTS["grid"], **doc.get("grid", {})}
        self.grid = _guard("grid", lambda: TimeGrid.from_horizon(float(g["dt"]),
                                                                 float(g["horizon"])))
        fam = {**DEFAULTS["family"], **doc.get("family", {})}
        self.family = _guard("family", lambda: ShrinkFamily(**fam))
        self.anchor = _guard("anchor", lambda: rule_from_dict(
            doc.get("anchor", DEFAULTS["anchor"])))
        sizes = {**DEFAULTS["sizes"], **doc.get("sizes", {})}
        self.n_outer, self.M, self.n_paths = sizes["outer"], sizes["continuations"], sizes["paths"]
        tol = {**DEFAULTS["tolerances"], **doc.get("tolerances", {})}
        self.z, self.tol_abs = float(tol["z"]), float(tol["tol_abs"])
        self.process = None
        if "process" in doc:
            self.process = _guard("process", lambda: spec_from_dict(doc["process"]))
        self.prefix = doc.get("output", {}).get("prefix", self.kind.replace(":", "_"))

    def _suite_or_rule(self) -> bool:
        if not self.kind.startswith("check:"):
            return False
        name = self.kind[6:]
        return name in {r.value for r in RuleId} or name in suite_ids()

    def require_process(self):
        if self.process is None:
            raise ConfigError(f"experiment {self.kind} needs a process", field="process")
        return self.process

    def scenario(self, process=None) -> Scenario:
        return Scenario(seed=self.seed, grid=self.grid, anchor=self.anchor, family=self.family,
                        n_outer=self.n_outer, M=self.M, threads=self.threads, z=self.z,
                        tol_abs=self.tol_abs, n_paths=self.n_paths, process=process)


def _guard(section, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except StoplabError as exc:
        field = exc.details.get("field")
        raise ConfigError(str(exc), field=f"{section}.{field}" if field else section) from None
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid {section}: {exc}", field=section) from None


def validate(doc) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object", field="")
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path)
        if exc.validator == "additionalProperties":
            extra = sorted(set(exc.instance) - set(exc.schema.get("properties", {})))
            if extra:
                path = ".".join(filter(None, [path, extra[0]]))
        elif exc.validator == "required":
            missing = [k for k in exc.validator_value if k not in exc.instance]
            path = ".".join(filter(None, [path, missing[0] if missing else ""]))
        raise ConfigError(exc.message, field=path) from None


def load_config(path, seed: Optional[int] = None, threads: Optional[int] = None) -> Config:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field="config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", field="config") from None
    return Config(doc, seed, threads)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_report(reports: Sequence[CheckReport], out_dir, prefix: str = "summary", *,
                include_runtime: bool = False) -> int:
    """Write ``<prefix>.csv`` and ``<prefix>.json``; return exit code 1 on any non-pass.

    Rows are ordered by id. Runtimes are left empty unless ``include_runtime``
    so that reruns produce byte-identical files.
    """
    if not reports:
        raise ConfigError("no reports to emit", field="reports")
    reports = sorted(reports, key=lambda r: r.id)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{prefix}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "verdict", "left", "right", "stderr", "seed", "runtime_s"])
        for r in reports:
            w.writerow([r.id, r.verdict, fmt_float(r.left), fmt_float(r.right),
                        fmt_float(r.stderr), r.seed,
                        fmt_float(r.runtime_s) if include_runtime else ""])
    _dump_json(os.path.join(out_dir, f"{prefix}.json"),
               [r.to_dict(include_runtime) for r in reports])
    return EXIT_OK if all(r.verdict == PASS for r in reports) else EXIT_FAIL


def _estimate_artifacts(est, cfg: Config, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    est.to_csv(os.path.join(out_dir, f"{cfg.prefix}.csv"))
    summary = {"experiment": cfg.kind, "seed": cfg.seed, **est.summary(cfg.z)}
    _dump_json(os.path.join(out_dir, f"{cfg.prefix}.json"), summary)
    return summary


def _matrix_artifacts(mat, cfg: Config, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    ext, fin, se = mat.extrapolated, mat.finest, mat.stderr
    with open(os.path.join(out_dir, f"{cfg.prefix}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "extrapolated", "stderr", "finest"])
        for i in range(ext.shape[0]):
            for j in range(ext.shape[1]):
                w.writerow([i, j, fmt_float(ext[i, j]), fmt_float(se[i, j]),
                            fmt_float(fin[i, j])])
    summary = {"experiment": cfg.kind, "seed": cfg.seed, "extrapolated": ext.tolist(),
               "stderr": se.tolist(), "finest": fin.tolist(),
               "min_eigenvalue": mat.min_eigenvalue()}
    _dump_json(os.path.join(out_dir, f"{cfg.prefix}.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run_simulate(cfg: Config, out_dir) -> int:
    spec = cfg.require_process()
    n = cfg.doc.get("sizes", {}).get("paths", 1)
    ens = simulate_ensemble(spec, cfg.grid, n, cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, p in enumerate(ens):
        name = f"{cfg.prefix}_path{i:05d}.csv"
        write_path_csv(os.path.join(out_dir, name), p)
        files.append(name)
    _dump_json(os.path.join(out_dir, f"{cfg.prefix}.json"),
               {"experiment": "simulate", "seed": cfg.seed, "dt": cfg.grid.dt,
                "n_steps": cfg.grid.n_steps, "dim": spec.dim, "paths": files,
                "process": spec.describe()})
    return EXIT_OK


def run_estimate(cfg: Config, out_dir) -> int:
    spec = cfg.require_process()
    o = cfg.options
    common = dict(threads=cfg.threads)
    args = (cfg.n_outer, cfg.M, cfg.seed, cfg.grid)
    if cfg.kind == "drift":
        est = drift_at(spec, cfg.anchor, cfg.family, *args, coord=int(o.get("coord", 0)),
                       **common)
    elif cfg.kind == "variance_rate":
        integrand = o.get("integrand")
        integrand = None if integrand is None else _guard(
            "options.integrand", lambda: adaptation_from_dict(integrand))
        est = _guard("options", lambda: _variance(spec, cfg, args, o, integrand))
    elif cfg.kind == "covariance":
        if o.get("matrix", False):
            mat = covariance_matrix_at(spec, cfg.anchor, cfg.family, *args,
                                       driver=int(o.get("driver", 0)), **common)
            _matrix_artifacts(mat, cfg, out_dir)
            return EXIT_OK
        coords = tuple(int(c) for c in o.get("coords", (0, 1)))
        est = _guard("options.coords", lambda: covariance_rate_at(
            spec, cfg.anchor, cfg.family, *args, coords=coords,
            driver=int(o.get("driver", 0)), **common))
    elif cfg.kind == "characteristic":
        name = o.get("function", "square")
        if name not in TEST_FUNCTIONS:
            raise ConfigError(f"unknown test function {name!r}", field="options.function")
        fam = _guard("family", lambda: ShrinkFamily(
            "first_exit", cfg.family.initial, cfg.family.factor, cfg.family.levels,
            cfg.family.cap))
        est = characteristic_at(spec, TEST_FUNCTIONS[name], fam, *args, **common)
    else:
        raise ConfigError(f"{cfg.kind!r} is not an estimate", field="experiment")
    _estimate_artifacts(est, cfg, out_dir)
    return EXIT_OK


def _variance(spec, cfg, args, o, integrand):
    return variance_rate_at(spec, cfg.anchor, cfg.family, *args,
                            variant=o.get("variant", "cond_var"), centre=o.get("centre"),
                            integrand=integrand, coord=int(o.get("coord", 0)),
                            threads=cfg.threads)


def _rules(items, field):
    return [_guard(field, lambda d=d: rule_from_dict(d)) for d in items]


def run_check(cfg: Config) -> CheckReport:
    name = cfg.kind[6:]
    o = cfg.options
    sc = cfg.scenario()
    if name in {r.value for r in RuleId}:
        return check_identity(name, cfg.scenario(cfg.process))
    if name == "zero_drift":
        anchors = _rules(o.get("anchors", [cfg.anchor.describe()]), "options.anchors")
        return check_zero_drift(cfg.require_process(), anchors, sc,
                                spot_checks=o.get("spot_checks"))
    if name == "ftc":
        b = _guard("options.drift", lambda: adaptation_from_dict(o.get("drift", 0.0)))
        s = _guard("options.diffusion", lambda: adaptation_from_dict(o.get("diffusion", 1.0)))
        anchors = _rules(o.get("anchors", [cfg.anchor.describe()]), "options.anchors")
        return check_ftc(float(o.get("x0", 0.0)), b, s, anchors, sc)
    if name == "quadratic_variation":
        a = _guard("options.rate", lambda: adaptation_from_dict(o.get("rate", 1.0)))
        anchors = _rules(o.get("anchors", []), "options.anchors")
        return check_quadratic_variation(cfg.require_process(), a, sc, t=o.get("t"),
                                         n_paths=int(o.get("paths", 100)), anchors=anchors)
    if name == "levy_time_change":
        a = _guard("options.rate", lambda: adaptation_from_dict(o.get("rate", 1.0)))
        kw = {k: o[k] for k in ("s_max", "dt", "horizon", "on_exhaustion", "require_positive")
              if k in o}
        return _guard("options", lambda: check_levy_time_change(cfg.require_process(), a, sc,
                                                                  **kw))
    if name == "distinct_distributions":
        if "process_b" not in o:
            raise ConfigError("distinct_distributions needs options.process_b",
                              field="options.process_b")
        spec_b = _guard("options.process_b", lambda: spec_from_dict(o["process_b"]))
        return check_distinct_distributions(
            cfg.require_process(), spec_b, float(o.get("t", 20.0)), cfg.n_paths, sc,
            dt=float(o.get("dt", 1e-3)), compare_rates=bool(o.get("compare_rates", False)),
            rate_anchor=cfg.anchor)
    if name == "first_exit_mean":
        return check_first_exit_mean(float(o.get("eps", 0.1)), sc, dt=float(o.get("dt", 1e-5)),
                                     n_paths=cfg.n_paths)
    if name == "characteristic":
        return check_characteristic(sc, x0=float(o.get("x0", 0.0)))
    return run_suite(sc, only=[name])[0]


def run_verify(cfg: Config, out_dir, include_runtime=False) -> int:
    if not cfg.kind.startswith("check:"):
        raise ConfigError(f"verify needs a check:<id> experiment, got {cfg.kind!r}",
                          field="experiment")
    rep = run_check(cfg)
    code = emit_report([rep], out_dir, cfg.prefix, include_runtime=include_runtime)
    _dump_json(os.path.join(out_dir, f"{cfg.prefix}_report.json"),
               rep.to_dict(include_runtime))
    return code


def run_config(cfg: Config, out_dir, include_runtime=False) -> int:
    if cfg.kind == "simulate":
        return run_simulate(cfg, out_dir)
    if cfg.kind in ESTIMATES:
        return run_estimate(cfg, out_dir)
    return run_verify(cfg, out_dir, include_runtime)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stoplab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON document")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads (speed only)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="format echoed on stdout; both are always written")
        sp.add_argument("--record-runtime", action="store_true",
                        help="store wall-clock runtimes in reports")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name, helptext in (("simulate", "simulate paths"), ("estimate", "run an estimator"),
                           ("verify", "run one check"), ("run", "dispatch on the experiment")):
        common(sub.add_parser(name, help=helptext))
    sp = sub.add_parser("suite", help="run the canonical check suite")
    common(sp, config_required=False)
    sp.add_argument("--all", action="store_true", help="run every check")
    sp.add_argument("--checks", help="comma-separated check ids")
    sp.add_argument("--list", action="store_true", help="list check ids and exit")
    return p


def _suite(args) -> int:
    if args.list:
        print("\n".join(suite_ids()))
        return EXIT_OK
    if not args.all and not args.checks:
        raise ConfigError("suite needs --all or --checks", field="checks")
    if args.config:
        cfg = load_config(args.config, args.seed, args.threads)
        if cfg.kind != "suite":
            raise ConfigError("suite configs use experiment 'suite'", field="experiment")
        sc = cfg.scenario()
    else:
        if args.seed is None:
            raise ConfigError("a seed is required (--seed)", field="seed")
        sc = Scenario(seed=args.seed, threads=args.threads or 1)
    only = None if args.all else [c.strip() for c in args.checks.split(",") if c.strip()]
    reports = run_suite(sc, only=only)
    code = emit_report(reports, args.out, "suite_summary", include_runtime=args.record_runtime)
    _echo(args, os.path.join(args.out, "suite_summary"))
    return code


def _echo(args, stem):
    ext = ".json" if args.format == "json" else ".csv"
    path = stem + ext
    if os.path.exists(path):
        with open(path) as fh:
            sys.stdout.write(fh.read())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1", field="threads")
        if args.command == "suite":
            return _suite(args)
        cfg = load_config(args.config, args.seed, args.threads)
        if args.command == "simulate" and cfg.kind != "simulate":
            raise ConfigError("simulate needs experiment 'simulate'", field="experiment")
        if args.command == "estimate" and cfg.kind not in ESTIMATES:
            raise ConfigError(f"estimate needs one of {ESTIMATES}", field="experiment")
        if args.command == "verify":
            code = run_verify(cfg, args.out, args.record_runtime)
        else:
            code = run_config(cfg, args.out, args.record_runtime)
        _echo(args, os.path.join(args.out, cfg.prefix))
        return code
    except NumericalError as exc:
        return _error(exc, EXIT_NUMERIC)
    except StoplabError as exc:
        return _error(exc, EXIT_CONFIG)


def _error(exc: StoplabError, code: int) -> int:
    rec = exc.record()
    rec["exit_code"] = code
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
