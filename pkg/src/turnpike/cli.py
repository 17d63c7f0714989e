"""Batch command line front end.

Subcommands ``list``, ``static``, ``solve``, ``analyze``, ``sweep`` and
``check``. A run is described by a flat JSON config (``--config``); every
field can be overridden by a flag of the same name. Results go to stdout as
JSON and, for trajectory runs, to CSV/JSON files under the output directory
(``TURNPIKE_OUT`` overrides it). Errors are reported as one JSON object on
stderr and mapped to exit codes: 2 invalid input, 3 solver failure,
4 violated structural assumption.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TurnpikeError
from .problems import make_problem, problem_defaults, problem_names

SUBCOMMANDS = ("list", "static", "solve", "analyze", "sweep", "check")
METHODS = ("shooting", "shooting2", "direct")
TOLERANCE_KEYS = ("tol_static", "tol_bvp", "tol_constraint", "tol_pg", "max_outer", "max_inner")
DEFAULT_OUT = "turnpike_out"
FALLBACK_T = 20.0


@dataclass
class RunConfig:
    problem: str = "toy"
    params: dict = field(default_factory=dict)
    T: list = field(default_factory=list)
    method: str | None = None
    N: int | None = None
    tolerances: dict = field(default_factory=dict)
    multistart: list | bool | None = None
    output: str = DEFAULT_OUT
    seed: int = 0
    workers: int | None = None
    C_cap: float = 100.0
    timings: bool = False

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {f for f in cls.__dataclass_fields__}
        tol = dict(raw.pop("tolerances", None) or {})
        for key in TOLERANCE_KEYS:
            if key in raw:
                tol[key] = raw.pop(key)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        cfg = cls(**{k: v for k, v in raw.items() if v is not None})
        cfg.tolerances = tol
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.params, dict):
            raise ConfigError("params must be a key-value mapping")
        self.problem_def = make_problem(self.problem, self.params)
        Ts = self.T if isinstance(self.T, (list, tuple)) else [self.T]
        try:
            Ts = [float(t) for t in Ts]
        except (TypeError, ValueError):
            raise ConfigError(f"T must be a number or a list of numbers, got {self.T!r}") from None
        if any(not (math.isfinite(t) and t > 0) for t in Ts):
            raise ConfigError("every T must be positive and finite")
        self.T = Ts
        if self.N is not None:
            if self.N == "auto":
                self.N = None
            elif int(self.N) != self.N or int(self.N) < 20:
                raise ConfigError("N must be an integer >= 20 or 'auto'")
            else:
                self.N = int(self.N)
        if self.method is None:
            self.method = "shooting2" if self.problem_def.shooting_ok else "direct"
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}")
        if self.method != "direct" and not self.problem_def.shooting_ok:
            raise ConfigError(f"{self.problem}: the control saturates on this problem; "
                              "shooting is not available, use method 'direct'")
        for key, value in self.tolerances.items():
            if key not in TOLERANCE_KEYS:
                raise ConfigError(f"unknown tolerance {key!r}")
            if not (isinstance(value, (int, float)) and value > 0):
                raise ConfigError(f"tolerance {key!r} must be positive")
        if isinstance(self.multistart, list):
            try:
                self.multistart = [float(v) for v in self.multistart]
            except (TypeError, ValueError):
                raise ConfigError("multistart must be a list of numbers or true") from None
        elif self.multistart not in (None, True, False):
            raise ConfigError("multistart must be a list of numbers or true")
        if self.workers is not None and int(self.workers) < 1:
            raise ConfigError("workers must be positive")
        if not (isinstance(self.C_cap, (int, float)) and self.C_cap > 0):
            raise ConfigError("C_cap must be positive")

    def horizons(self):
        if self.T:
            return self.T
        return [self.problem_def.default_T or FALLBACK_T]

    def echo(self) -> dict:
        out = asdict(self)
        out["N"] = "auto" if self.N is None else self.N
        return out


# ---------------------------------------------------------------------------
# serialization


def _plain(obj):
    """Recursively convert numpy values to JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return str(obj)


def dumps(obj) -> str:
    # float repr is the shortest string that round-trips, so output is byte-stable
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def trajectory_csv(traj) -> str:
    """CSV with header ``t,x_1..,y_1..,u_1..,px_1..,py_1..,H``; one row per node."""
    n, p, m = traj.x.shape[0], traj.y.shape[0], traj.u.shape[0]
    header = (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"y_{i + 1}" for i in range(p)]
              + [f"u_{i + 1}" for i in range(m)] + [f"px_{i + 1}" for i in range(n)]
              + [f"py_{i + 1}" for i in range(p)] + ["H"])
    py = np.broadcast_to(np.asarray(traj.py, dtype=float)[:, None], (p, traj.t.size))
    cols = np.vstack([traj.t[None], traj.x, traj.y, traj.u, traj.px, py, np.asarray(traj.H)[None]])
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) for v in row) for row in cols.T]
    return "\n".join(lines) + "\n"


def _tag(T):
    return f"{float(T):g}".replace(".", "p")


# ---------------------------------------------------------------------------
# pipelines


def _static(problem, T, cfg, guess=None):
    from .static import TOL_STATIC, solve_static
    tol = cfg.tolerances.get("tol_static", TOL_STATIC)
    if guess is not None:
        _, u, px, py = problem.static_guess
        guess = (np.full(problem.n, guess), u, px, py)
    return solve_static(problem, problem.rate(T), guess=guess, tol=tol)


def _nlp_options(cfg):
    from .direct import NLPOptions
    kw = {k: cfg.tolerances[k] for k in ("tol_constraint", "tol_pg", "max_outer", "max_inner")
          if k in cfg.tolerances}
    for k in ("max_outer", "max_inner"):
        if k in kw:
            kw[k] = int(kw[k])
    return NLPOptions(**kw)


def solve_one(cfg: RunConfig, T: float, start: float | None = None):
    """Solve one horizon; ``start`` picks the steady state used as initialization."""
    from .shooting import TOL_BVP, solve_shooting_bidirectional, solve_shooting_single
    from .direct import solve_direct

    problem = cfg.problem_def
    steady = _static(problem, T, cfg, guess=start)
    if cfg.method == "direct":
        traj, _ = solve_direct(problem, T, N=cfg.N, steady=steady, opts=_nlp_options(cfg))
    else:
        tol = cfg.tolerances.get("tol_bvp", TOL_BVP)
        fn = solve_shooting_single if cfg.method == "shooting" else solve_shooting_bidirectional
        traj = fn(problem, T, N=cfg.N, tol=tol)
    return traj, steady


def _run_record(traj, steady, start=None):
    rec = {"T": traj.T, "N": traj.N, "cost": traj.cost, "cost_average": traj.cost / traj.T,
           "py": traj.py, "meta": traj.meta, "steady_state": steady.to_dict()}
    if start is not None:
        rec["start"] = start
    return rec


def _analysis(cfg, traj, steady):
    from .analyzer import analyze, verify_estimates
    rep = analyze(traj, steady, cfg.problem_def)
    for kind in ("lin24", "exp13"):
        verify_estimates(rep, kind, C_cap=cfg.C_cap)
    return rep


def _sweep_member(cfg, T):
    t0 = time.perf_counter()
    traj, steady = solve_one(cfg, T)
    rep = _analysis(cfg, traj, steady)
    return rep, _run_record(traj, steady), time.perf_counter() - t0


class Output:
    def __init__(self, cfg: RunConfig):
        self.dir = Path(os.environ.get("TURNPIKE_OUT") or cfg.output)
        self.written = []

    def write(self, name, text):
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        path.write_text(text)
        self.written.append(str(path))
        return str(path)


def cmd_list(cfg, out):
    return {"problems": {name: problem_defaults(name) for name in problem_names()}}


def cmd_static(cfg, out):
    from .static import default_grid, multistart_static
    problem = cfg.problem_def
    T = cfg.horizons()[0]
    if cfg.multistart:
        grid = default_grid(problem) if cfg.multistart is True else cfg.multistart
        found = multistart_static(problem, problem.rate(T), grid=grid)
    else:
        found = [_static(problem, T, cfg)]
    return {"T": T, "records": [s.to_dict() for s in found]}


def cmd_solve(cfg, out):
    starts = cfg.multistart if isinstance(cfg.multistart, list) else [None]
    runs = []
    for T in cfg.horizons():
        for k, start in enumerate(starts):
            traj, steady = solve_one(cfg, T, start)
            stem = f"solve_{cfg.problem}_{cfg.method}_T{_tag(T)}" + (f"_start{k}" if start is not None else "")
            rec = _run_record(traj, steady, start)
            rec["csv"] = out.write(stem + ".csv", trajectory_csv(traj))
            runs.append(rec)
    return {"runs": runs}


def cmd_analyze(cfg, out):
    runs = []
    for T in cfg.horizons():
        traj, steady = solve_one(cfg, T)
        rep = _analysis(cfg, traj, steady)
        stem = f"analyze_{cfg.problem}_{cfg.method}_T{_tag(T)}"
        rec = _run_record(traj, steady)
        rec["report"] = rep.to_dict()
        rec["estimate_checks"] = rep.estimate_checks
        rec["csv"] = out.write(stem + ".csv", trajectory_csv(traj))
        runs.append(rec)
    return {"runs": runs}


def cmd_sweep(cfg, out):
    from .analyzer import classify_sweep
    Ts = cfg.horizons()
    workers = cfg.workers or os.cpu_count() or 1
    if workers > 1 and len(Ts) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(Ts))) as pool:
            results = list(pool.map(_sweep_member, [cfg] * len(Ts), Ts))
    else:
        results = [_sweep_member(cfg, T) for T in Ts]
    reports = [r[0] for r in results]
    cls = classify_sweep(reports)
    rows = ["T,plateau,plateau_T,nu_hat"]
    for ev in cls.evidence:
        rows.append(",".join(repr(float(v)) if v is not None else "" for v in
                             (ev["T"], ev["s"], ev["sT"], ev["nu_hat"])))
    csv = out.write(f"sweep_{cfg.problem}_{cfg.method}.csv", "\n".join(rows) + "\n")
    runs = []
    for rep, rec, dt in results:
        rec["report"] = rep.to_dict()
        rec["estimate_checks"] = rep.estimate_checks
        rec["seconds"] = dt
        runs.append(rec)
    return {"classification": cls.label, "evidence": cls.evidence, "runs": runs, "csv": csv}


def cmd_check(cfg, out):
    from .hyperbolic import diagnostics
    T = cfg.horizons()[0]
    steady = _static(cfg.problem_def, T, cfg)
    return {"T": T, "steady_state": steady.to_dict(), "diagnostics": diagnostics(cfg.problem_def, steady)}


COMMANDS = {"list": cmd_list, "static": cmd_static, "solve": cmd_solve,
            "analyze": cmd_analyze, "sweep": cmd_sweep, "check": cmd_check}


def _strip_timings(obj):
    if isinstance(obj, dict):
        return {k: (None if k == "seconds" else _strip_timings(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip_timings(v) for v in obj]
    return obj


def run(subcommand: str, cfg: RunConfig) -> tuple[int, dict]:
    """Execute one subcommand; returns ``(exit code, JSON report)``.

    Without ``cfg.timings`` every wall-clock field is null, so identical
    configs give byte-identical reports.
    """
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Output(cfg)
    t0 = time.perf_counter()
    result = COMMANDS[subcommand](cfg, out)
    elapsed = time.perf_counter() - t0
    if not cfg.timings:
        result = _strip_timings(result)
    report = {"command": subcommand, "config": cfg.echo(), **result,
              "timings": {"seconds": elapsed} if cfg.timings else None}
    if subcommand in ("solve", "analyze", "sweep", "static", "check"):
        stem = f"{subcommand}_{cfg.problem}" + (f"_{cfg.method}" if subcommand not in ("static", "check") else "")
        report["json"] = str(out.dir / (stem + ".json"))
        out.write(stem + ".json", dumps(report))
    return 0, report


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _number_list(text):
    if text.strip().startswith("["):
        return json.loads(text)
    return [float(v) for v in text.split(",") if v.strip()]


def _key_value(text):
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser():
    ap = _Parser(prog="turnpike", description="Long-horizon optimal control runs.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON config file; flags override its fields")
    ap.add_argument("--problem")
    ap.add_argument("--params", action="append", type=_key_value, metavar="KEY=VALUE")
    ap.add_argument("--T", type=_number_list, help="horizon or comma-separated sweep list")
    ap.add_argument("--method", choices=METHODS)
    ap.add_argument("--N")
    for key in TOLERANCE_KEYS:
        ap.add_argument(f"--{key}", type=float)
    ap.add_argument("--multistart", help="'true' for the default grid or comma-separated x values")
    ap.add_argument("--output")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--C_cap", type=float)
    ap.add_argument("--timings", action="store_true", default=None)
    return ap


def parse_config(argv) -> tuple[str, RunConfig]:
    args = build_parser().parse_args(argv)
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("subcommand", "config")}
    if "params" in flags:
        raw["params"] = {**raw.get("params", {}), **dict(flags.pop("params"))}
    if "N" in flags:
        flags["N"] = "auto" if flags["N"] == "auto" else _int(flags["N"])
    if "multistart" in flags:
        ms = flags["multistart"]
        flags["multistart"] = True if ms.lower() == "true" else _number_list(ms)
    tol = dict(raw.pop("tolerances", None) or {})
    for key in TOLERANCE_KEYS:
        if key in flags:
            tol[key] = flags.pop(key)
    raw.update(flags)
    raw["tolerances"] = tol
    return args.subcommand, RunConfig.from_mapping(raw)


def _int(text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"N must be an integer or 'auto', got {text!r}") from None


def _error_record(exc):
    rec = {"error": type(exc).__name__, "message": str(exc),
           "exit_code": getattr(exc, "exit_code", 1)}
    for attr in ("residual", "iterations", "which", "t"):
        if hasattr(exc, attr):
            rec[attr] = getattr(exc, attr)
    return rec


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        sub, cfg = parse_config(argv)
        code, report = run(sub, cfg)
    except TurnpikeError as exc:
        sys.stderr.write(dumps(_error_record(exc)))
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        err = ConfigError(str(exc))
        sys.stderr.write(dumps(_error_record(err)))
        return err.exit_code
    sys.stdout.write(dumps(report))
    return code


if __name__ == "__main__":
    sys.exit(main())
