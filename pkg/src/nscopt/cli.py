"""Command-line harness: list examples, run them, check derivatives.

Config files are flat ``key = value`` text with dotted prefixes
(``solver.opt_tol``, ``example.n``, ``output.path``); ``#`` starts a
comment. Flags override file values. Floats are serialized with 17
significant digits so logs round-trip exactly; non-finite values appear
as ``null`` in JSON output.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .errors import ConfigError, NumericalError
from .gallery import REGISTRY
from .problem import evaluate
from .solver import SolverOptions, TerminationCode, solve

LOG_FIELDS = ("iter", "mu", "phi", "f", "viol_ineq", "viol_eq",
              "stationarity", "step", "qp_status")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4

_SOLVER_FIELDS = {f.name: f for f in dataclasses.fields(SolverOptions)
                  if f.name != "x0"}


def _fmt(v) -> str:
    if isinstance(v, float):
        if not np.isfinite(v):
            return "null"
        return f"{v:.17g}"
    return str(v)


def _coerce(key: str, raw, template):
    """Parse a raw string against the type of an existing default value."""
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(template, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r} as "
                               f"{type(template).__name__}") from exc


def parse_config_file(path: str) -> dict:
    """Flat dotted-key config text to an ordered {key: raw string} dict."""
    out: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ConfigError(f"{path}:{lineno}",
                                      "expected 'key = value'")
                key, value = body.split("=", 1)
                out[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    return out


@dataclasses.dataclass
class RunConfig:
    example: str
    example_cfg: dict
    solver_cfg: dict
    out: str | None
    fmt: str
    seed: int | None


def build_run_config(example: str | None, file_kv: dict,
                     flag_kv: dict) -> RunConfig:
    """Merge config file and flags (flags win) into a validated RunConfig."""
    merged = dict(file_kv)
    merged.update({k: v for k, v in flag_kv.items() if v is not None})

    name = example or merged.pop("example.name", None)
    merged.pop("example.name", None)
    if name is None:
        raise ConfigError("example.name", "no example selected")
    if name not in REGISTRY:
        raise ConfigError("example.name", f"unknown example '{name}'")
    defaults = dict(REGISTRY[name].defaults)

    example_cfg = dict(defaults)
    solver_cfg: dict = {}
    out = None
    fmt = "json-lines"
    seed = None
    for key, raw in merged.items():
        if key == "seed":
            seed = _coerce(key, raw, 0)
        elif key.startswith("example."):
            sub = key.split(".", 1)[1]
            if sub not in defaults:
                raise ConfigError(key, f"'{name}' accepts "
                                       f"{sorted(defaults)}")
            example_cfg[sub] = _coerce(key, raw, defaults[sub])
        elif key.startswith("solver."):
            sub = key.split(".", 1)[1]
            if sub not in _SOLVER_FIELDS:
                raise ConfigError(key, "unknown solver option")
            template = _SOLVER_FIELDS[sub].default
            solver_cfg[sub] = _coerce(key, raw, template)
        elif key == "output.path":
            out = str(raw)
        elif key == "output.format":
            fmt = str(raw)
        else:
            raise ConfigError(key, "unknown key")
    if fmt not in ("json-lines", "csv"):
        raise ConfigError("output.format", f"unknown format '{fmt}'")

    if seed is not None:
        solver_cfg.setdefault("seed", seed)
        if "seed" in defaults and "example.seed" not in merged:
            example_cfg["seed"] = seed
    try:
        options = SolverOptions(**solver_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError("solver", str(exc)) from exc
    return RunConfig(name, example_cfg, solver_cfg, out, fmt, seed), options


def _log_lines(log, fmt: str):
    if fmt == "csv":
        yield ",".join(LOG_FIELDS)
        for r in log:
            yield ",".join([str(r.iter)] + [
                _fmt(getattr(r, f)) for f in LOG_FIELDS[1:-1]] + [r.qp_status])
    else:
        for r in log:
            vals = ", ".join(
                [f'"iter": {r.iter}'] +
                [f'"{f}": {_fmt(getattr(r, f))}' for f in LOG_FIELDS[1:-1]] +
                [f'"qp_status": "{r.qp_status}"'])
            yield "{" + vals + "}"


def _summary_json(sol, seed) -> str:
    parts = [
        f'"termination": "{sol.status.value}"',
        f'"f": {_fmt(sol.f)}',
        f'"max_violation": {_fmt(sol.max_violation)}',
        f'"stationarity": {_fmt(sol.stationarity)}',
        f'"iterations": {sol.iterations}',
        f'"wall_time": {_fmt(sol.wall_time)}',
        f'"seed": {seed if seed is not None else "null"}',
    ]
    return "{" + ", ".join(parts) + "}"


def _summary_table(sol, name: str) -> str:
    rows = [("example", name),
            ("termination", sol.status.value),
            ("iterations", str(sol.iterations)),
            ("objective", _fmt(sol.f)),
            ("max violation", _fmt(sol.max_violation)),
            ("stationarity", _fmt(sol.stationarity)),
            ("wall time [s]", f"{sol.wall_time:.3f}")]
    width = max(len(k) for k, _ in rows)
    lines = ["-" * (width + 28)]
    lines += [f"{k:<{width}}  {v}" for k, v in rows]
    lines.append("-" * (width + 28))
    return "\n".join(lines)


def cmd_list(stdout=None) -> int:
    stdout = stdout or sys.stdout
    for name, entry in REGISTRY.items():
        print(f"{name:12s} {entry.description}", file=stdout)
    return EXIT_OK


_EXIT_BY_STATUS = {
    TerminationCode.CONVERGED: EXIT_OK,
    TerminationCode.MAX_ITER: EXIT_NOT_CONVERGED,
    TerminationCode.LINESEARCH_FAILED: EXIT_NOT_CONVERGED,
    TerminationCode.STATIONARY_INFEASIBLE: EXIT_NOT_CONVERGED,
    TerminationCode.NUMERICAL_ERROR: EXIT_NUMERICAL,
}


def cmd_run(cfg: RunConfig, options: SolverOptions, stdout=None,
            stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    example = REGISTRY[cfg.example].build(cfg.example_cfg)
    sol = solve(example.problem, options)

    lines = list(_log_lines(sol.log, cfg.fmt))
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        with open(cfg.out + ".summary.json", "w", encoding="utf-8") as fh:
            fh.write(_summary_json(sol, cfg.seed) + "\n")
    else:
        for line in lines:
            print(line, file=stdout)
        print(_summary_json(sol, cfg.seed), file=stderr)
    print(_summary_table(sol, cfg.example), file=stderr)
    return _EXIT_BY_STATUS[sol.status]


def _fd_jacobian(problem, x, step=1e-6):
    """Central differences of (f, ci, ce) stacked, one column per coordinate."""
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        rp = evaluate(problem, xp)
        rm = evaluate(problem, xm)
        stack_p = np.concatenate([[rp.f], rp.ci, rp.ce])
        stack_m = np.concatenate([[rm.f], rm.ci, rm.ce])
        cols.append((stack_p - stack_m) / (2.0 * step))
    return np.stack(cols, axis=1)


def check_example(name: str, example_cfg: dict, rel_tol: float = 1e-5):
    """Feasible-point and derivative checks for one example; returns failures."""
    failures = []
    try:
        example = REGISTRY[name].build(example_cfg)
    except (ValueError, ConfigError) as exc:
        return [f"{name}: build failed: {exc}"]
    problem = example.problem
    if example.feasible_point is not None:
        rec = evaluate(problem, problem.variables.pack(example.feasible_point))
        if rec.viol_ineq_max > 1e-10 or rec.viol_eq_max > 1e-10:
            failures.append(
                f"{name}: known feasible point violates constraints "
                f"(ineq {rec.viol_ineq_max:.2e}, eq {rec.viol_eq_max:.2e})")
    rng = np.random.default_rng(12345)
    for trial in range(10):
        x = rng.normal(size=problem.dim) * 0.7
        rec = evaluate(problem, x)
        auto = np.vstack([rec.grad_f[None, :], rec.ci_jac, rec.ce_jac])
        fd = _fd_jacobian(problem, x)
        err = np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd)))
        if err > rel_tol:
            failures.append(f"{name}: gradient mismatch {err:.2e} "
                            f"at probe point {trial}")
            break
    return failures


def cmd_check(example: str | None, file_kv: dict, flag_kv: dict,
              stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    if example or any(k.startswith("example.") or k == "example.name"
                      for k in {**file_kv, **{k: v for k, v in flag_kv.items()
                                              if v is not None}}):
        cfg, _ = build_run_config(example, file_kv, flag_kv)
        targets = [(cfg.example, cfg.example_cfg)]
    else:
        targets = [(name, dict(entry.defaults))
                   for name, entry in REGISTRY.items()]
    failures = []
    for name, example_cfg in targets:
        failures.extend(check_example(name, example_cfg))
    if failures:
        for f in failures:
            print(f"FAIL {f}", file=stderr)
        return 1
    print(f"ok: {len(targets)} example(s) checked", file=stdout)
    return EXIT_OK


def _example_flags():
    """Union of per-example config keys exposed as CLI flags."""
    seen = {}
    for entry in REGISTRY.values():
        for key, default in entry.defaults.items():
            seen.setdefault(key, default)
    return seen


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nscopt", description="constrained nonsmooth solver harness")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list registered examples")

    def add_run_flags(p):
        p.add_argument("example", nargs="?", default=None)
        p.add_argument("--config", default=None, metavar="PATH")
        p.add_argument("--seed", default=None)
        p.add_argument("--max-iter", dest="solver.max_iter", default=None)
        p.add_argument("--opt-tol", dest="solver.opt_tol", default=None)
        p.add_argument("--format", dest="output.format", default=None,
                       choices=["json-lines", "csv"])
        p.add_argument("--out", dest="output.path", default=None)
        for key, default in _example_flags().items():
            if key == "seed":
                continue    # covered by the top-level --seed
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=f"example.{key}", default=None,
                           help=f"example parameter (default {default})")

    add_run_flags(sub.add_parser("run", help="solve one example"))
    add_run_flags(sub.add_parser("check",
                                 help="feasible-point and gradient checks"))
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; bad usage is a config error here
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    if args.command == "list":
        return cmd_list()
    flag_kv = {k: v for k, v in vars(args).items()
               if k not in ("command", "example", "config")}
    try:
        file_kv = parse_config_file(args.config) if args.config else {}
        if args.command == "check":
            return cmd_check(args.example, file_kv, flag_kv)
        cfg, options = build_run_config(args.example, file_kv, flag_kv)
        return cmd_run(cfg, options)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
