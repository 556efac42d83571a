"""``mdmm-lab`` command line.

Exit codes: 0 success, 1 usage/config/input error, 2 solver diverged,
3 a training run diverged, 4 finished without meeting the target.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import artifacts, harness
from .config import ExperimentConfig, Mode, apply_overrides, load_config
from .errors import ConfigError, InvalidTarget, MdmmLabError
from .multiplier import BENCHMARKS, ConstraintState, SolveConfig, Termination, solve_constrained

EXIT_OK, EXIT_USAGE, EXIT_SOLVER_DIVERGED, EXIT_RUN_DIVERGED, EXIT_NOT_ATTAINED = 0, 1, 2, 3, 4

SOLVE_COLUMNS = ("step", "objective", "g_residual", "lambda", "lagrangian", "theta_norm")


class UsageError(Exception):
    pass


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _prepare_out(path: Optional[str], force: bool) -> Path:
    if not path:
        raise UsageError("--out is required")
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from exc


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    pairs = []
    if args.seed is not None:
        pairs.append(("seed", args.seed))
    if args.steps is not None:
        pairs.append(("steps", args.steps))
    if getattr(args, "lr_theta", None) is not None:
        pairs.append(("optimizer.lr_theta", args.lr_theta))
    if getattr(args, "lr_lambda", None) is not None:
        pairs.append(("multiplier.lr_lambda", args.lr_lambda))
    if getattr(args, "c", None) is not None:
        pairs.append(("multiplier.damping", args.c))
    if getattr(args, "method", None) is not None:
        pairs.append(("multiplier.method", args.method))
    if getattr(args, "alpha_grid", None) is not None:
        pairs.append(("alpha_grid", args.alpha_grid))
    cfg = apply_overrides(cfg, list(args.set or []) + pairs)
    epsilon = getattr(args, "epsilon", None)
    if epsilon is not None and epsilon <= 0:
        raise InvalidTarget(f"epsilon must be > 0, got {epsilon}")
    if cfg.mode is Mode.CONSTRAINED and cfg.epsilon is not None and cfg.epsilon <= 0:
        raise InvalidTarget(f"epsilon must be > 0, got {cfg.epsilon}")
    return cfg


# subcommands


def cmd_solve(args) -> int:
    if args.problem not in BENCHMARKS:
        raise UsageError(f"unknown problem {args.problem!r}; choose from {sorted(BENCHMARKS)}")
    problem = BENCHMARKS[args.problem]()
    lr_theta = 0.05 if args.lr_theta is None else args.lr_theta
    lr_lambda = lr_theta if args.lr_lambda is None else args.lr_lambda
    target = args.epsilon if args.epsilon is not None else (0.25 if args.problem == "target-only" else 0.0)
    state = ConstraintState(epsilon=target, damping=1.0 if args.c is None else args.c,
                            lambda_step=lr_lambda)
    config = SolveConfig(theta_step=lr_theta, method=args.method or "mdmm",
                         max_steps=args.steps or 1_000_000, residual_tol=args.tol)
    out = _prepare_out(args.out, args.force)
    trace = solve_constrained(problem, state, config, strict=False)
    norms = np.linalg.norm(trace.theta, axis=1)
    rows = zip(range(len(trace)), trace.objective.tolist(), trace.residual.tolist(),
               trace.lam.tolist(), trace.lagrangian.tolist(), norms.tolist())
    cols = SOLVE_COLUMNS + tuple(f"theta_{i}" for i in range(problem.dim))
    rows = (r + tuple(t) for r, t in zip(rows, trace.theta.tolist()))
    artifacts.atomic_write(out / "solve_trace.csv",
                           artifacts.csv_text(artifacts.SOLVE_TRACE_SCHEMA, cols, rows))
    print(f"{args.problem} {config.method.value}: {trace.termination.value} after {len(trace)} steps; "
          f"theta={np.array2string(trace.theta_final, precision=8)} lambda={trace.lambda_final:.8g} "
          f"|G|={abs(trace.residual[-1]):.3g}")
    if trace.termination is Termination.CONVERGED:
        return EXIT_OK
    if trace.termination is Termination.DIVERGED:
        _error("Diverged", trace.message)
        return EXIT_SOLVER_DIVERGED
    _error("MaxSteps", f"no convergence within {config.max_steps} steps")
    return EXIT_NOT_ATTAINED


def _status_exit(records) -> int:
    if any(r.status == harness.DIVERGED for r in records):
        return EXIT_RUN_DIVERGED
    if any(r.status == harness.NOT_ATTAINED for r in records):
        return EXIT_NOT_ATTAINED
    return EXIT_OK


def _print_record(r) -> None:
    f = r.final
    print(f"{r.label}: {r.status} recon_ema={harness._f(f.get('l_recon_ema'))} "
          f"kl={harness._f(f.get('l_kl'))} gq={harness._f(f.get('generation_quality'))} "
          f"lambda={harness._f(f.get('lambda_final'))}")


def cmd_preliminary(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    prelim = cfg.for_run(Mode.PRELIMINARY, cfg.label or "preliminary")
    try:
        eps_star, record = harness.run_preliminary(prelim, out)
    except MdmmLabError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_RUN_DIVERGED
    print(f"eps* = {eps_star!r}")
    return EXIT_OK


def _lineage_arg(path):
    if not path:
        return None
    rec = harness.RunRecord.load(path)
    return rec.final["l_recon_ema"], {**harness.lineage_from(rec), "file": str(path)}


def cmd_train(args) -> int:
    cfg = _config(args)
    if (args.epsilon is None) == (args.alpha is None) and not args.from_preliminary:
        if cfg.mode is Mode.PRELIMINARY:
            raise UsageError("train needs exactly one of --epsilon, --alpha or --from-preliminary")
    lineage = None
    if args.from_preliminary:
        eps, lineage = _lineage_arg(args.from_preliminary)
        cfg = cfg.for_run(Mode.CONSTRAINED, cfg.label or "constrained", epsilon=eps)
    elif args.epsilon is not None:
        cfg = cfg.for_run(Mode.CONSTRAINED, cfg.label or "constrained", epsilon=args.epsilon)
    elif args.alpha is not None:
        if args.alpha <= 0:
            raise UsageError("--alpha must be > 0")
        cfg = cfg.for_run(Mode.WEIGHTED, cfg.label or f"alpha_{args.alpha:g}", alpha=args.alpha)
    out = _prepare_out(args.out, args.force)
    record = harness.train_run(cfg, lineage)
    harness.persist_record(record, out)
    _print_record(record)
    if record.status == harness.DIVERGED:
        _error(record.error_kind or "DivergedRun", record.message)
    return _status_exit([record])


def _write_sweep(out: Path, name: str, sweep) -> None:
    artifacts.atomic_write(out / f"{name}.csv", sweep.csv())
    entries = []
    for r in sweep.records:
        for p in harness.record_paths(out, r).values():
            entries.append((str(p.relative_to(out)), r.status))
    entries.append((f"{name}.csv", sweep.status))
    artifacts.write_manifest(out, entries)
    for r in sweep.records:
        _print_record(r)
    i = sweep.argmin
    if i is not None:
        print(f"argmin {sweep.parameter} = {sweep.values[i]:g} ({sweep.status} sweep)")


def cmd_sweep_alpha(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    sweep = harness.sweep_alpha(cfg, out_dir=out, jobs=args.jobs)
    _write_sweep(out, "alpha_sweep", sweep)
    return _status_exit(sweep.records)


def cmd_sweep_epsilon(args) -> int:
    cfg = _config(args)
    lineage = None
    if args.from_preliminary:
        center, lineage = _lineage_arg(args.from_preliminary)
    elif args.epsilon is not None:
        center = args.epsilon
    else:
        raise UsageError("sweep-epsilon needs --epsilon or --from-preliminary")
    delta = None if args.delta is None else args.delta
    out = _prepare_out(args.out, args.force)
    sweep = harness.sweep_epsilon(cfg, center, delta, lineage=lineage, out_dir=out, jobs=args.jobs)
    _write_sweep(out, "epsilon_sweep", sweep)
    return _status_exit(sweep.records)


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    report = harness.compare_framework(cfg, out_dir=out, jobs=args.jobs)
    sys.stdout.write(report.text())
    runs = [report.preliminary, report.constrained]
    if report.alpha_sweep is not None:
        runs += report.alpha_sweep.records
    runs = [r for r in runs if r is not None]
    if not report.ok:
        failed = [r.label for r in runs if not r.completed]
        _error("DivergedRun", f"runs diverged: {', '.join(failed)}")
        return EXIT_RUN_DIVERGED
    return _status_exit(runs)


def load_records(directory):
    """All run records below ``directory`` in path order; corrupt files raise ValueError."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"{directory} is not a directory")
    records = []
    for path in sorted(directory.rglob("*.json")):
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"corrupt run record {path}: {exc}") from exc
        schema = data.get("schema_version") if isinstance(data, dict) else None
        if schema == artifacts.REPORT_SCHEMA:
            continue
        try:
            records.append((path, harness.RunRecord.from_dict(data)))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"corrupt run record {path}: {exc}") from exc
    return records


def report_table(records) -> str:
    cols = ("label", "mode", "value", "l_recon_ema", "l_kl", "gen_quality", "lambda", "status", "best")
    best = {}
    for i, (_, r) in enumerate(records):
        if r.mode == "preliminary" or not r.completed or r.generation_quality is None:
            continue
        key = (r.experiment, r.mode)
        if key not in best or r.generation_quality < records[best[key]][1].generation_quality:
            best[key] = i
    starred = set(best.values())

    def value(r):
        v = r.config.get("alpha") if r.mode == "weighted" else r.config.get("epsilon")
        return "" if v is None else f"{v:g}"

    def num(v):
        return "-" if v is None else f"{v:.6g}"

    rows = []
    for i, (_, r) in enumerate(records):
        f = r.final
        rows.append((i, (r.label, r.mode, value(r), num(f.get("l_recon_ema")), num(f.get("l_kl")),
                         num(f.get("generation_quality")), num(f.get("lambda_final")), r.status,
                         "*" if i in starred else "")))
    inf = float("inf")
    rows.sort(key=lambda t: (records[t[0]][1].generation_quality
                             if records[t[0]][1].generation_quality is not None else inf, t[0]))
    table = [cols] + [r for _, r in rows]
    widths = [max(len(row[j]) for row in table) for j in range(len(cols))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table) + "\n"


def cmd_report(args) -> int:
    directory = args.out or args.directory
    if not directory:
        raise UsageError("report needs a directory (positional or --out)")
    try:
        records = load_records(directory)
    except ValueError as exc:
        _error("CorruptRecord", str(exc))
        return EXIT_USAGE
    if not records:
        _error("NoRecords", f"no run records found in {directory}")
        return EXIT_USAGE
    sys.stdout.write(report_table(records))
    return EXIT_OK


# parser


def _common(p, training=True):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    if training:
        p.add_argument("--lr-theta", type=float)
        p.add_argument("--lr-lambda", type=float)
        p.add_argument("--c", type=float, help="damping constant")
        p.add_argument("--method", choices=["mdmm", "bdmm", "penalty"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdmm-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run a closed-form multiplier benchmark")
    p.add_argument("problem", help="quadratic | sphere | target-only")
    _common(p)
    p.add_argument("--epsilon", type=float, help="constraint target")
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("preliminary", help="measure eps* with the plain autoencoder")
    _common(p)
    p.set_defaults(func=cmd_preliminary)

    p = sub.add_parser("train", help="one constrained or alpha-weighted run")
    _common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--from-preliminary", metavar="RECORD", help="take eps from a preliminary record")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-alpha", help="alpha-weighted runs over a grid")
    _common(p)
    p.add_argument("--alpha-grid", type=_float_list)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("sweep-epsilon", help="constrained runs at eps - d, eps, eps + d")
    _common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float, help="absolute half-width (default: relative config value)")
    p.add_argument("--from-preliminary", metavar="RECORD")
    p.set_defaults(func=cmd_sweep_epsilon)

    p = sub.add_parser("pipeline", help="preliminary, constrained at eps*, alpha sweep")
    _common(p)
    p.add_argument("--alpha-grid", type=_float_list)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="tabulate run records in a directory")
    p.add_argument("directory", nargs="?")
    p.add_argument("--out", help="directory to read (alias of the positional)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidTarget) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_USAGE
    except ValueError as exc:
        _error("ValueError", str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
