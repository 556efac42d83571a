"""Experiment protocol: measure eps* on a plain autoencoder, train the VAE at
``recon = eps`` with the multiplier method, and compare against alpha-weighted
training.

Every run is a pure function of its config (including the master seed and run
label), which is echoed into the persisted :class:`RunRecord`.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import artifacts
from .config import ExperimentConfig, Mode, build_config, derive_seed
from .errors import DivergedRun, InvalidTarget, MdmmLabError, MultiplierDivergence, NonFiniteValue
from .multiplier import (
    ConstraintState,
    Method,
    assemble_theta_gradient,
    effective_state,
    lambda_update,
)
from .multiplier import Mode as ConstraintMode
from .nn import AdamWState, NetSpec, adamw_step, snapshot_bytes
from .testbed import SignalGenerator, VaeModel, generate_dataset, generation_quality, vae_losses

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "l_recon", "l_kl", "lambda", "g_residual", "total")
SWEEP_COLUMNS = ("grid_value", "final_l_recon", "final_l_kl", "generation_quality", "status")
SUMMARY_COLUMNS = ("kind", "label", "grid_value", "final_l_recon", "final_l_kl",
                   "generation_quality", "lambda_final", "status")

CONVERGED = "converged"
NOT_ATTAINED = "not_attained"
DIVERGED = "diverged"


@dataclass
class RunRecord:
    experiment: str
    label: str
    mode: str
    master_seed: int
    run_seed: int
    config: Dict[str, Any]
    status: str
    final: Dict[str, Optional[float]]
    trace: Dict[str, List[float]]
    flags: Dict[str, bool] = field(default_factory=dict)
    epsilon_lineage: Optional[Dict[str, Any]] = None
    message: str = ""
    error_kind: str = ""
    wall_clock_s: float = 0.0
    schema_version: str = artifacts.RECORD_SCHEMA

    @property
    def completed(self) -> bool:
        return self.status != DIVERGED

    @property
    def generation_quality(self) -> Optional[float]:
        return self.final.get("generation_quality")

    @property
    def stem(self) -> str:
        return f"{self.label}_{self.master_seed}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        if data.get("schema_version") != artifacts.RECORD_SCHEMA:
            raise ValueError(f"not a run record (schema {data.get('schema_version')!r})")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def trace_rows(self):
        cols = [self.trace[c] for c in TRACE_COLUMNS]
        for row in zip(*cols):
            yield (int(row[0]),) + tuple(float(v) for v in row[1:])


@functools.lru_cache(maxsize=8)
def _datasets(noise_std: float, n_train: int, n_heldout: int, master_seed: int):
    gen = SignalGenerator(noise_std=noise_std, seed=derive_seed(master_seed, "data"))
    train = generate_dataset(gen, n_train)
    heldout = generate_dataset(gen, n_heldout, seed=derive_seed(master_seed, "heldout"))
    train.flags.writeable = False
    heldout.flags.writeable = False
    return train, heldout


def datasets(config: ExperimentConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Training and held-out matrices; shared by every run with the same master seed."""
    g = config.generator
    return _datasets(g.noise_std, g.n_train, g.n_heldout, config.seed)


def build_model(config: ExperimentConfig, run_seed: int) -> VaeModel:
    m = config.model
    enc = NetSpec((64, *m.encoder_hidden, 2 * m.code_dim), m.activation,
                  derive_seed(run_seed, "encoder"))
    dec = NetSpec((m.code_dim, *m.decoder_hidden, 64), m.activation,
                  derive_seed(run_seed, "decoder"))
    return VaeModel(enc, dec)


class _Ema:
    """Bias-corrected exponential moving average."""

    def __init__(self, beta: float):
        self.beta = beta
        self.value = 0.0
        self.n = 0

    def update(self, x: float) -> None:
        self.value = self.beta * self.value + (1.0 - self.beta) * x
        self.n += 1

    def get(self) -> Optional[float]:
        if self.n == 0:
            return None
        return self.value / (1.0 - self.beta ** self.n)


def train_run(config: ExperimentConfig, lineage: Optional[Dict[str, Any]] = None,
              keep_model: bool = False):
    """Execute one run.  Failures are reported through ``status``, never raised.

    With ``keep_model`` returns ``(record, model)``.
    """
    t0 = time.perf_counter()
    label = config.run_label()
    run_seed = derive_seed(config.seed, label)
    mode = config.mode
    train, heldout = datasets(config)
    model = build_model(config, run_seed)
    o = config.optimizer
    opt = AdamWState(model.n_params, step_size=o.lr_theta, beta1=o.beta1, beta2=o.beta2,
                     weight_decay=o.weight_decay, eps_num=o.eps)
    rng = np.random.default_rng(derive_seed(run_seed, "stream"))
    ev = config.eval

    mult = config.multiplier
    method = Method(mult.method)
    epsilon = config.epsilon if mode is Mode.CONSTRAINED else 0.0
    cstate = None
    if mode is Mode.CONSTRAINED:
        if epsilon is None or epsilon <= 0:
            raise InvalidTarget(f"epsilon must be > 0, got {epsilon}")
        cstate = effective_state(
            ConstraintState(epsilon=epsilon, lam=0.0, damping=mult.damping,
                            lambda_step=mult.lr_lambda, mode=ConstraintMode(mult.mode)),
            method,
        )

    trace = {c: [] for c in TRACE_COLUMNS}
    ema_recon, ema_kl = _Ema(ev.ema_beta), _Ema(ev.ema_beta)
    window_start = max(config.steps - ev.ema_window, 0)
    seen_above = seen_below = False
    status, message, error_kind = CONVERGED, "", ""
    lb = None
    n = train.shape[0]

    try:
        for step in range(config.steps):
            batch = train[rng.integers(0, n, config.batch_size)]
            if mode is Mode.PRELIMINARY:
                lb, g_recon, _ = vae_losses(model, batch, None, deterministic=True)
                grad = g_recon
                lb.total = lb.l_recon
            elif mode is Mode.WEIGHTED:
                lb, g_recon, g_kl = vae_losses(model, batch, rng)
                grad = config.alpha * g_recon + g_kl
                lb.total = config.alpha * lb.l_recon + lb.l_kl
            else:
                lb, g_recon, g_kl = vae_losses(model, batch, rng, epsilon=epsilon,
                                               lam=cstate.lam, damping=cstate.damping)
                grad = assemble_theta_gradient(g_kl, g_recon, cstate.lam, lb.g_residual,
                                               cstate.damping, cstate.mode)
                seen_above |= lb.g_residual > 0
                seen_below |= lb.g_residual < 0
            if not math.isfinite(lb.total):
                raise NonFiniteValue(f"non-finite objective at step {step}")

            if step % ev.trace_every == 0 or step == config.steps - 1:
                for key, val in zip(TRACE_COLUMNS, (step, lb.l_recon, lb.l_kl, lb.lambda_now,
                                                    lb.g_residual, lb.total)):
                    trace[key].append(val)
            if step >= window_start:
                ema_recon.update(lb.l_recon)
                ema_kl.update(lb.l_kl)

            adamw_step(opt, model.params, grad)
            if cstate is not None and method is not Method.PENALTY:
                cstate = lambda_update(cstate, lb.g_residual, step)
    except MultiplierDivergence as exc:
        status, message, error_kind = DIVERGED, str(exc), "MultiplierDivergence"
    except NonFiniteValue as exc:
        status, message, error_kind = DIVERGED, str(exc), "DivergedRun"

    final: Dict[str, Optional[float]] = {
        "l_recon_ema": ema_recon.get(),
        "l_kl": ema_kl.get(),
        "l_recon_last": None if lb is None else lb.l_recon,
        "lambda_final": None if cstate is None else cstate.lam,
        "generation_quality": None,
    }
    flags: Dict[str, bool] = {}
    if status != DIVERGED:
        if not np.all(np.isfinite(model.params)):
            status, message, error_kind = DIVERGED, "non-finite parameters", "DivergedRun"
        else:
            final["generation_quality"] = generation_quality(
                model, heldout, ev.n_gen, seed=derive_seed(config.seed, "eval"))
    if mode is Mode.CONSTRAINED:
        ema = final["l_recon_ema"]
        miss = None if ema is None else abs(ema - epsilon)
        final["constraint_gap"] = miss
        if cstate.mode is ConstraintMode.INEQUALITY_UPPER:
            met = ema is not None and ema <= epsilon + ev.tolerance
        else:
            met = miss is not None and miss <= ev.tolerance
        if status != DIVERGED and not met:
            status = NOT_ATTAINED
        # recon never crossed the target and never got within tolerance of it
        flags["constraint_unreachable"] = (
            not (seen_above and seen_below) and (miss is None or miss > ev.tolerance)
        )

    record = RunRecord(
        experiment=config.name,
        label=label,
        mode=mode.value,
        master_seed=config.seed,
        run_seed=run_seed,
        config=config.echo(),
        status=status,
        final=final,
        trace=trace,
        flags=flags,
        epsilon_lineage=lineage,
        message=message,
        error_kind=error_kind,
        wall_clock_s=round(time.perf_counter() - t0, 3),
    )
    log.info("run %s/%s: %s gq=%s", config.name, label, status, final["generation_quality"])
    if keep_model:
        return record, model
    return record


def _raise_if_diverged(record: RunRecord) -> None:
    if record.status != DIVERGED:
        return
    if record.error_kind == "MultiplierDivergence":
        exc = MultiplierDivergence(record.final.get("lambda_final") or float("inf"))
        exc.args = (record.message,)
    else:
        exc = DivergedRun(record.message)
    exc.record = record
    raise exc


# persistence


def record_paths(out_dir, record: RunRecord) -> Dict[str, Path]:
    base = Path(out_dir) / record.experiment
    return {
        "record": base / f"{record.stem}.json",
        "trace": base / f"{record.stem}.trace.csv",
    }


def persist_record(record: RunRecord, out_dir, model: Optional[VaeModel] = None) -> List[Path]:
    paths = record_paths(out_dir, record)
    artifacts.atomic_write(paths["record"], artifacts.json_text(record.to_dict()))
    artifacts.atomic_write(paths["trace"],
                           artifacts.csv_text(artifacts.TRACE_SCHEMA, TRACE_COLUMNS, record.trace_rows()))
    written = [paths["record"], paths["trace"]]
    if model is not None:
        for part in ("encoder", "decoder"):
            p = paths["record"].with_name(f"{record.stem}.{part}.bin")
            artifacts.atomic_write(p, snapshot_bytes(getattr(model, part), step=record.config["steps"]))
            written.append(p)
    return written


def _maybe_persist(record, out_dir, model=None):
    if out_dir is not None:
        persist_record(record, out_dir, model)


# single-run protocols


def run_preliminary(config: ExperimentConfig, out_dir=None) -> Tuple[float, RunRecord]:
    """Train the plain autoencoder and return its converged reconstruction loss."""
    if config.mode is not Mode.PRELIMINARY:
        raise ValueError("run_preliminary needs a config in preliminary mode")
    record, model = train_run(config, keep_model=True)
    # snapshots are provenance only; nothing downstream loads them
    _maybe_persist(record, out_dir, model if record.completed else None)
    _raise_if_diverged(record)
    return float(record.final["l_recon_ema"]), record


def lineage_from(record: RunRecord, out_dir=None) -> Dict[str, Any]:
    src = {
        "label": record.label,
        "experiment": record.experiment,
        "master_seed": record.master_seed,
        "run_seed": record.run_seed,
        "epsilon_star": record.final["l_recon_ema"],
    }
    if out_dir is not None:
        src["file"] = str(record_paths(out_dir, record)["record"].relative_to(out_dir))
    return src


def run_constrained(config: ExperimentConfig, epsilon: Optional[float] = None,
                    lineage: Optional[Dict[str, Any]] = None, out_dir=None) -> RunRecord:
    if epsilon is not None:
        if epsilon <= 0:
            raise InvalidTarget(f"epsilon must be > 0, got {epsilon}")
        config = config.for_run(Mode.CONSTRAINED, config.label or "constrained", epsilon=epsilon)
    if config.mode is not Mode.CONSTRAINED:
        raise ValueError("run_constrained needs a config in constrained mode")
    if config.epsilon is None or config.epsilon <= 0:
        raise InvalidTarget(f"epsilon must be > 0, got {config.epsilon}")
    record = train_run(config, lineage)
    _maybe_persist(record, out_dir)
    _raise_if_diverged(record)
    return record


def run_weighted(config: ExperimentConfig, alpha: Optional[float] = None, out_dir=None) -> RunRecord:
    if alpha is not None:
        if alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {alpha}")
        config = config.for_run(Mode.WEIGHTED, config.label or f"alpha_{alpha:g}", alpha=alpha)
    if config.mode is not Mode.WEIGHTED:
        raise ValueError("run_weighted needs a config in weighted mode")
    record = train_run(config)
    _maybe_persist(record, out_dir)
    _raise_if_diverged(record)
    return record


def replay_record(record: RunRecord) -> RunRecord:
    """Re-run a record from its own config echo."""
    return train_run(build_config(record.config), record.epsilon_lineage)


# sweeps


@dataclass
class SweepResult:
    parameter: str
    values: List[float]
    records: List[RunRecord]

    @property
    def argmin(self) -> Optional[int]:
        done = [i for i, r in enumerate(self.records)
                if r.completed and r.generation_quality is not None]
        if not done:
            return None
        return min(done, key=lambda i: (self.records[i].generation_quality, i))

    @property
    def status(self) -> str:
        return "complete" if all(r.completed for r in self.records) else "partial"

    def rows(self):
        for v, r in zip(self.values, self.records):
            yield (float(v), r.final.get("l_recon_ema"), r.final.get("l_kl"),
                   r.generation_quality, r.status)

    def csv(self) -> str:
        return artifacts.csv_text(artifacts.SWEEP_SCHEMA, SWEEP_COLUMNS, self.rows())


def _run_many(configs: Sequence[ExperimentConfig], lineage=None, jobs: int = 1) -> List[RunRecord]:
    if jobs <= 1 or len(configs) <= 1:
        return [train_run(c, lineage) for c in configs]
    with ProcessPoolExecutor(max_workers=min(jobs, len(configs))) as pool:
        return list(pool.map(functools.partial(train_run, lineage=lineage), configs))


def sweep_alpha(config: ExperimentConfig, grid: Optional[Sequence[float]] = None,
                out_dir=None, jobs: int = 1) -> SweepResult:
    grid = list(config.alpha_grid if grid is None else grid)
    if not grid or any(a <= 0 for a in grid):
        raise ValueError("alpha grid must be non-empty and positive")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("alpha grid must be strictly increasing")
    configs = [config.for_run(Mode.WEIGHTED, f"alpha_{a:g}", alpha=float(a)) for a in grid]
    records = _run_many(configs, jobs=jobs)
    for r in records:
        _maybe_persist(r, out_dir)
    return SweepResult("alpha", [float(a) for a in grid], records)


def sweep_epsilon(config: ExperimentConfig, center: float, delta: Optional[float] = None,
                  lineage=None, out_dir=None, jobs: int = 1) -> SweepResult:
    """Constrained runs at ``center - delta``, ``center``, ``center + delta``.

    ``delta`` defaults to ``config.epsilon_delta * center``.
    """
    if delta is None:
        delta = config.epsilon_delta * center
    if delta < 0 or center - delta <= 0:
        raise InvalidTarget(f"need 0 <= delta < center, got center={center}, delta={delta}")
    values = [center - delta, center, center + delta]
    labels = ["eps_minus", "eps_center", "eps_plus"]
    configs = [config.for_run(Mode.CONSTRAINED, lab, epsilon=float(v))
               for lab, v in zip(labels, values)]
    records = _run_many(configs, lineage=lineage, jobs=jobs)
    for r in records:
        _maybe_persist(r, out_dir)
    return SweepResult("epsilon", values, records)


# full framework comparison


@dataclass
class FrameworkReport:
    epsilon_star: Optional[float]
    preliminary: RunRecord
    constrained: Optional[RunRecord]
    alpha_sweep: Optional[SweepResult]

    @property
    def ok(self) -> bool:
        runs = [self.preliminary, self.constrained]
        if self.alpha_sweep is not None:
            runs += self.alpha_sweep.records
        return all(r is not None and r.completed for r in runs)

    def summary_rows(self):
        p = self.preliminary
        yield ("preliminary", p.label, None, p.final.get("l_recon_ema"), p.final.get("l_kl"),
               p.generation_quality, None, p.status)
        if self.constrained is not None:
            c = self.constrained
            yield ("constrained", c.label, c.config["epsilon"], c.final.get("l_recon_ema"),
                   c.final.get("l_kl"), c.generation_quality, c.final.get("lambda_final"), c.status)
        if self.alpha_sweep is not None:
            for v, r in zip(self.alpha_sweep.values, self.alpha_sweep.records):
                yield ("alpha_sweep", r.label, v, r.final.get("l_recon_ema"), r.final.get("l_kl"),
                       r.generation_quality, None, r.status)

    def summary_csv(self) -> str:
        return artifacts.csv_text(artifacts.SUMMARY_SCHEMA, SUMMARY_COLUMNS, self.summary_rows())

    def comparison(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"schema_version": artifacts.REPORT_SCHEMA,
                               "epsilon_star": self.epsilon_star, "complete": self.ok}
        mdmm = self.constrained.generation_quality if self.constrained else None
        out["mdmm"] = None if self.constrained is None else {
            "epsilon": self.constrained.config["epsilon"],
            "l_recon_ema": self.constrained.final.get("l_recon_ema"),
            "generation_quality": mdmm,
            "status": self.constrained.status,
        }
        sw = self.alpha_sweep
        done = [] if sw is None else [(v, r.generation_quality) for v, r in zip(sw.values, sw.records)
                                      if r.completed and r.generation_quality is not None]
        if done:
            best = min(done, key=lambda t: t[1])
            worst = max(done, key=lambda t: t[1])
            out["alpha_best"] = {"alpha": best[0], "generation_quality": best[1]}
            out["alpha_worst"] = {"alpha": worst[0], "generation_quality": worst[1]}
            out["alpha_sweep_status"] = sw.status
            if mdmm is not None:
                out["mdmm_over_best"] = mdmm / best[1] if best[1] > 0 else None
                out["worst_over_mdmm"] = worst[1] / mdmm if mdmm > 0 else None
        return out

    def text(self) -> str:
        c = self.comparison()
        lines = [f"eps* (preliminary converged recon): {_f(self.epsilon_star)}"]
        if c.get("mdmm"):
            m = c["mdmm"]
            lines.append(f"MDMM at eps={_f(m['epsilon'])}: recon_ema={_f(m['l_recon_ema'])} "
                         f"generation_quality={_f(m['generation_quality'])} [{m['status']}]")
        if "alpha_best" in c:
            b, w = c["alpha_best"], c["alpha_worst"]
            lines.append(f"alpha sweep best:  alpha={b['alpha']:g} generation_quality={_f(b['generation_quality'])}")
            lines.append(f"alpha sweep worst: alpha={w['alpha']:g} generation_quality={_f(w['generation_quality'])}")
            if c.get("mdmm_over_best") is not None:
                lines.append(f"MDMM / best = {c['mdmm_over_best']:.4f}; worst / MDMM = {c['worst_over_mdmm']:.4f}")
        return "\n".join(lines) + "\n"


def _f(v) -> str:
    return "n/a" if v is None else f"{v:.6g}"


def compare_framework(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> FrameworkReport:
    """Preliminary eps*, the constrained run at eps*, then the alpha sweep.

    A failed preliminary or constrained run stops the protocol; the returned
    report then has ``ok == False``.
    """
    prelim_cfg = config.for_run(Mode.PRELIMINARY, "preliminary")
    try:
        eps_star, prelim = run_preliminary(prelim_cfg, out_dir)
    except MdmmLabError as exc:
        report = FrameworkReport(None, exc.record, None, None)
        _write_framework(report, out_dir)
        return report

    lineage = lineage_from(prelim, out_dir)
    con_cfg = config.for_run(Mode.CONSTRAINED, "constrained", epsilon=eps_star)
    constrained = train_run(con_cfg, lineage)
    _maybe_persist(constrained, out_dir)
    sweep = None
    if constrained.completed:
        sweep = sweep_alpha(config, out_dir=out_dir, jobs=jobs)
    report = FrameworkReport(eps_star, prelim, constrained, sweep)
    _write_framework(report, out_dir)
    return report


def _write_framework(report: FrameworkReport, out_dir) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    entries = []
    runs = [report.preliminary, report.constrained]
    if report.alpha_sweep is not None:
        runs += report.alpha_sweep.records
    for r in runs:
        if r is None:
            continue
        for p in record_paths(out_dir, r).values():
            entries.append((str(p.relative_to(out_dir)), r.status))
        if r.mode == Mode.PRELIMINARY.value and r.completed:
            for part in ("encoder", "decoder"):
                p = record_paths(out_dir, r)["record"].with_name(f"{r.stem}.{part}.bin")
                entries.append((str(p.relative_to(out_dir)), r.status))
    overall = "complete" if report.ok else "partial"
    if report.alpha_sweep is not None:
        artifacts.atomic_write(out_dir / "alpha_sweep.csv", report.alpha_sweep.csv())
        entries.append(("alpha_sweep.csv", report.alpha_sweep.status))
    artifacts.atomic_write(out_dir / "summary.csv", report.summary_csv())
    artifacts.atomic_write(out_dir / "report.json", artifacts.json_text(report.comparison()))
    artifacts.atomic_write(out_dir / "report.txt", report.text())
    entries += [("summary.csv", overall), ("report.json", overall), ("report.txt", overall)]
    artifacts.write_manifest(out_dir, entries)
