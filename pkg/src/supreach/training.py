"""Sup-norm residual training of the sine value network.

Training runs in three phases: ``pretrain`` fits the terminal condition only,
``curriculum`` widens the sampled time window from ``[T, T]`` down to
``[0, T]`` linearly, and ``post`` keeps sampling the full window.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .problem import (
    ProblemSpec,
    hamiltonian_closed_form,
    hamiltonian_costate_grad,
    sample_states,
    target_margin,
)
from .sirennet import (
    AdamState,
    Checkpoint,
    NetworkArch,
    NetworkParams,
    NumericError,
    SchemaError,
    adam_step,
    forward_with_input_grads,
    init_params,
    loss_param_grad,
)

log = logging.getLogger(__name__)

PHASES = ("pretrain", "curriculum", "post", "finetune")
LOG_FIELDS = ("step", "phase", "t_min", "h1", "h2", "loss", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    samples_per_step: int = 2048
    lam: float = 150.0
    pretrain_steps: int = 500
    curriculum_steps: int = 4000
    post_steps: int = 500
    lr: float = 1e-4
    seed: int = 0
    loss_reduction: str = "max"
    checkpoint_every: int = 500
    terminal_fraction: float = 0.1

    def __post_init__(self):
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if min(self.pretrain_steps, self.curriculum_steps, self.post_steps) < 0:
            raise ValueError("step counts must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not 0.0 <= self.terminal_fraction < 1.0:
            raise ValueError("terminal_fraction must be in [0, 1)")
        parse_reduction(self.loss_reduction)

    @property
    def total_steps(self):
        return self.pretrain_steps + self.curriculum_steps + self.post_steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLogRecord:
    step: int
    phase: str
    t_min: float
    h1: float
    h2: float
    loss: float
    wall_ms: int = 0


@dataclass
class Batch:
    t: np.ndarray
    x: np.ndarray
    terminal: np.ndarray  # bool; terminal samples sit at t = T and feed h1

    def __len__(self):
        return self.t.size


@dataclass
class LossResult:
    h1: float
    h2: float
    loss: float
    argmax_terminal: int | None
    argmax_interior: int | None
    terminal_errors: np.ndarray = field(repr=False, default=None)
    residuals: np.ndarray = field(repr=False, default=None)


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint, log_records):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log_records


def parse_reduction(reduction: str):
    """Return ``(kind, k)``; accepts ``max``, ``mean`` and ``topk_mean:K``."""
    if reduction in ("max", "mean"):
        return reduction, None
    if reduction.startswith("topk_mean:"):
        k = int(reduction.split(":", 1)[1])
        if k < 1:
            raise ValueError("topk_mean needs k >= 1")
        return "topk_mean", k
    raise ValueError(f"unknown loss reduction {reduction!r}")


def reduce(values: np.ndarray, reduction: str):
    """Reduce per-sample magnitudes; returns ``(value, weights, argmax)``.

    The weights are d(value)/d(values). Max picks the lowest index on ties.
    """
    n = values.size
    if n == 0:
        return 0.0, values.copy(), None
    kind, k = parse_reduction(reduction)
    i = int(np.argmax(values))
    w = np.zeros(n)
    if kind == "max":
        w[i] = 1.0
        return float(values[i]), w, i
    if kind == "mean":
        w[:] = 1.0 / n
        return float(np.sum(values) / n), w, i
    k = min(k, n)
    top = np.argsort(-values, kind="stable")[:k]
    w[top] = 1.0 / k
    return float(values[top].sum() / k), w, i


def t_min_at(spec: ProblemSpec, config: TrainConfig, phase: str, step: int) -> float:
    T = spec.horizon_T
    if phase == "pretrain":
        return T
    if phase == "curriculum":
        n = config.curriculum_steps
        if n <= 1:
            return 0.0
        return T * max(0.0, 1.0 - step / (n - 1))
    return 0.0


def sample_batch(rng: np.random.Generator, spec: ProblemSpec, phase: str, step: int, config: TrainConfig) -> Batch:
    """Draw one training batch; ``step`` counts from 0 within ``phase``."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    K = config.samples_per_step
    T = spec.horizon_T
    x = sample_states(spec, rng, K)
    if phase == "pretrain":
        return Batch(np.full(K, T), x, np.ones(K, dtype=bool))
    n_term = int(round(config.terminal_fraction * K))
    t_lo = t_min_at(spec, config, phase, step)
    t = rng.uniform(t_lo, T, size=K)
    terminal = np.zeros(K, dtype=bool)
    terminal[:n_term] = True
    t[:n_term] = T
    return Batch(t, x, terminal)


def _residual_terms(spec, bundle, x, ell):
    ham = hamiltonian_closed_form(spec, x, bundle.dx)
    pde = bundle.dt + ham
    obstacle = ell - bundle.value
    m = np.minimum(pde, obstacle)
    return m, pde <= obstacle


def compute_loss(params, arch, spec, batch: Batch, lam: float, reduction: str = "max", bundle=None) -> LossResult:
    """Sampled ``h1 + lam * h2`` for a batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    ell = target_margin(spec, batch.x)
    need_pde = lam > 0 or not batch.terminal.all()
    if bundle is None:
        bundle = forward_with_input_grads(params, arch, spec, batch.t, batch.x)
    term = batch.terminal
    e = np.abs(bundle.value[term] - ell[term])
    h1, _, i1 = reduce(e, reduction)
    h2, i2, r = 0.0, None, np.zeros(0)
    if need_pde and (~term).any():
        inner = ~term
        m, _ = _residual_terms(spec, _subset(bundle, inner), batch.x[inner], ell[inner])
        r = np.abs(m)
        h2, _, i2 = reduce(r, reduction)
    _check_finite_samples(e, r, term)
    idx_t = np.flatnonzero(term)
    idx_i = np.flatnonzero(~term)
    return LossResult(
        h1=h1,
        h2=h2,
        loss=h1 + lam * h2,
        argmax_terminal=None if i1 is None else int(idx_t[i1]),
        argmax_interior=None if i2 is None else int(idx_i[i2]),
        terminal_errors=e,
        residuals=r,
    )


def _check_finite_samples(e, r, term):
    for arr, idx in ((e, np.flatnonzero(term)), (r, np.flatnonzero(~term))):
        bad = ~np.isfinite(arr)
        if bad.any():
            raise NumericError("non-finite per-sample loss", int(idx[np.argmax(bad)]))


def _subset(bundle, mask):
    from .sirennet import EvalBundle

    return EvalBundle(bundle.value[mask], bundle.dt[mask], bundle.dx[mask])


def loss_and_grad(params, arch, spec, batch: Batch, lam: float, reduction: str = "max"):
    """Loss summary plus its parameter gradient (flat array).

    Only samples with non-zero reduction weight are re-evaluated in the
    reverse pass, so the max reduction costs a single-sample backward.
    """
    bundle = forward_with_input_grads(params, arch, spec, batch.t, batch.x)
    res = compute_loss(params, arch, spec, batch, lam, reduction, bundle=bundle)
    ell = target_margin(spec, batch.x)
    term = batch.terminal
    n = len(batch)
    w_term = np.zeros(n)
    w_int = np.zeros(n)
    if term.any():
        _, w, _ = reduce(res.terminal_errors, reduction)
        w_term[term] = w
    if res.residuals.size and lam > 0:
        _, w, _ = reduce(res.residuals, reduction)
        w_int[~term] = lam * w
    rows = np.flatnonzero((w_term != 0) | (w_int != 0))
    if rows.size == 0:
        return res, np.zeros(arch.n_params)

    sub_term = term[rows]
    sub_ell = ell[rows]
    sub_x = batch.x[rows]
    wt, wi = w_term[rows], w_int[rows]

    def loss_fn(b):
        g_value = np.zeros(rows.size)
        g_dt = np.zeros(rows.size)
        g_dx = np.zeros((rows.size, spec.n_state))
        diff = b.value - sub_ell
        g_value += wt * np.sign(diff)
        inner = ~sub_term
        if inner.any():
            m, pde_active = _residual_terms(spec, b, sub_x, sub_ell)
            sgn = np.sign(m) * wi * inner
            act = pde_active & inner
            g_dt[act] = sgn[act]
            g_dx[act] = sgn[act, None] * hamiltonian_costate_grad(spec, sub_x[act], b.dx[act])
            obs = ~pde_active & inner
            g_value[obs] -= sgn[obs]
        return res.loss, g_value, g_dt, g_dx

    _, grad = loss_param_grad(params, arch, spec, batch.t[rows], sub_x, loss_fn)
    return res, grad


# ------------------------------------------------------------------ training


def _phase_plan(config: TrainConfig, lam_override=None):
    plan = []
    for phase, n in (
        ("pretrain", config.pretrain_steps),
        ("curriculum", config.curriculum_steps),
        ("post", config.post_steps),
    ):
        for k in range(n):
            plan.append((phase, k, 0.0 if phase == "pretrain" else config.lam))
    return plan


def _run(params, arch, spec, config, plan, adam, emit, start_step, meta_base, strict):
    theta = params.flat()
    records, checkpoints = [], []
    last_good = Checkpoint(arch, spec, params.copy(), dict(meta_base, step=start_step), None)
    for phase, k, lam in plan:
        step = start_step + len(records) + 1
        rng = np.random.default_rng([config.seed, step])
        batch = sample_batch(rng, spec, "post" if phase == "finetune" else phase, k, config)
        t0 = time.perf_counter()
        current = NetworkParams.from_flat(arch, theta)
        try:
            res, grad = loss_and_grad(current, arch, spec, batch, lam, config.loss_reduction)
        except NumericError as exc:
            raise TrainingAborted(str(exc), last_good, records) from exc
        if not np.isfinite(res.loss) or not np.all(np.isfinite(grad)):
            raise TrainingAborted(f"non-finite loss at step {step}", last_good, records)
        theta = adam_step(theta, grad, adam)
        if not np.all(np.isfinite(theta)):
            raise TrainingAborted(f"non-finite parameters after step {step}", last_good, records)
        wall = 0 if strict else int(round(1000 * (time.perf_counter() - t0)))
        rec = TrainLogRecord(step, phase, t_min_at(spec, config, phase, k), res.h1, res.h2, res.loss, wall)
        records.append(rec)
        if emit is not None:
            emit(rec)
        last_good = Checkpoint(
            arch, spec, NetworkParams.from_flat(arch, theta), dict(meta_base, step=step, loss=res.loss), adam
        )
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoints.append(_snapshot(last_good))
    return NetworkParams.from_flat(arch, theta), records, checkpoints


def _snapshot(ckpt: Checkpoint) -> Checkpoint:
    opt = ckpt.optimizer_state
    if opt is not None:
        opt = replace(opt, m=opt.m.copy(), v=opt.v.copy())
    return Checkpoint(ckpt.arch, ckpt.problem, ckpt.params.copy(), dict(ckpt.meta), opt)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    checkpoints: list  # periodic snapshots, initial parameters first


def train(spec: ProblemSpec, arch: NetworkArch, config: TrainConfig, emit=None, strict=True) -> TrainResult:
    """Run pretrain, curriculum and post phases from a fresh initialisation."""
    if arch.in_dim != spec.n_state + 1:
        raise ValueError("arch.in_dim must equal n_state + 1")
    params = init_params(arch, config.seed)
    adam = AdamState.zeros(arch.n_params, lr=config.lr)
    meta = {"seed": config.seed, "train": config.to_dict(), "phase": "train"}
    initial = Checkpoint(arch, spec, params.copy(), dict(meta, step=0, loss=None), None)
    if config.total_steps == 0:
        return TrainResult(initial, [], [initial])
    final_params, records, snaps = _run(params, arch, spec, config, _phase_plan(config), adam, emit, 0, meta, strict)
    final = Checkpoint(
        arch, spec, final_params, dict(meta, step=records[-1].step, loss=records[-1].loss), adam
    )
    if not snaps or snaps[-1].meta["step"] != final.meta["step"]:
        snaps.append(_snapshot(final))
    return TrainResult(final, records, [initial] + snaps)


def fine_tune(ckpt: Checkpoint, steps: int, overrides: dict | None = None, emit=None, strict=True) -> TrainResult:
    """Continue training a checkpoint with max-reduction sup-norm loss.

    Times are sampled over the full window; ``overrides`` may change any
    TrainConfig field except the reduction, which is forced to ``max``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    base = ckpt.meta.get("train", {})
    cfg = TrainConfig.from_dict({**base, **(overrides or {})}) if base else TrainConfig(**(overrides or {}))
    cfg = replace(cfg, loss_reduction="max")
    arch = ckpt.arch
    if ckpt.params.flat().size != arch.n_params:
        raise SchemaError("checkpoint parameters do not match arch")
    start = int(ckpt.meta.get("step", 0))
    meta = dict(ckpt.meta)
    meta.update({"phase": "finetune", "train": cfg.to_dict(), "finetune_from_step": start})
    if steps == 0:
        out = Checkpoint(arch, ckpt.problem, ckpt.params.copy(), meta, ckpt.optimizer_state)
        return TrainResult(out, [], [out])
    adam = AdamState.zeros(arch.n_params, lr=cfg.lr)
    plan = [("finetune", k, cfg.lam) for k in range(steps)]
    initial = Checkpoint(arch, ckpt.problem, ckpt.params.copy(), dict(meta, step=start), None)
    params, records, snaps = _run(ckpt.params.copy(), arch, ckpt.problem, cfg, plan, adam, emit, start, meta, strict)
    final = Checkpoint(arch, ckpt.problem, params, dict(meta, step=records[-1].step, loss=records[-1].loss), adam)
    if not snaps or snaps[-1].meta["step"] != final.meta["step"]:
        snaps.append(_snapshot(final))
    return TrainResult(final, records, [initial] + snaps)


def log_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in records:
        w.writerow([r.step, r.phase, repr(float(r.t_min)), repr(float(r.h1)), repr(float(r.h2)), repr(float(r.loss)), r.wall_ms])
    return buf.getvalue()
