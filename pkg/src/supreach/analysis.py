"""Error metrics against the grid oracle and Hamiltonian property checks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import kendalltau

from .gridoracle import BrtMask, GridField, GridSpec, central_gradient, interpolate
from .problem import (
    ProblemSpec,
    dynamics,
    hamiltonian_closed_form,
    optimal_inputs,
    sample_states,
    target_margin,
)
from .sirennet import Checkpoint, EvalBundle, forward_with_input_grads
from .training import Batch, compute_loss, _residual_terms

DEFAULT_SLICE_TIME = 0.7
DEFAULT_SLICE_THETAS = (-np.pi / 2, 0.0, np.pi / 2, np.pi)


# ------------------------------------------------------------ value sources


class NetworkValue:
    """Value source backed by a network checkpoint."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self.problem = ckpt.problem

    def evaluate(self, t, x) -> EvalBundle:
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
        return forward_with_input_grads(self.ckpt.params, self.ckpt.arch, self.problem, t, x)

    def value(self, t, x):
        return self.evaluate(t, x).value


class GridValue:
    """Lookup stub over oracle slices: multilinear in space, linear in time.

    Spatial derivatives come from central differences of each slice; the
    time derivative is the slope between the bracketing slices.
    """

    def __init__(self, fields, grid: GridSpec, problem: ProblemSpec):
        fields = sorted(fields, key=lambda f: f.time)
        self.times = np.array([f.time for f in fields])
        self.values = [f.values for f in fields]
        self.grads = [central_gradient(f.values, grid) for f in fields]
        self.grid = grid
        self.problem = problem

    def _bracket(self, t):
        t = np.asarray(t, dtype=float)
        if self.times.size == 1:
            z = np.zeros(t.shape, dtype=int)
            return z, z, np.zeros(t.shape)
        if np.any(t < self.times[0] - 1e-9) or np.any(t > self.times[-1] + 1e-9):
            raise ValueError("time outside the oracle slices")
        hi = np.clip(np.searchsorted(self.times, t, side="right"), 1, self.times.size - 1)
        lo = hi - 1
        w = np.clip((t - self.times[lo]) / (self.times[hi] - self.times[lo]), 0.0, 1.0)
        return lo, hi, w

    def _interp(self, arr, x):
        if arr.ndim == self.grid.ndim:
            return interpolate(arr, self.grid, x)
        return np.stack([interpolate(arr[..., j], self.grid, x) for j in range(arr.shape[-1])], axis=-1)

    def _lerp(self, arrays, t, x, deriv=False):
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
        lo, hi, w = self._bracket(t)
        span = self.times[hi] - self.times[lo]
        out = 0.0
        for k in np.unique(np.concatenate([lo, hi])):
            vk = self._interp(arrays[k], x)
            if deriv:
                coef = ((hi == k).astype(float) - (lo == k)) / np.where(span > 0, span, 1.0)
            else:
                coef = np.where(lo == k, 1.0 - w, 0.0) + np.where(hi == k, w, 0.0)
            out = out + coef.reshape((-1,) + (1,) * (vk.ndim - 1)) * vk
        return out

    def value(self, t, x):
        return self._lerp(self.values, t, x)

    def evaluate(self, t, x) -> EvalBundle:
        return EvalBundle(
            value=self._lerp(self.values, t, x),
            dt=self._lerp(self.values, t, x, deriv=True),
            dx=self._lerp(self.grads, t, x),
        )


def _check_same_problem(source, problem: ProblemSpec):
    if source.problem.spec_hash() != problem.spec_hash():
        raise ValueError("value source and oracle were built for different problems")


# ------------------------------------------------------------ errors


@dataclass
class SliceError:
    time: float
    sup_abs_err: float
    mean_abs_err: float
    argmax_state: np.ndarray


@dataclass
class ErrorReport:
    per_time: list
    sup_abs_err: float
    mean_abs_err: float
    argmax_time: float
    argmax_state: np.ndarray


def sup_error(source, oracle_fields, grid: GridSpec, problem: ProblemSpec) -> ErrorReport:
    """Max and mean |V_source - V_oracle| over every node of every slice."""
    _check_same_problem(source, problem)
    nodes = grid.nodes().reshape(-1, grid.ndim)
    per_time, total, count = [], 0.0, 0
    best = (-1.0, None, None)
    for f in oracle_fields:
        err = np.abs(source.value(np.full(len(nodes), f.time), nodes) - f.values.ravel())
        i = int(np.argmax(err))
        per_time.append(SliceError(f.time, float(err[i]), float(err.mean()), nodes[i].copy()))
        total += err.sum()
        count += err.size
        if err[i] > best[0]:
            best = (float(err[i]), f.time, nodes[i].copy())
    return ErrorReport(per_time, best[0], float(total / count), best[1], best[2])


@dataclass
class ResidualFields:
    eps_field: np.ndarray  # (n_times, *grid.n)
    delta_field: np.ndarray  # grid.n, at t = T
    times: np.ndarray
    eps_sup: float
    delta_sup: float


def grid_batch(spec: ProblemSpec, grid: GridSpec, t_samples) -> Batch:
    """Terminal copy of the nodes followed by the nodes at each requested time."""
    nodes = grid.nodes().reshape(-1, grid.ndim)
    n = len(nodes)
    ts = [np.full(n, spec.horizon_T)] + [np.full(n, float(t)) for t in t_samples]
    xs = np.concatenate([nodes] * (len(t_samples) + 1))
    term = np.zeros(xs.shape[0], dtype=bool)
    term[:n] = True
    return Batch(np.concatenate(ts), xs, term)


def residual_fields(source, spec: ProblemSpec, grid: GridSpec, t_samples) -> ResidualFields:
    """Interior residual and terminal mismatch of a value source on the grid."""
    nodes = grid.nodes().reshape(-1, grid.ndim)
    ell = target_margin(spec, nodes)
    term = source.evaluate(np.full(len(nodes), spec.horizon_T), nodes)
    delta = (term.value - ell).reshape(grid.n)
    eps = []
    for t in t_samples:
        b = source.evaluate(np.full(len(nodes), float(t)), nodes)
        m, _ = _residual_terms(spec, b, nodes, ell)
        eps.append(m.reshape(grid.n))
    eps = np.stack(eps) if eps else np.zeros((0,) + grid.n)
    return ResidualFields(
        eps,
        delta,
        np.asarray(t_samples, dtype=float),
        float(np.max(np.abs(eps))) if eps.size else 0.0,
        float(np.max(np.abs(delta))),
    )


# ------------------------------------------------------------ BRT comparison


@dataclass
class BrtComparison:
    iou: float
    false_safe_rate: float
    false_unsafe_rate: float
    empty_oracle: bool = False
    empty_network: bool = False


def brt_compare(network: BrtMask, oracle: BrtMask) -> BrtComparison:
    a = np.asarray(network.mask if isinstance(network, BrtMask) else network, dtype=bool)
    b = np.asarray(oracle.mask if isinstance(oracle, BrtMask) else oracle, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks live on different grids")
    union = np.count_nonzero(a | b)
    inter = np.count_nonzero(a & b)
    na, nb = np.count_nonzero(a), np.count_nonzero(b)
    return BrtComparison(
        iou=1.0 if union == 0 else inter / union,
        false_safe_rate=0.0 if nb == 0 else np.count_nonzero(b & ~a) / nb,
        false_unsafe_rate=0.0 if na == 0 else np.count_nonzero(a & ~b) / na,
        empty_oracle=nb == 0,
        empty_network=na == 0,
    )


@dataclass
class ComparisonRow:
    t: float
    sup_abs_err: float
    mean_abs_err: float
    iou: float
    false_safe_rate: float
    false_unsafe_rate: float
    argmax_state: np.ndarray = field(repr=False, default=None)


def compare(source, oracle_fields, grid: GridSpec, problem: ProblemSpec) -> list:
    """One comparison row per oracle slice."""
    _check_same_problem(source, problem)
    nodes = grid.nodes().reshape(-1, grid.ndim)
    rows = []
    for f in oracle_fields:
        v = source.value(np.full(len(nodes), f.time), nodes)
        err = np.abs(v - f.values.ravel())
        i = int(np.argmax(err))
        cmp = brt_compare(v.reshape(grid.n) <= 0, f.values <= 0)
        rows.append(
            ComparisonRow(f.time, float(err[i]), float(err.mean()), cmp.iou, cmp.false_safe_rate, cmp.false_unsafe_rate, nodes[i])
        )
    return rows


def report_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "sup_abs_err", "mean_abs_err", "iou", "false_safe_rate", "false_unsafe_rate"])
    for r in rows:
        w.writerow([repr(float(v)) for v in (r.t, r.sup_abs_err, r.mean_abs_err, r.iou, r.false_safe_rate, r.false_unsafe_rate)])
    return buf.getvalue()


def slice_to_csv(source, oracle: GridValue, grid: GridSpec, t=DEFAULT_SLICE_TIME, thetas=DEFAULT_SLICE_THETAS) -> str:
    """Value slices over the (x1, x2) nodes for each heading in ``thetas``."""
    xs1, xs2 = grid.axes()[0], grid.axes()[1]
    X1, X2 = np.meshgrid(xs1, xs2, indexing="ij")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "theta", "x1", "x2", "v_nn", "v_oracle", "abs_err"])
    for th in thetas:
        pts = np.column_stack([X1.ravel(), X2.ravel(), np.full(X1.size, th)])
        tt = np.full(len(pts), t)
        vn = source.value(tt, pts)
        vo = oracle.value(tt, pts)
        for p, a, b in zip(pts, vn, vo):
            w.writerow([repr(float(t)), repr(float(th)), repr(float(p[0])), repr(float(p[1])), repr(float(a)), repr(float(b)), repr(float(abs(a - b)))])
    return buf.getvalue()


# ------------------------------------------------------------ property checks


def estimate_Cf(spec: ProblemSpec, n_grid: int = 21) -> float:
    """Bound on ||f(x, u, d)||_2 over the box and input set.

    The dynamics are bilinear in the inputs, so input corners suffice. For
    air3d the heading maximiser at each box vertex is added in closed form;
    with the dense grid this gives the exact supremum.
    """
    if spec.dynamics_id == "zero":
        return 0.0
    w = spec.omega_max
    corners = np.array([(u, d) for u in (-w, w) for d in (-w, w)])
    axes = [np.linspace(l, h, n_grid) for l, h in zip(spec.state_lo, spec.state_hi)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, spec.n_state)
    best = 0.0
    for u, d in corners:
        best = max(best, float(np.max(np.linalg.norm(dynamics(spec, X, u, d), axis=-1))))
        # heading that maximises the planar speed at each (x1, x2) vertex
        for x1 in (spec.state_lo[0], spec.state_hi[0]):
            for x2 in (spec.state_lo[1], spec.state_hi[1]):
                th = np.arctan2(-u * x1, -spec.v_e + u * x2)
                if spec.v_p < 0:
                    th += np.pi
                x = np.array([x1, x2, th])
                best = max(best, float(np.linalg.norm(dynamics(spec, x, u, d))))
    return best


@dataclass
class CheckReport:
    name: str
    passed: bool
    trials: int
    failures: int
    max_ratio: float = 0.0
    slack: float = 0.0
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.trials, self.failures = int(self.trials), int(self.failures)
        self.max_ratio, self.slack = float(self.max_ratio), float(self.slack)


def _random_unit_ball(rng, n, dim):
    q = rng.normal(size=(n, dim))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * rng.uniform(0, 1, size=(n, 1)) ** (1.0 / dim)


def lipschitz_hamiltonian_check(spec: ProblemSpec, trials=10_000, eps_list=(1e-3, 1e-1, 1.0), seed=0, ham=None, Cf=None) -> CheckReport:
    """|H(x, p + eps q) - H(x, p)| <= C_f eps for ||q|| <= 1."""
    ham = ham or hamiltonian_closed_form
    Cf = estimate_Cf(spec) if Cf is None else Cf
    rng = np.random.default_rng(seed)
    failures, max_ratio, min_slack = 0, 0.0, np.inf
    for eps in eps_list:
        x = sample_states(spec, rng, trials)
        p = rng.normal(scale=2.0, size=(trials, spec.n_state))
        q = _random_unit_ball(rng, trials, spec.n_state)
        diff = np.abs(ham(spec, x, p + eps * q) - ham(spec, x, p))
        bound = Cf * eps + 1e-9
        failures += int(np.count_nonzero(diff > bound))
        min_slack = min(min_slack, float(np.min(bound - diff)))
        if eps > 0:
            max_ratio = max(max_ratio, float(np.max(diff / eps)))
    n = trials * len(eps_list)
    return CheckReport("lipschitz_hamiltonian", failures == 0, n, failures, max_ratio / Cf if Cf else 0.0, min_slack, {"C_f": Cf})


def _fastest_state(spec: ProblemSpec):
    """Box vertex, heading and input corner maximising ||f|| (air3d)."""
    w = spec.omega_max
    best = (-1.0, None, None, None)
    for u in (-w, w):
        for d in (-w, w):
            for x1 in (spec.state_lo[0], spec.state_hi[0]):
                for x2 in (spec.state_lo[1], spec.state_hi[1]):
                    th = np.arctan2(-u * x1, -spec.v_e + u * x2)
                    x = np.array([x1, x2, th])
                    n = float(np.linalg.norm(dynamics(spec, x, u, d)))
                    if n > best[0]:
                        best = (n, x, u, d)
    return best[1:]


def adversarial_lipschitz_ratio(spec: ProblemSpec, eps=1e-6) -> float:
    """|dH|/(C_f eps) for a perturbation aligned with f at the active inputs
    of the fastest state; approaches 1 from below."""
    if spec.dynamics_id != "air3d":
        raise ValueError("constructed case is specific to air3d")
    x, u, d = _fastest_state(spec)
    # costate with switching functions of the required signs, so (u, d) are the saddle inputs
    p3 = -np.sign(d)
    a = (np.sign(u) + p3) / (x[0] ** 2 + x[1] ** 2)
    p = np.array([a * x[1], -a * x[0], p3])
    if optimal_inputs(spec, x, p) != (u, d):
        raise RuntimeError("constructed costate does not select the intended inputs")
    f = dynamics(spec, x, u, d)
    q = f / np.linalg.norm(f)
    diff = abs(hamiltonian_closed_form(spec, x, p + eps * q) - hamiltonian_closed_form(spec, x, p))
    return float(diff / (estimate_Cf(spec) * eps))


def proper_operator(spec: ProblemSpec, t, x, r, p_t, p_x, ham=None):
    """F(t, x, r, p) = max{-p_t - H(x, p_x), r - l(x)}."""
    ham = ham or hamiltonian_closed_form
    return np.maximum(-p_t - ham(spec, x, p_x), r - target_margin(spec, x))


def properness_check(spec: ProblemSpec, trials=10_000, seed=0, ham=None) -> CheckReport:
    rng = np.random.default_rng(seed)
    x = sample_states(spec, rng, trials)
    t = rng.uniform(0, spec.horizon_T, trials)
    p_t = rng.normal(scale=3.0, size=trials)
    p_x = rng.normal(scale=3.0, size=(trials, spec.n_state))
    r = rng.normal(scale=3.0, size=trials)
    s = r + rng.exponential(scale=1.0, size=trials)
    s[: trials // 10] = r[: trials // 10]  # ties must give equality
    fr = proper_operator(spec, t, x, r, p_t, p_x, ham)
    fs = proper_operator(spec, t, x, s, p_t, p_x, ham)
    failures = int(np.count_nonzero(fr > fs))
    return CheckReport("properness", failures == 0, trials, failures, slack=float(np.min(fs - fr)))


def hamiltonian_oracle_check(spec: ProblemSpec, trials=1000, n_u=201, n_d=201, seed=0, ham=None) -> CheckReport:
    """Closed form vs brute-force sup-inf within the input-grid bound."""
    from .problem import hamiltonian_bruteforce

    ham = ham or hamiltonian_closed_form
    rng = np.random.default_rng(seed)
    du = 2 * spec.omega_max / (n_u - 1)
    failures, min_slack = 0, np.inf
    for _ in range(trials):
        x = sample_states(spec, rng, 1)[0]
        p = rng.normal(size=spec.n_state)
        bf = hamiltonian_bruteforce(spec, x, p, n_u, n_d)
        cf = float(ham(spec, x, p))
        tol = spec.omega_max * (abs(x[0]) + abs(x[1]) + 1) * du
        slack = tol - abs(bf - cf)
        min_slack = min(min_slack, slack)
        failures += slack < 0
    return CheckReport("hamiltonian_oracle", failures == 0, trials, int(failures), slack=float(min_slack))


# ------------------------------------------------------------ convergence


@dataclass
class ConvergenceSeries:
    steps: list
    losses: list
    sup_errors: list
    kendall_tau: float
    degenerate: bool = False


def kendall(a, b):
    """Kendall tau; a constant series reports 1 and the degenerate flag."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 1.0, True
    tau = kendalltau(a, b).statistic
    if not np.isfinite(tau):
        return 1.0, True
    return float(tau), False


def heldout_batch(spec: ProblemSpec, grid: GridSpec, t_samples) -> Batch:
    return grid_batch(spec, grid, t_samples)


def convergence_series(checkpoints, oracle_fields, grid: GridSpec, problem: ProblemSpec, lam=None, batch=None) -> ConvergenceSeries:
    """Loss on a fixed held-out node set against sup error, per checkpoint."""
    if len(checkpoints) < 3:
        raise ValueError("need at least 3 checkpoints")
    steps = [int(c.meta.get("step", 0)) for c in checkpoints]
    if any(b <= a for a, b in zip(steps, steps[1:])) and len(set(steps)) > 1:
        raise ValueError("checkpoint steps must be strictly increasing")
    if batch is None:
        batch = heldout_batch(problem, grid, [f.time for f in oracle_fields])
    losses, errs = [], []
    for c in checkpoints:
        lam_c = lam if lam is not None else c.meta.get("train", {}).get("lam", 150.0)
        res = compute_loss(c.params, c.arch, c.problem, batch, lam_c, "max")
        losses.append(res.loss)
        errs.append(sup_error(NetworkValue(c), oracle_fields, grid, problem).sup_abs_err)
    tau, degenerate = kendall(losses, errs)
    return ConvergenceSeries(steps, losses, errs, tau, degenerate)
