"""Closed-loop pursuit-evasion rollouts driven by value-gradient policies."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .problem import ProblemSpec, dynamics, optimal_inputs, sample_states, target_margin, wrap_angle

CAPTURE_TOLERANCE = 0.02


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    u: np.ndarray
    d: np.ndarray
    min_margin: float
    escaped: bool = False

    def to_csv(self, spec: ProblemSpec) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t", "x1", "x2", "theta", "u", "d", "margin"])
        margins = target_margin(spec, self.states)
        for k, (t, x) in enumerate(zip(self.times, self.states)):
            u = repr(float(self.u[k])) if k < len(self.u) else ""
            d = repr(float(self.d[k])) if k < len(self.d) else ""
            w.writerow([k, repr(float(t))] + [repr(float(c)) for c in x] + [u, d, repr(float(margins[k]))])
        return buf.getvalue()


def _in_box(spec: ProblemSpec, x) -> bool:
    for i, per in enumerate(spec.periodic):
        if not per and not (spec.state_lo[i] <= x[i] <= spec.state_hi[i]):
            return False
    return True


def policy_from_value(source, spec: ProblemSpec, t, x):
    """Saddle inputs (u*, d*) at the costate reported by a value source."""
    x = np.asarray(x, dtype=float)
    if not _in_box(spec, x):
        raise ValueError("state outside the value source domain")
    p = source.evaluate(np.array([t]), x[None, :]).dx[0]
    u, d = optimal_inputs(spec, x, p)
    return float(u), float(d)


def _wrap(spec, x):
    x = x.copy()
    for i, per in enumerate(spec.periodic):
        if per:
            x[i] = wrap_angle(x[i]) if spec.dynamics_id == "air3d" else x[i]
    return x


def integrate(spec: ProblemSpec, x0, t0: float, evader, pursuer, dt: float) -> Trajectory:
    """RK4 with inputs held over each step; runs from ``t0`` to ``T``.

    ``evader`` and ``pursuer`` are value sources (the evader applies u*, the
    pursuer d*) or callables ``(t, x) -> (u, d)``.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    T = spec.horizon_T
    if not 0 <= t0 < T:
        raise ValueError("t0 must lie in [0, T)")
    x = _wrap(spec, np.asarray(x0, dtype=float))
    times, states, us, ds = [t0], [x], [], []
    t = t0
    escaped = False

    def pick(src, t, x):
        return src(t, x) if callable(src) else policy_from_value(src, spec, t, x)

    while t < T - 1e-12:
        h = min(dt, T - t)
        u = pick(evader, t, x)[0]
        d = pick(pursuer, t, x)[1]
        k1 = dynamics(spec, x, u, d)
        k2 = dynamics(spec, x + 0.5 * h * k1, u, d)
        k3 = dynamics(spec, x + 0.5 * h * k2, u, d)
        k4 = dynamics(spec, x + h * k3, u, d)
        x = _wrap(spec, x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        t = T if T - (t + h) < 1e-12 else t + h
        us.append(u)
        ds.append(d)
        times.append(t)
        states.append(x)
        if not _in_box(spec, x):
            escaped = True
            break
    states = np.array(states)
    return Trajectory(
        np.array(times), states, np.array(us), np.array(ds), float(np.min(target_margin(spec, states))), escaped
    )


@dataclass
class SemanticsReport:
    outside_pass_rate: float
    inside_capture_rate: float
    n_outside: int
    n_inside: int
    passed: bool
    vacuous_outside: bool = False
    vacuous_inside: bool = False
    mean_inside_gap: float = float("nan")
    escaped: int = 0
    outside: list = field(default_factory=list, repr=False)
    inside: list = field(default_factory=list, repr=False)


def _draw(source, spec, rng, n, keep, max_draws=200_000):
    got = []
    drawn = 0
    while len(got) < n and drawn < max_draws:
        xs = sample_states(spec, rng, 4096)
        drawn += len(xs)
        v = source.value(np.zeros(len(xs)), xs)
        got.extend(xs[keep(v)])
    return np.array(got[:n]).reshape(-1, spec.n_state)


def verify_brt_semantics(spec: ProblemSpec, source, n_outside=50, n_inside=50, margin=0.05, dt=0.01,
                         tolerance=CAPTURE_TOLERANCE, seed=0, min_capture=0.95) -> SemanticsReport:
    """Roll out saddle policies from states clearly outside and inside the BRT at t = 0.

    Outside states must keep a positive margin; inside states must come
    within ``tolerance`` of the target for at least ``min_capture`` of runs.
    """
    rng = np.random.default_rng(seed)
    out_x = _draw(source, spec, rng, n_outside, lambda v: v > margin)
    in_x = _draw(source, spec, rng, n_inside, lambda v: v < -margin)
    outside = [integrate(spec, x, 0.0, source, source, dt) for x in out_x]
    inside = [integrate(spec, x, 0.0, source, source, dt) for x in in_x]
    out_rate = np.mean([tr.min_margin > 0 for tr in outside]) if outside else 1.0
    in_rate = np.mean([tr.min_margin <= tolerance for tr in inside]) if inside else 1.0
    gap = float(np.mean([abs(tr.min_margin - v) for tr, v in zip(inside, source.value(np.zeros(len(in_x)), in_x))])) if inside else float("nan")
    return SemanticsReport(
        outside_pass_rate=float(out_rate),
        inside_capture_rate=float(in_rate),
        n_outside=len(outside),
        n_inside=len(inside),
        passed=bool(out_rate == 1.0 and in_rate >= min_capture),
        vacuous_outside=len(outside) == 0,
        vacuous_inside=len(inside) == 0,
        mean_inside_gap=gap,
        escaped=sum(tr.escaped for tr in outside + inside),
        outside=outside,
        inside=inside,
    )
