"""Finite-difference checks of the network's input and parameter gradients."""
from __future__ import annotations

import numpy as np

from .analysis import CheckReport
from .problem import ProblemSpec, sample_states
from .sirennet import NetworkArch, NetworkParams, forward_with_input_grads, init_params
from .training import Batch, compute_loss, loss_and_grad

INPUT_TOL = 1e-5
PARAM_TOL = 1e-4
REDUCTIONS = ("mean", "max", "topk_mean:4")


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _value(params, arch, spec, t, x):
    return forward_with_input_grads(params, arch, spec, t, x).value


def input_gradient_error(params, arch, spec: ProblemSpec, t: float, x, h=1e-6) -> float:
    """Relative error of (dV/dt, grad_x V) against central differences."""
    x = np.asarray(x, dtype=float)
    b = forward_with_input_grads(params, arch, spec, np.array([t]), x[None, :])
    analytic = np.concatenate([b.dt, b.dx[0]])
    fd = np.empty(spec.n_state + 1)
    fd[0] = (_value(params, arch, spec, np.array([t + h]), x[None]) - _value(params, arch, spec, np.array([t - h]), x[None]))[0] / (2 * h)
    for i in range(spec.n_state):
        e = np.zeros(spec.n_state)
        e[i] = h
        fd[i + 1] = (_value(params, arch, spec, np.array([t]), (x + e)[None]) - _value(params, arch, spec, np.array([t]), (x - e)[None]))[0] / (2 * h)
    return _rel(analytic, fd)


def param_gradient_error(params, arch, spec: ProblemSpec, batch: Batch, lam: float, reduction: str, h=1e-6) -> float:
    """Relative error of the loss gradient against central differences in every parameter."""
    _, grad = loss_and_grad(params, arch, spec, batch, lam, reduction)
    theta = params.flat()
    fd = np.empty_like(theta)
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        lp = compute_loss(NetworkParams.from_flat(arch, tp), arch, spec, batch, lam, reduction).loss
        lm = compute_loss(NetworkParams.from_flat(arch, tm), arch, spec, batch, lam, reduction).loss
        fd[k] = (lp - lm) / (2 * h)
    return _rel(grad, fd)


def _interior_points(spec, rng, n):
    # keep clear of the box faces so central differences stay inside the domain
    x = sample_states(spec, rng, n)
    lo, hi = spec.lo, spec.hi
    for i, per in enumerate(spec.periodic):
        if not per:
            x[:, i] = np.clip(x[:, i], lo[i] + 1e-3, hi[i] - 1e-3)
    t = rng.uniform(1e-3, spec.horizon_T - 1e-3, n)
    return t, x


def gradient_checks(spec: ProblemSpec, n_input=100, n_param=20, seed=0, arch_input=None, arch_param=None) -> list:
    """Input gradients on a 2x64 net, residual-loss parameter gradients on a 2x8 net."""
    rng = np.random.default_rng(seed)
    arch_input = arch_input or NetworkArch(in_dim=spec.n_state + 1, hidden_widths=(64, 64))
    arch_param = arch_param or NetworkArch(in_dim=spec.n_state + 1, hidden_widths=(8, 8))

    errs = []
    for k in range(n_input):
        params = init_params(arch_input, seed + k)
        t, x = _interior_points(spec, rng, 1)
        errs.append(input_gradient_error(params, arch_input, spec, float(t[0]), x[0]))
    errs = np.array(errs)
    fails = int(np.count_nonzero(errs > INPUT_TOL))
    reports = [CheckReport("input_gradient", fails == 0, n_input, fails, slack=float(INPUT_TOL - errs.max(initial=0.0)),
                           notes={"max_rel_err": float(errs.max(initial=0.0)), "tol": INPUT_TOL})]

    errs = []
    for k in range(n_param):
        params = init_params(arch_param, seed + 1000 + k)
        t, x = _interior_points(spec, rng, 24)
        terminal = np.zeros(24, dtype=bool)
        terminal[:6] = True
        t[terminal] = spec.horizon_T
        batch = Batch(t, x, terminal)
        errs.append(param_gradient_error(params, arch_param, spec, batch, 150.0, REDUCTIONS[k % len(REDUCTIONS)]))
    errs = np.array(errs)
    fails = int(np.count_nonzero(errs > PARAM_TOL))
    reports.append(CheckReport("param_gradient", fails == 0, n_param, fails, slack=float(PARAM_TOL - errs.max(initial=0.0)),
                               notes={"max_rel_err": float(errs.max(initial=0.0)), "tol": PARAM_TOL}))
    return reports
