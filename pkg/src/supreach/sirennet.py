"""Fully-connected sine network with exact input derivatives.

The network maps scaled ``(tau, s)`` inputs to a scalar value. Input
derivatives are propagated forward as tangents (one per input column) and
the reverse pass differentiates through value *and* tangents, so losses built
from ``dV/dt`` and ``grad_x V`` are trainable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problem import ProblemSpec, scale_state, scale_time, state_scale_factors

FORMAT_VERSION = 1


class SchemaError(ValueError):
    """Raised when a checkpoint or config document is malformed."""


class NumericError(FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (sample {index})")
        self.index = index


@dataclass(frozen=True)
class NetworkArch:
    in_dim: int = 4
    hidden_widths: tuple = (64, 64)
    activation: str = "sine"
    omega0_first: float = 30.0
    omega0_hidden: float = 1.0
    out_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.in_dim < 2:
            raise ValueError("in_dim must be >= 2")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be >= 1")
        if self.activation != "sine":
            raise ValueError("only sine activation is supported")
        if self.out_dim != 1:
            raise ValueError("out_dim must be 1")

    @property
    def layer_shapes(self):
        dims = (self.in_dim,) + self.hidden_widths + (self.out_dim,)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def omegas(self):
        n_hidden = len(self.hidden_widths)
        return [self.omega0_first] + [self.omega0_hidden] * (n_hidden - 1)

    def to_dict(self):
        return {
            "in_dim": self.in_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "omega0_first": self.omega0_first,
            "omega0_hidden": self.omega0_hidden,
            "out_dim": self.out_dim,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown arch fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NetworkParams:
    """Weights ``W[l]`` of shape (out, in) and biases ``b[l]`` of shape (out,)."""

    weights: list
    biases: list

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: NetworkArch, theta) -> "NetworkParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != arch.n_params:
            raise SchemaError(f"expected {arch.n_params} parameters, got {theta.size}")
        Ws, bs, k = [], [], 0
        for o, i in arch.layer_shapes:
            Ws.append(theta[k : k + o * i].reshape(o, i).copy())
            k += o * i
            bs.append(theta[k : k + o].copy())
            k += o
        return cls(Ws, bs)

    def copy(self) -> "NetworkParams":
        return NetworkParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def check(self, arch: NetworkArch):
        if len(self.weights) != len(arch.layer_shapes):
            raise ValueError("layer count does not match arch")
        for (o, i), W, b in zip(arch.layer_shapes, self.weights, self.biases):
            if W.shape != (o, i) or b.shape != (o,):
                raise ValueError(f"layer shape {W.shape}/{b.shape} does not match ({o}, {i})")


@dataclass
class EvalBundle:
    """Per-sample value and physical-coordinate derivatives."""

    value: np.ndarray
    dt: np.ndarray
    dx: np.ndarray


def init_params(arch: NetworkArch, seed: int) -> NetworkParams:
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for k, (o, i) in enumerate(arch.layer_shapes):
        if k == 0:
            bound = 1.0 / i
        else:
            bound = math.sqrt(6.0 / i) / arch.omega0_hidden
        Ws.append(rng.uniform(-bound, bound, size=(o, i)))
        bs.append(np.zeros(o))
    return NetworkParams(Ws, bs)


def zero_params(arch: NetworkArch) -> NetworkParams:
    return NetworkParams([np.zeros(s) for s in arch.layer_shapes], [np.zeros(o) for o, _ in arch.layer_shapes])


def _as_inputs(arch, t, x):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != arch.in_dim - 1:
        raise ValueError(f"expected {arch.in_dim - 1} state columns, got {x.shape[-1]}")
    t = np.broadcast_to(t, x.shape[:1])
    return np.column_stack([t, x])


def forward(params: NetworkParams, arch: NetworkArch, t, x_scaled) -> np.ndarray:
    """Network value at scaled inputs; returns shape (B,)."""
    z = _as_inputs(arch, t, x_scaled)
    params.check(arch)
    for W, b, w0 in zip(params.weights[:-1], params.biases[:-1], arch.omegas()):
        z = np.sin(w0 * (z @ W.T + b))
    return (z @ params.weights[-1].T + params.biases[-1])[:, 0]


def forward_tangents(params: NetworkParams, arch: NetworkArch, t, x_scaled):
    """Value and derivatives with respect to the scaled inputs.

    Returns ``(value (B,), jac (B, in_dim), cache)``. ``cache`` feeds
    :func:`backward`.
    """
    z = _as_inputs(arch, t, x_scaled)
    params.check(arch)
    B, d = z.shape
    inputs = z
    zdot = None  # (d, B, h); the input tangent is the identity, handled implicitly
    cache = []
    for k, (W, b, w0) in enumerate(zip(params.weights[:-1], params.biases[:-1], arch.omegas())):
        a = z @ W.T + b
        adot = np.broadcast_to(W.T[:, None, :], (d, B, W.shape[0])) if k == 0 else zdot @ W.T
        arg = w0 * a
        c, s = np.cos(arg), np.sin(arg)
        cache.append((z, zdot, adot, c, s, w0))
        z = s
        zdot = w0 * c[None] * adot
    Wo, bo = params.weights[-1], params.biases[-1]
    value = (z @ Wo.T + bo)[:, 0]
    jac = (zdot @ Wo.T)[..., 0].T
    return value, jac, (inputs, cache, z, zdot)


def backward(params: NetworkParams, arch: NetworkArch, cache, g_value, g_jac) -> NetworkParams:
    """Reverse pass: gradient of sum(g_value*value + g_jac*jac) w.r.t. parameters."""
    inputs, layers, z, zdot = cache
    g_value = np.asarray(g_value, dtype=float)
    g_jac = np.asarray(g_jac, dtype=float)  # (B, d)
    gW, gb = [None] * len(params.weights), [None] * len(params.biases)
    Wo = params.weights[-1]
    gjT = g_jac.T[..., None]  # (d, B, 1)
    gW[-1] = g_value[None, :] @ z + np.einsum("dbo,dbh->oh", gjT, zdot)
    gb[-1] = np.array([g_value.sum()])
    gz = g_value[:, None] * Wo  # (B, h)
    gzdot = gjT * Wo[None]  # (d, B, h)
    for k in range(len(layers) - 1, -1, -1):
        z_prev, zdot_prev, adot, c, s, w0 = layers[k]
        W = params.weights[k]
        ga = w0 * c * gz - (w0 * w0) * s * np.einsum("dbh,dbh->bh", gzdot, adot)
        gadot = w0 * c[None] * gzdot
        if k == 0:
            gW[k] = ga.T @ z_prev + gadot.sum(axis=1).T
        else:
            gW[k] = ga.T @ z_prev + np.einsum("dbo,dbi->oi", gadot, zdot_prev)
        gb[k] = ga.sum(axis=0)
        if k > 0:
            gz = ga @ W
            gzdot = gadot @ W
    return NetworkParams(gW, gb)


def _physical_factors(spec: ProblemSpec):
    return np.concatenate([[1.0 / spec.horizon_T], state_scale_factors(spec)])


def forward_with_input_grads(params, arch, spec: ProblemSpec, t_phys, x_phys, return_cache=False):
    """Value plus d/dt and grad_x in physical units at physical (t, x)."""
    tau = scale_time(spec, t_phys)
    s = scale_state(spec, x_phys)
    value, jac, cache = forward_tangents(params, arch, tau, s)
    phys = jac * _physical_factors(spec)
    bundle = EvalBundle(value=value, dt=phys[:, 0], dx=phys[:, 1:])
    if return_cache:
        return bundle, cache
    return bundle


def loss_param_grad(params, arch, spec, t_phys, x_phys, loss_fn):
    """Scalar loss over an EvalBundle and its parameter gradient.

    ``loss_fn(bundle)`` returns ``(loss, g_value, g_dt, g_dx)`` where the
    cotangents are d(loss)/d(bundle field) per sample.
    """
    bundle, cache = forward_with_input_grads(params, arch, spec, t_phys, x_phys, return_cache=True)
    loss, g_value, g_dt, g_dx = loss_fn(bundle)
    g_jac = np.column_stack([g_dt, g_dx]) * _physical_factors(spec)
    bad = ~np.isfinite(g_value) | ~np.all(np.isfinite(g_jac), axis=1)
    if bad.any():
        raise NumericError("non-finite loss cotangent", int(np.argmax(bad)))
    return loss, backward(params, arch, cache, g_value, g_jac).flat()


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new parameters."""
    if grad.shape != theta.shape:
        raise ValueError("gradient shape does not match parameters")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    return theta - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    arch: NetworkArch
    problem: ProblemSpec
    params: NetworkParams
    meta: dict = field(default_factory=dict)
    optimizer_state: AdamState | None = None

    def scaling(self):
        return {
            "state_lo": list(self.problem.state_lo),
            "state_hi": list(self.problem.state_hi),
            "horizon_T": self.problem.horizon_T,
        }

    def to_dict(self):
        doc = {
            "format_version": FORMAT_VERSION,
            "arch": self.arch.to_dict(),
            "problem": self.problem.to_dict(),
            "scaling": self.scaling(),
            "params": [
                {"weight": W.tolist(), "bias": b.tolist()}
                for W, b in zip(self.params.weights, self.params.biases)
            ],
            "meta": self.meta,
        }
        if self.optimizer_state is not None:
            st = self.optimizer_state
            doc["optimizer_state"] = {
                "m": st.m.tolist(),
                "v": st.v.tolist(),
                "step": st.step,
                "lr": st.lr,
                "beta1": st.beta1,
                "beta2": st.beta2,
                "eps": st.eps,
            }
        return doc

    def dumps(self) -> str:
        # json floats use the shortest repr that round-trips exactly
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _require(doc, key, where="checkpoint"):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    return doc[key]


def checkpoint_from_dict(doc) -> Checkpoint:
    version = _require(doc, "format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"checkpoint: unsupported format_version {version!r}")
    try:
        arch = NetworkArch.from_dict(_require(doc, "arch"))
        problem = ProblemSpec.from_dict(_require(doc, "problem"))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"checkpoint: {exc}") from exc
    _require(doc, "scaling")
    layers = _require(doc, "params")
    meta = _require(doc, "meta")
    if len(layers) != len(arch.layer_shapes):
        raise SchemaError("checkpoint: params layer count does not match arch")
    Ws, bs = [], []
    for k, (layer, (o, i)) in enumerate(zip(layers, arch.layer_shapes)):
        W = np.asarray(_require(layer, "weight", f"params[{k}]"), dtype=float)
        b = np.asarray(_require(layer, "bias", f"params[{k}]"), dtype=float)
        if W.shape != (o, i) or b.shape != (o,):
            raise SchemaError(f"checkpoint: params[{k}] shape {W.shape}/{b.shape}, arch wants ({o}, {i})")
        Ws.append(W)
        bs.append(b)
    params = NetworkParams(Ws, bs)
    if params.flat().size != arch.n_params:
        raise SchemaError("checkpoint: parameter count does not match arch")
    opt = None
    if "optimizer_state" in doc:
        st = doc["optimizer_state"]
        opt = AdamState(
            m=np.asarray(_require(st, "m", "optimizer_state"), dtype=float),
            v=np.asarray(_require(st, "v", "optimizer_state"), dtype=float),
            step=int(_require(st, "step", "optimizer_state")),
            lr=float(st.get("lr", 1e-4)),
            beta1=float(st.get("beta1", 0.9)),
            beta2=float(st.get("beta2", 0.999)),
            eps=float(st.get("eps", 1e-8)),
        )
        if opt.m.size != arch.n_params or opt.v.size != arch.n_params:
            raise SchemaError("optimizer_state: moment size does not match arch")
    return Checkpoint(arch, problem, params, meta, opt)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_text(ckpt.dumps())
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"checkpoint: not valid JSON ({exc})") from exc
    return checkpoint_from_dict(doc)
