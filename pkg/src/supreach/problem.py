"""Reachability problem definitions: dynamics, target margin and Hamiltonians.

All functions are vectorised over a leading batch axis: states and costates
may be given as ``(n,)`` or ``(..., n)`` arrays.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

DYNAMICS_IDS = ("air3d", "zero")


@dataclass(frozen=True)
class ProblemSpec:
    dynamics_id: str = "air3d"
    v_e: float = 0.75
    v_p: float = 0.75
    omega_max: float = 3.0
    beta: float = 0.25
    state_lo: tuple = (-1.0, -1.0, -np.pi)
    state_hi: tuple = (1.0, 1.0, np.pi)
    periodic: tuple = (False, False, True)
    horizon_T: float = 1.0
    n_state: int = field(default=3)

    def __post_init__(self):
        # normalise sequences so equality and hashing behave
        object.__setattr__(self, "state_lo", tuple(float(v) for v in self.state_lo))
        object.__setattr__(self, "state_hi", tuple(float(v) for v in self.state_hi))
        object.__setattr__(self, "periodic", tuple(bool(v) for v in self.periodic))
        self.validate()

    def validate(self):
        if self.dynamics_id not in DYNAMICS_IDS:
            raise ValueError(f"unknown dynamics_id {self.dynamics_id!r}")
        n = self.n_state
        if not (len(self.state_lo) == len(self.state_hi) == len(self.periodic) == n):
            raise ValueError("state_lo, state_hi and periodic must all have length n_state")
        for i, (lo, hi) in enumerate(zip(self.state_lo, self.state_hi)):
            if not lo < hi:
                raise ValueError(f"state_lo[{i}] must be < state_hi[{i}]")
        if self.omega_max < 0:
            raise ValueError("omega_max must be >= 0")
        if self.v_e < 0 or self.v_p < 0:
            raise ValueError("speeds must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.horizon_T <= 0:
            raise ValueError("horizon_T must be > 0")
        if n < 2:
            raise ValueError("n_state must be >= 2 (target margin uses two positions)")
        if self.dynamics_id == "air3d":
            if n != 3 or self.periodic != (False, False, True):
                raise ValueError("air3d requires n_state=3 and periodic=(False, False, True)")
            if not (np.isclose(self.state_lo[2], -np.pi) and np.isclose(self.state_hi[2], np.pi)):
                raise ValueError("air3d heading must span [-pi, pi]")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.state_lo)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.state_hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("state_lo", "state_hi", "periodic"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown problem fields: {sorted(unknown)}")
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def wrap_angle(theta):
    """Map angles to the canonical range [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def wrap_state(spec: ProblemSpec, x) -> np.ndarray:
    x = np.array(x, dtype=float)
    for i, per in enumerate(spec.periodic):
        if per:
            lo, hi = spec.state_lo[i], spec.state_hi[i]
            x[..., i] = (x[..., i] - lo) % (hi - lo) + lo
    return x


def target_margin(spec: ProblemSpec, x) -> np.ndarray:
    """Signed distance of the relative position to the collision disc."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    return np.hypot(x[..., 0], x[..., 1]) - spec.beta


def target_margin_grad(spec: ProblemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    g = np.zeros_like(x)
    safe = np.where(r > 0, r, 1.0)
    g[..., 0] = np.where(r > 0, x[..., 0] / safe, 0.0)
    g[..., 1] = np.where(r > 0, x[..., 1] / safe, 0.0)
    return g


def _check_inputs(spec: ProblemSpec, u, d):
    bound = spec.omega_max * (1 + 1e-12)
    if np.any(np.abs(u) > bound) or np.any(np.abs(d) > bound):
        raise ValueError(f"input exceeds omega_max={spec.omega_max}")


def dynamics(spec: ProblemSpec, x, u, d) -> np.ndarray:
    """Relative dynamics f(x, u, d); u is the evader rate, d the pursuer rate."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    _check_finite(x, u, d)
    _check_inputs(spec, u, d)
    if spec.dynamics_id == "zero":
        return np.zeros(np.broadcast_shapes(x.shape, u.shape + (1,), d.shape + (1,)))
    x1, x2, th = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [
            -spec.v_e + spec.v_p * np.cos(th) + u * x2,
            spec.v_p * np.sin(th) - u * x1,
            d - u + 0.0 * th,
        ],
        axis=-1,
    )


def _require_air3d(spec):
    if spec.dynamics_id != "air3d":
        raise ValueError("closed-form Hamiltonian is defined for air3d dynamics only")


def _switching(x, p):
    return p[..., 0] * x[..., 1] - p[..., 1] * x[..., 0] - p[..., 2]


def hamiltonian_closed_form(spec: ProblemSpec, x, p) -> np.ndarray:
    """sup_u inf_d <p, f(x, u, d)> in closed form.

    Zero dynamics give H = 0 identically.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if spec.dynamics_id == "zero":
        return np.zeros(np.broadcast_shapes(x.shape, p.shape)[:-1])
    _require_air3d(spec)
    th = x[..., 2]
    w = spec.omega_max
    return (
        p[..., 0] * (-spec.v_e + spec.v_p * np.cos(th))
        + p[..., 1] * spec.v_p * np.sin(th)
        + w * np.abs(_switching(x, p))
        - w * np.abs(p[..., 2])
    )


def _sign(a):
    # sign(0) = +1 tie-break
    return np.where(a >= 0, 1.0, -1.0)


def optimal_inputs(spec: ProblemSpec, x, p):
    """Saddle inputs (u*, d*) attaining the Hamiltonian at costate p."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    w = spec.omega_max
    if spec.dynamics_id == "zero":
        shape = np.broadcast_shapes(x.shape, p.shape)[:-1]
        return np.full(shape, w), np.full(shape, -w)
    _require_air3d(spec)
    u = w * _sign(_switching(x, p))
    d = -w * _sign(p[..., 2])
    return u, d


def hamiltonian_costate_grad(spec: ProblemSpec, x, p) -> np.ndarray:
    """dH/dp, which equals f(x, u*, d*) for the saddle inputs at p."""
    u, d = optimal_inputs(spec, x, p)
    return dynamics(spec, x, u, d)


def hamiltonian_bruteforce(spec: ProblemSpec, x, p, n_u: int = 201, n_d: int = 201) -> float:
    """Max over a u-grid of min over a d-grid of <p, f(x, u, d)> (test oracle)."""
    if n_u < 2 or n_d < 2:
        raise ValueError("n_u and n_d must be >= 2")
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    us = np.linspace(-spec.omega_max, spec.omega_max, n_u)
    ds = np.linspace(-spec.omega_max, spec.omega_max, n_d)
    U, D = np.meshgrid(us, ds, indexing="ij")
    f = dynamics(spec, x, U, D)  # (n_u, n_d, n)
    vals = f @ p
    return float(vals.min(axis=1).max())


def scale_state(spec: ProblemSpec, x) -> np.ndarray:
    """Affine map of the state box onto [-1, 1]^n (periodic coordinates wrapped first)."""
    x = np.asarray(x, dtype=float)
    lo, hi = spec.lo, spec.hi
    per = np.asarray(spec.periodic)
    tol = 1e-9 * (hi - lo)
    bad = ((x < lo - tol) | (x > hi + tol)) & ~per
    if np.any(bad):
        raise ValueError("state outside the box on a non-periodic coordinate")
    if per.any():
        wrapped = wrap_state(spec, x)
        x = np.where(per & ((x < lo) | (x > hi)), wrapped, x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def unscale_state(spec: ProblemSpec, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return spec.lo + (s + 1.0) * 0.5 * (spec.hi - spec.lo)


def scale_time(spec: ProblemSpec, t):
    return np.asarray(t, dtype=float) / spec.horizon_T


def unscale_time(spec: ProblemSpec, tau):
    return np.asarray(tau, dtype=float) * spec.horizon_T


def state_scale_factors(spec: ProblemSpec) -> np.ndarray:
    """d(scaled)/d(physical) per state dimension."""
    return 2.0 / (spec.hi - spec.lo)


def sample_states(spec: ProblemSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(spec.lo, spec.hi, size=(n, spec.n_state))
