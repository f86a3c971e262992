"""Dense-grid Lax-Friedrichs solver for the reachability variational inequality.

Stepping backward from ``V(T) = l``, each step applies the Lax-Friedrichs
numerical Hamiltonian (per-node or global dissipation bounds) and then takes
the pointwise minimum with ``l`` (the freezing branch).
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec, hamiltonian_closed_form, target_margin


@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    n: tuple
    periodic: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "periodic", tuple(bool(v) for v in self.periodic))
        if not (len(self.lo) == len(self.hi) == len(self.n) == len(self.periodic)):
            raise ValueError("grid fields must have equal length")
        for i in range(self.ndim):
            if self.n[i] < 3:
                raise ValueError(f"grid dimension {i} needs at least 3 points")
            if not self.lo[i] < self.hi[i]:
                raise ValueError(f"grid lo[{i}] must be < hi[{i}]")

    @classmethod
    def for_problem(cls, spec: ProblemSpec, n) -> "GridSpec":
        if np.isscalar(n):
            n = (int(n),) * spec.n_state
        return cls(spec.state_lo, spec.state_hi, tuple(n), spec.periodic)

    @property
    def ndim(self):
        return len(self.n)

    @property
    def shape(self):
        return self.n

    @property
    def spacing(self) -> np.ndarray:
        return np.array(
            [(h - l) / (n if p else n - 1) for l, h, n, p in zip(self.lo, self.hi, self.n, self.periodic)]
        )

    def axes(self):
        out = []
        for l, h, n, p, dx in zip(self.lo, self.hi, self.n, self.periodic, self.spacing):
            out.append(l + dx * np.arange(n) if p else np.linspace(l, h, n))
        return out

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (*n, ndim), row-major."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n), "periodic": list(self.periodic)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"lo", "hi", "n", "periodic"}
        if unknown:
            raise ValueError(f"unknown grid fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GridField:
    time: float
    values: np.ndarray  # shape grid.n


@dataclass
class BrtMask:
    time: float
    mask: np.ndarray


def terminal_field(spec: ProblemSpec, grid: GridSpec) -> GridField:
    return GridField(spec.horizon_T, target_margin(spec, grid.nodes()))


def dissipation_bounds(spec: ProblemSpec, grid: GridSpec) -> np.ndarray:
    """Global bounds alpha_i >= sup |dH/dp_i| over the grid box."""
    if spec.dynamics_id == "zero":
        return np.zeros(grid.ndim)
    w = spec.omega_max
    x1max = max(abs(grid.lo[0]), abs(grid.hi[0]))
    x2max = max(abs(grid.lo[1]), abs(grid.hi[1]))
    drift = max(abs(spec.v_p - spec.v_e), spec.v_e + spec.v_p)
    return np.array([drift + w * x2max, spec.v_p + w * x1max, 2.0 * w])


def local_dissipation(spec: ProblemSpec, nodes) -> list:
    """Per-node bounds alpha_i(x) >= sup_p |dH/dp_i(x, p)|.

    Bounding at the node where H is evaluated keeps the scheme monotone while
    adding far less smoothing than the global bounds.
    """
    if spec.dynamics_id == "zero":
        return [np.zeros(nodes.shape[:-1]) for _ in range(nodes.shape[-1])]
    w = spec.omega_max
    th = nodes[..., 2]
    return [
        np.abs(-spec.v_e + spec.v_p * np.cos(th)) + w * np.abs(nodes[..., 1]),
        np.abs(spec.v_p * np.sin(th)) + w * np.abs(nodes[..., 0]),
        np.full(nodes.shape[:-1], 2.0 * w),
    ]


def _one_sided(values, grid: GridSpec):
    """Forward and backward differences per dimension."""
    dplus, dminus = [], []
    for i, (dx, per) in enumerate(zip(grid.spacing, grid.periodic)):
        if per:
            fwd = (np.roll(values, -1, axis=i) - values) / dx
            bwd = (values - np.roll(values, 1, axis=i)) / dx
        else:
            # zero-gradient ghost nodes keep the scheme monotone at the faces
            diff = np.diff(values, axis=i) / dx
            edge = np.zeros_like(np.take(diff, [0], axis=i))
            fwd = np.concatenate([diff, edge], axis=i)
            bwd = np.concatenate([edge, diff], axis=i)
        dplus.append(fwd)
        dminus.append(bwd)
    return dplus, dminus


def max_stable_dt(spec, grid, cfl=1.0):
    rate = float(np.sum(dissipation_bounds(spec, grid) / grid.spacing))
    return np.inf if rate == 0 else cfl / rate


def step_backward(field: GridField, spec: ProblemSpec, grid: GridSpec, dt: float, nodes=None, ell=None,
                  dissipation="local") -> GridField:
    """One explicit Lax-Friedrichs step from ``t`` to ``t - dt``.

    ``dissipation`` is ``"local"`` (per-node bounds) or ``"global"``.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if dt > max_stable_dt(spec, grid) * (1 + 1e-12):
        raise ValueError(f"dt={dt} violates the CFL bound {max_stable_dt(spec, grid)}")
    if nodes is None:
        nodes = grid.nodes()
    if ell is None:
        ell = target_margin(spec, nodes)
    V = field.values
    if spec.dynamics_id == "zero":
        return GridField(field.time - dt, np.minimum(V, ell))
    if dissipation == "global":
        alpha = list(dissipation_bounds(spec, grid))
    elif dissipation == "local":
        alpha = local_dissipation(spec, nodes)
    else:
        raise ValueError(f"unknown dissipation {dissipation!r}")
    dplus, dminus = _one_sided(V, grid)
    p = np.stack([(a + b) * 0.5 for a, b in zip(dplus, dminus)], axis=-1)
    ham = hamiltonian_closed_form(spec, nodes, p)
    # + sign: backward in time, the dissipation must smooth
    for a, fp, fm in zip(alpha, dplus, dminus):
        ham = ham + a * (fp - fm) * 0.5
    return GridField(field.time - dt, np.minimum(V + dt * ham, ell))


def solve_hji(spec: ProblemSpec, grid: GridSpec, t_samples, cfl: float = 0.5, dissipation="local") -> list:
    """Integrate backward from ``V(T) = l``; returns a GridField per requested time."""
    if not 0 < cfl < 1:
        raise ValueError("cfl must be in (0, 1)")
    ts = [float(t) for t in t_samples]
    T = spec.horizon_T
    if not ts or not np.isclose(ts[0], T):
        raise ValueError("t_samples must start at T")
    if any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] < -1e-12:
        raise ValueError("t_samples must be strictly decreasing within [0, T]")
    nodes = grid.nodes()
    ell = target_margin(spec, nodes)
    field = GridField(T, ell.copy())
    out = [GridField(T, field.values.copy())]
    dt_max = max_stable_dt(spec, grid, cfl)
    t = T
    for target in ts[1:]:
        while t > target:
            last = t - dt_max <= target + 1e-12
            dt = t - target if last else dt_max
            field = step_backward(field, spec, grid, dt, nodes, ell, dissipation)
            t = target if last else t - dt
        out.append(GridField(target, field.values.copy()))
    return out


def _snap(pos):
    # queries that sit on a node up to rounding return the stored value exactly
    r = np.round(pos)
    return np.where(np.abs(pos - r) < 1e-9, r, pos)


def _locate(grid: GridSpec, x):
    """Per-dimension (lower index, upper index, weight) for multilinear lookup."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lo_idx, hi_idx, weights = [], [], []
    for i, (l, h, n, per, dx) in enumerate(zip(grid.lo, grid.hi, grid.n, grid.periodic, grid.spacing)):
        c = x[:, i]
        if per:
            pos = _snap(((c - l) % (h - l)) / dx)
            j = np.floor(pos).astype(int)
            w = pos - j
            j = j % n
            lo_idx.append(j)
            hi_idx.append((j + 1) % n)
        else:
            tol = 1e-9 * (h - l)
            if np.any((c < l - tol) | (c > h + tol)):
                raise ValueError(f"query outside the grid on dimension {i}")
            pos = np.clip(_snap((c - l) / dx), 0, n - 1)
            j = np.minimum(np.floor(pos).astype(int), n - 2)
            w = pos - j
            lo_idx.append(j)
            hi_idx.append(j + 1)
        weights.append(w)
    return lo_idx, hi_idx, weights


def interpolate(values: np.ndarray, grid: GridSpec, x) -> np.ndarray:
    """Multilinear interpolation of node values (or of a GridField) at states ``x``."""
    if isinstance(values, GridField):
        values = values.values
    lo_idx, hi_idx, weights = _locate(grid, x)
    out = 0.0
    for corner in itertools.product((0, 1), repeat=grid.ndim):
        idx = tuple(h if c else l for c, l, h in zip(corner, lo_idx, hi_idx))
        wt = 1.0
        for c, w in zip(corner, weights):
            wt = wt * (w if c else 1.0 - w)
        out = out + wt * values[idx]
    return out


def central_gradient(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Central differences (periodic-aware, one-sided at non-periodic faces)."""
    grads = []
    for i, (dx, per) in enumerate(zip(grid.spacing, grid.periodic)):
        if per:
            g = (np.roll(values, -1, axis=i) - np.roll(values, 1, axis=i)) / (2 * dx)
        else:
            g = np.gradient(values, dx, axis=i, edge_order=1)
        grads.append(g)
    return np.stack(grads, axis=-1)


def extract_brt(field: GridField) -> BrtMask:
    return BrtMask(field.time, field.values <= 0)


# ------------------------------------------------------------------ export


def state_column_names(spec: ProblemSpec):
    if spec.dynamics_id == "air3d":
        return ["x1", "x2", "theta"]
    return [f"x{i + 1}" for i in range(spec.n_state)]


def field_to_csv(field: GridField, grid: GridSpec, spec: ProblemSpec, mask: BrtMask | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["t"] + state_column_names(spec) + ["v"]
    if mask is not None:
        header.append("inside")
    w.writerow(header)
    nodes = grid.nodes().reshape(-1, grid.ndim)
    vals = field.values.ravel()
    inside = None if mask is None else mask.mask.ravel()
    t = repr(float(field.time))
    for k in range(vals.size):
        row = [t] + [repr(float(c)) for c in nodes[k]] + [repr(float(vals[k]))]
        if inside is not None:
            row.append(int(inside[k]))
        w.writerow(row)
    return buf.getvalue()


def field_from_csv(text: str, grid: GridSpec) -> GridField:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    vi = header.index("v")
    vals = np.array([float(r[vi]) for r in body])
    if vals.size != int(np.prod(grid.n)):
        raise ValueError("CSV node count does not match grid")
    return GridField(float(body[0][0]), vals.reshape(grid.n))


def field_metadata(grid: GridSpec, spec: ProblemSpec, times) -> str:
    doc = {
        "grid": grid.to_dict(),
        "problem": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "times": [float(t) for t in times],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
