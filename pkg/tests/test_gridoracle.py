import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supreach.gridoracle import (
    GridField,
    GridSpec,
    central_gradient,
    dissipation_bounds,
    extract_brt,
    field_from_csv,
    field_to_csv,
    interpolate,
    max_stable_dt,
    solve_hji,
    step_backward,
    terminal_field,
)
from supreach.problem import ProblemSpec, hamiltonian_closed_form, target_margin

SPEC = ProblemSpec()
ZERO = ProblemSpec(dynamics_id="zero")
G31 = GridSpec.for_problem(SPEC, 31)


@pytest.fixture(scope="module")
def air3d_run():
    return solve_hji(SPEC, G31, [1.0, 0.85, 0.7, 0.5, 0.3, 0.0])


def test_grid_spacing_and_axes():
    g = GridSpec.for_problem(SPEC, (5, 5, 8))
    np.testing.assert_allclose(g.spacing, [0.5, 0.5, 2 * np.pi / 8])
    ax = g.axes()
    assert ax[0][0] == -1.0 and ax[0][-1] == 1.0
    # periodic axis drops the duplicate endpoint
    assert ax[2][0] == pytest.approx(-np.pi) and ax[2][-1] < np.pi - 1e-9
    assert g.nodes().shape == (5, 5, 8, 3)


def test_grid_rejects_too_few_points():
    with pytest.raises(ValueError):
        GridSpec.for_problem(SPEC, (2, 5, 5))


def test_grid_dict_round_trip():
    assert GridSpec.from_dict(G31.to_dict()) == G31


def test_terminal_field_at_origin():
    f = terminal_field(SPEC, G31)
    assert f.values[15, 15, 7] == pytest.approx(-SPEC.beta, abs=1e-15)


def test_dissipation_bounds_defaults():
    np.testing.assert_allclose(dissipation_bounds(SPEC, G31), [4.5, 3.75, 6.0])
    assert np.all(dissipation_bounds(ZERO, G31) == 0)
    assert max_stable_dt(ZERO, G31) == np.inf


def _naive_step(V, spec, grid, dt):
    # independent loop implementation: local alpha, zero-gradient ghosts at non-periodic faces
    n = grid.n
    dx = grid.spacing
    nodes = grid.nodes()
    out = np.empty_like(V)
    w = spec.omega_max
    for idx in itertools.product(*[range(k) for k in n]):
        x = nodes[idx]
        alpha = [abs(-spec.v_e + spec.v_p * np.cos(x[2])) + w * abs(x[1]), abs(spec.v_p * np.sin(x[2])) + w * abs(x[0]), 2 * w]
        p, diss = np.zeros(3), 0.0
        for i in range(3):
            up, dn = list(idx), list(idx)
            if grid.periodic[i]:
                up[i] = (idx[i] + 1) % n[i]
                dn[i] = (idx[i] - 1) % n[i]
            else:
                up[i] = min(idx[i] + 1, n[i] - 1)
                dn[i] = max(idx[i] - 1, 0)
            fp = (V[tuple(up)] - V[idx]) / dx[i]
            fm = (V[idx] - V[tuple(dn)]) / dx[i]
            p[i] = 0.5 * (fp + fm)
            diss += alpha[i] * 0.5 * (fp - fm)
        h = hamiltonian_closed_form(spec, x, p) + diss
        out[idx] = min(V[idx] + dt * h, target_margin(spec, x))
    return out


def test_step_matches_loop_implementation():
    g = GridSpec.for_problem(SPEC, (7, 6, 8))
    rng = np.random.default_rng(0)
    V = target_margin(SPEC, g.nodes()) + 0.05 * rng.normal(size=g.n)
    dt = 0.9 * max_stable_dt(SPEC, g)
    new = step_backward(GridField(1.0, V), SPEC, g, dt)
    np.testing.assert_allclose(new.values, _naive_step(V, SPEC, g, dt), atol=1e-13)
    assert new.time == pytest.approx(1.0 - dt)


def test_step_rejects_cfl_violation():
    f = terminal_field(SPEC, G31)
    with pytest.raises(ValueError, match="CFL"):
        step_backward(f, SPEC, G31, 1.2 * max_stable_dt(SPEC, G31))


@pytest.mark.parametrize("cfl", [0.0, 1.0, 1.2])
def test_solve_rejects_bad_cfl(cfl):
    with pytest.raises(ValueError):
        solve_hji(SPEC, G31, [1.0, 0.0], cfl=cfl)


@pytest.mark.parametrize("ts", [[0.5, 0.0], [1.0, 0.0, 0.5], [1.0, 1.0]])
def test_solve_rejects_bad_times(ts):
    with pytest.raises(ValueError):
        solve_hji(SPEC, G31, ts)


def test_terminal_only_request():
    out = solve_hji(SPEC, G31, [1.0])
    assert len(out) == 1
    assert np.array_equal(out[0].values, terminal_field(SPEC, G31).values)


def test_zero_dynamics_field_equals_margin_exactly():
    g = GridSpec.for_problem(ZERO, 21)
    ell = terminal_field(ZERO, g).values
    for f in solve_hji(ZERO, g, [1.0, 0.6, 0.2, 0.0]):
        assert np.array_equal(f.values, ell)


def test_oracle_identities_on_air3d(air3d_run):
    ell = terminal_field(SPEC, G31).values
    assert np.array_equal(extract_brt(air3d_run[0]).mask, ell <= 0)
    for later, earlier in zip(air3d_run, air3d_run[1:]):
        assert earlier.time < later.time
        assert np.all(earlier.values <= later.values)
    for f in air3d_run:
        assert np.all(f.values <= ell)


def test_brt_grows_backward(air3d_run):
    sizes = [extract_brt(f).mask.sum() for f in air3d_run]
    assert sizes == sorted(sizes) and sizes[-1] > sizes[0]


def test_extract_brt_empty_for_positive_field():
    assert not extract_brt(GridField(0.0, np.ones(G31.n))).mask.any()


def test_interpolate_at_nodes_is_exact(air3d_run):
    f = air3d_run[-1]
    nodes = G31.nodes()
    idx = [(0, 0, 0), (30, 30, 30), (3, 17, 9), (15, 15, 15)]
    got = interpolate(f, G31, np.array([nodes[i] for i in idx]))
    np.testing.assert_array_equal(got, [f.values[i] for i in idx])


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-10.0, 10.0))
def test_interpolate_reproduces_affine_position_field(x1, x2, th):
    g = GridSpec.for_problem(SPEC, (9, 7, 12))
    nodes = g.nodes()
    vals = 0.3 + 2.0 * nodes[..., 0] - 1.5 * nodes[..., 1]
    got = interpolate(vals, g, np.array([x1, x2, th]))
    assert got[0] == pytest.approx(0.3 + 2.0 * x1 - 1.5 * x2, abs=1e-12)


def test_interpolate_affine_on_nonperiodic_grid():
    g = GridSpec((0.0, -1.0, 2.0), (1.0, 1.0, 3.0), (4, 5, 6), (False, False, False))
    nodes = g.nodes()
    vals = 1.0 + nodes @ np.array([0.5, -2.0, 3.0])
    x = np.random.default_rng(1).uniform([0, -1, 2], [1, 1, 3], size=(200, 3))
    np.testing.assert_allclose(interpolate(vals, g, x), 1.0 + x @ np.array([0.5, -2.0, 3.0]), atol=1e-12)


def test_interpolate_heading_seam(air3d_run):
    f = air3d_run[2]
    a = interpolate(f, G31, np.array([[0.3, -0.2, -np.pi]]))
    b = interpolate(f, G31, np.array([[0.3, -0.2, np.pi]]))
    assert a[0] == pytest.approx(b[0], abs=1e-12)


def test_interpolate_outside_box_raises():
    with pytest.raises(ValueError):
        interpolate(np.zeros(G31.n), G31, np.array([1.5, 0.0, 0.0]))


def test_central_gradient_of_affine():
    g = GridSpec((0.0, 0.0, 0.0), (1.0, 2.0, 3.0), (5, 6, 7), (False, False, False))
    vals = g.nodes() @ np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(central_gradient(vals, g), np.broadcast_to([1.0, -2.0, 0.5], g.n + (3,)), atol=1e-12)


def test_csv_round_trip(air3d_run):
    g = GridSpec.for_problem(SPEC, 5)
    f = solve_hji(SPEC, g, [1.0, 0.5])[1]
    text = field_to_csv(f, g, SPEC, extract_brt(f))
    assert text.splitlines()[0] == "t,x1,x2,theta,v,inside"
    assert len(text.splitlines()) == 1 + 125
    back = field_from_csv(text, g)
    assert back.time == 0.5 and np.array_equal(back.values, f.values)
