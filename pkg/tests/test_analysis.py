import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supreach.analysis import (
    GridValue,
    NetworkValue,
    adversarial_lipschitz_ratio,
    brt_compare,
    compare,
    convergence_series,
    estimate_Cf,
    hamiltonian_oracle_check,
    kendall,
    lipschitz_hamiltonian_check,
    proper_operator,
    properness_check,
    report_to_csv,
    residual_fields,
    slice_to_csv,
    sup_error,
)
from supreach.gridoracle import GridField, GridSpec, solve_hji
from supreach.problem import ProblemSpec, hamiltonian_closed_form, target_margin
from supreach.sirennet import Checkpoint, NetworkArch, init_params, zero_params

SPEC = ProblemSpec()
G = GridSpec.for_problem(SPEC, 15)
ARCH = NetworkArch(in_dim=4, hidden_widths=(8, 8))


@pytest.fixture(scope="module")
def fields():
    return solve_hji(SPEC, G, [1.0, 0.7, 0.0])


def _shifted(fields, c):
    return [GridField(f.time, f.values + c) for f in fields]


def test_lookup_stub_has_zero_error(fields):
    rep = sup_error(GridValue(fields, G, SPEC), fields, G, SPEC)
    assert rep.sup_abs_err == 0.0 and rep.mean_abs_err == 0.0


def test_constant_offset_error(fields):
    rep = sup_error(GridValue(_shifted(fields, 0.1), G, SPEC), fields, G, SPEC)
    assert rep.sup_abs_err == pytest.approx(0.1, abs=1e-12)
    assert rep.mean_abs_err == pytest.approx(0.1, abs=1e-12)
    assert len(rep.per_time) == 3


def test_problem_mismatch_rejected(fields):
    other = GridValue(fields, G, ProblemSpec(beta=0.3))
    with pytest.raises(ValueError):
        sup_error(other, fields, G, SPEC)


def test_grid_value_time_interpolation(fields):
    src = GridValue(fields, G, SPEC)
    x = np.array([[0.3, -0.4, 1.0]])
    a, b = src.value(0.7, x)[0], src.value(1.0, x)[0]
    assert src.value(0.85, x)[0] == pytest.approx(0.5 * (a + b), abs=1e-12)
    assert src.evaluate(0.85, x).dt[0] == pytest.approx((b - a) / 0.3, rel=1e-9)
    with pytest.raises(ValueError):
        src.value(1.5, x)


def test_zero_network_residual_fields():
    ckpt = Checkpoint(ARCH, SPEC, zero_params(ARCH), {"step": 0})
    rf = residual_fields(NetworkValue(ckpt), SPEC, G, [1.0, 0.5])
    ell = target_margin(SPEC, G.nodes())
    assert rf.delta_sup == pytest.approx(np.max(np.abs(ell)), abs=1e-15)
    # V = 0 and zero costate: residual is min(0, l)
    np.testing.assert_allclose(rf.eps_field[0], np.minimum(0.0, ell), atol=1e-15)
    assert rf.eps_sup == pytest.approx(SPEC.beta)


def test_brt_compare_identical_and_disjoint():
    a = np.zeros((10, 10, 4), dtype=bool)
    a[:5] = True
    r = brt_compare(a, a)
    assert (r.iou, r.false_safe_rate, r.false_unsafe_rate) == (1.0, 0.0, 0.0)
    r = brt_compare(a, ~a)
    assert (r.iou, r.false_safe_rate, r.false_unsafe_rate) == (0.0, 1.0, 1.0)


def test_brt_compare_one_extra_node():
    b = np.zeros(400, dtype=bool)
    b[:100] = True
    a = b.copy()
    a[200] = True
    r = brt_compare(a, b)
    assert r.iou == pytest.approx(100 / 101)
    assert r.false_safe_rate == 0.0
    assert r.false_unsafe_rate == pytest.approx(1 / 101)


def test_brt_compare_shape_mismatch():
    with pytest.raises(ValueError):
        brt_compare(np.zeros(4, bool), np.zeros(5, bool))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=8, max_size=8), st.lists(st.booleans(), min_size=8, max_size=8))
def test_brt_compare_rates_in_unit_interval(a, b):
    r = brt_compare(np.array(a), np.array(b))
    for v in (r.iou, r.false_safe_rate, r.false_unsafe_rate):
        assert 0.0 <= v <= 1.0


def test_compare_rows_and_csv(fields):
    rows = compare(GridValue(fields, G, SPEC), fields, G, SPEC)
    assert [r.t for r in rows] == [1.0, 0.7, 0.0]
    assert all(r.sup_abs_err == 0 and r.iou == 1.0 for r in rows)
    lines = report_to_csv(rows).splitlines()
    assert lines[0] == "t,sup_abs_err,mean_abs_err,iou,false_safe_rate,false_unsafe_rate"
    assert len(lines) == 4


def test_slice_csv_blocks(fields):
    oracle = GridValue(fields, G, SPEC)
    text = slice_to_csv(GridValue(_shifted(fields, 0.05), G, SPEC), oracle, G)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 4 * 15 * 15
    assert sorted({float(r["theta"]) for r in rows}) == pytest.approx([-np.pi / 2, 0.0, np.pi / 2, np.pi])
    assert all(float(r["t"]) == 0.7 for r in rows)
    assert max(float(r["abs_err"]) for r in rows) == pytest.approx(0.05, abs=1e-12)


def test_estimate_Cf_defaults():
    # max ||f|| is attained at a box vertex with bang-bang inputs and the
    # heading that aligns v_p (cos, sin) against the rotation terms
    exact = np.sqrt(3.75**2 + 3.0**2 + 0.75**2 + 6.0**2 + 2 * 0.75 * np.hypot(3.75, 3.0))
    assert exact == pytest.approx(8.174870932749455, abs=1e-12)
    assert estimate_Cf(SPEC) == pytest.approx(exact, abs=1e-9)
    assert estimate_Cf(ProblemSpec(dynamics_id="zero")) == 0.0


def test_estimate_Cf_bounds_sampled_dynamics():
    from supreach.problem import dynamics, sample_states

    rng = np.random.default_rng(0)
    x = sample_states(SPEC, rng, 20000)
    u = rng.uniform(-3, 3, 20000)
    d = rng.uniform(-3, 3, 20000)
    assert np.linalg.norm(dynamics(SPEC, x, u, d), axis=-1).max() <= estimate_Cf(SPEC) + 1e-12


def test_lipschitz_check_passes():
    rep = lipschitz_hamiltonian_check(SPEC, trials=2000, seed=1)
    assert rep.passed and rep.failures == 0 and rep.max_ratio <= 1.0


def test_lipschitz_zero_eps_is_exact():
    rep = lipschitz_hamiltonian_check(SPEC, trials=100, eps_list=(0.0,), seed=2)
    assert rep.passed and rep.slack >= 0


def test_adversarial_ratio_near_one():
    r = adversarial_lipschitz_ratio(SPEC)
    assert 0.99 < r <= 1.0


def test_properness_check_passes():
    rep = properness_check(SPEC, trials=2000, seed=3)
    assert rep.passed and rep.slack >= 0


def test_properness_equal_arguments_and_inactive_branch():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, size=(50, 3))
    p_x = rng.normal(size=(50, 3))
    p_t = rng.normal(size=50)
    r = rng.normal(size=50)
    assert np.array_equal(proper_operator(SPEC, 0.0, x, r, p_t, p_x), proper_operator(SPEC, 0.0, x, r, p_t, p_x))
    lo1 = proper_operator(SPEC, 0.0, x, np.full(50, -100.0), p_t, p_x)
    lo2 = proper_operator(SPEC, 0.0, x, np.full(50, -90.0), p_t, p_x)
    assert np.array_equal(lo1, lo2)


def test_hamiltonian_oracle_check_passes_and_catches_sign_flip():
    assert hamiltonian_oracle_check(SPEC, trials=100, n_u=41, n_d=41, seed=0).passed

    def flipped(spec, x, p):
        return -hamiltonian_closed_form(spec, x, p)

    rep = hamiltonian_oracle_check(SPEC, trials=100, n_u=41, n_d=41, seed=0, ham=flipped)
    assert not rep.passed and rep.failures > 0


def test_kendall_cases():
    assert kendall([3, 2, 1], [0.3, 0.2, 0.1]) == (1.0, False)
    assert kendall([3, 2, 1], [0.1, 0.2, 0.3]) == (-1.0, False)
    assert kendall([1, 1, 1], [0.3, 0.2, 0.1]) == (1.0, True)


def test_convergence_series_repeated_checkpoints(fields):
    c = Checkpoint(ARCH, SPEC, init_params(ARCH, 0), {"step": 10, "train": {"lam": 150.0}})
    ser = convergence_series([c, c, c], fields, G, SPEC)
    assert ser.degenerate and ser.kendall_tau == 1.0
    assert len(set(ser.sup_errors)) == 1


def test_convergence_series_needs_three(fields):
    c = Checkpoint(ARCH, SPEC, init_params(ARCH, 0), {"step": 1})
    with pytest.raises(ValueError):
        convergence_series([c, c], fields, G, SPEC)
