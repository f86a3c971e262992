import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supreach.problem import ProblemSpec, sample_states, scale_state
from supreach.sirennet import (
    AdamState,
    Checkpoint,
    NetworkArch,
    NetworkParams,
    NumericError,
    SchemaError,
    adam_step,
    checkpoint_from_dict,
    forward,
    forward_with_input_grads,
    init_params,
    load_checkpoint,
    loss_param_grad,
    save_checkpoint,
    zero_params,
)
from supreach.verification import input_gradient_error

SPEC = ProblemSpec()
ARCH = NetworkArch(in_dim=4, hidden_widths=(16, 16))


def test_arch_shapes_and_count():
    arch = NetworkArch(in_dim=4, hidden_widths=(64, 64))
    assert arch.layer_shapes == [(64, 4), (64, 64), (1, 64)]
    assert arch.n_params == 64 * 4 + 64 + 64 * 64 + 64 + 64 + 1
    assert arch.omegas() == [30.0, 1.0]


@pytest.mark.parametrize("kw", [{"hidden_widths": ()}, {"activation": "relu"}, {"out_dim": 2}, {"in_dim": 1}])
def test_arch_rejects_bad_fields(kw):
    with pytest.raises(ValueError):
        NetworkArch(**kw)


def test_init_is_deterministic_and_seeded():
    a, b, c = init_params(ARCH, 0), init_params(ARCH, 0), init_params(ARCH, 1)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


def test_init_ranges():
    p = init_params(NetworkArch(in_dim=4, hidden_widths=(256, 256)), 3)
    assert np.abs(p.weights[0]).max() <= 1.0 / 4
    assert np.abs(p.weights[1]).max() <= np.sqrt(6.0 / 256)
    assert all(np.all(b == 0) for b in p.biases)


def test_flat_round_trip():
    p = init_params(ARCH, 2)
    q = NetworkParams.from_flat(ARCH, p.flat())
    assert np.array_equal(q.flat(), p.flat())
    with pytest.raises(SchemaError):
        NetworkParams.from_flat(ARCH, p.flat()[:-1])


def test_zero_params_give_zero_everywhere():
    x = sample_states(SPEC, np.random.default_rng(0), 20)
    t = np.linspace(0, 1, 20)
    b = forward_with_input_grads(zero_params(ARCH), ARCH, SPEC, t, x)
    assert np.all(b.value == 0) and np.all(b.dt == 0) and np.all(b.dx == 0)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        forward(init_params(ARCH, 0), ARCH, 0.5, np.zeros((3, 2)))


def test_single_unit_gradient_matches_hand_formulas():
    arch = NetworkArch(in_dim=4, hidden_widths=(1,), omega0_first=30.0)
    rng = np.random.default_rng(5)
    p = NetworkParams([rng.normal(size=(1, 4)), rng.normal(size=(1, 1))], [rng.normal(size=1), rng.normal(size=1)])
    t0, x0 = np.array([0.4]), np.array([[0.2, -0.5, 1.1]])
    z = np.concatenate([[0.4], scale_state(SPEC, x0[0])])
    a = 30.0 * (p.weights[0][0] @ z + p.biases[0][0])
    w2 = p.weights[1][0, 0]

    def loss_fn(b):
        return b.value.sum(), np.ones(1), np.zeros(1), np.zeros((1, 3))

    loss, g = loss_param_grad(p, arch, SPEC, t0, x0, loss_fn)
    assert loss == pytest.approx(w2 * np.sin(a) + p.biases[1][0], abs=1e-12)
    expected = np.concatenate([w2 * np.cos(a) * 30.0 * z, [w2 * np.cos(a) * 30.0], [np.sin(a)], [1.0]])
    np.testing.assert_allclose(g, expected, rtol=0, atol=1e-10)


def test_constant_loss_has_zero_gradient():
    x = sample_states(SPEC, np.random.default_rng(1), 8)

    def loss_fn(b):
        n = b.value.size
        return 0.0, np.zeros(n), np.zeros(n), np.zeros((n, 3))

    _, g = loss_param_grad(init_params(ARCH, 0), ARCH, SPEC, np.full(8, 0.5), x, loss_fn)
    assert np.all(g == 0)


def test_non_finite_cotangent_reports_index():
    x = sample_states(SPEC, np.random.default_rng(1), 4)

    def loss_fn(b):
        g = np.zeros(4)
        g[2] = np.nan
        return 0.0, g, np.zeros(4), np.zeros((4, 3))

    with pytest.raises(NumericError) as info:
        loss_param_grad(init_params(ARCH, 0), ARCH, SPEC, np.full(4, 0.5), x, loss_fn)
    assert info.value.index == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99), st.floats(-0.99, 0.99), st.floats(-0.99, 0.99), st.floats(-3.1, 3.1))
def test_input_gradients_match_differences(seed, t, x1, x2, th):
    arch = NetworkArch(in_dim=4, hidden_widths=(32, 32))
    err = input_gradient_error(init_params(arch, seed), arch, SPEC, t, np.array([x1, x2, th]))
    assert err <= 1e-5


def test_value_gradient_of_linear_loss_matches_differences():
    rng = np.random.default_rng(7)
    p = init_params(ARCH, 7)
    t = rng.uniform(0, 1, 6)
    x = sample_states(SPEC, rng, 6)
    w = rng.normal(size=(6, 5))

    def loss_fn(b):
        total = w[:, 0] @ b.value + w[:, 1] @ b.dt + np.sum(w[:, 2:] * b.dx)
        return total, w[:, 0], w[:, 1], w[:, 2:]

    _, g = loss_param_grad(p, ARCH, SPEC, t, x, loss_fn)
    theta = p.flat()
    direction = rng.normal(size=theta.size)
    h = 1e-6

    def L(th):
        return loss_fn(forward_with_input_grads(NetworkParams.from_flat(ARCH, th), ARCH, SPEC, t, x))[0]

    fd = (L(theta + h * direction) - L(theta - h * direction)) / (2 * h)
    assert g @ direction == pytest.approx(fd, rel=1e-6)


def test_adam_zero_gradient_keeps_parameters():
    theta = np.arange(5.0)
    st_ = AdamState.zeros(5, lr=1e-2)
    for _ in range(3):
        theta2 = adam_step(theta, np.zeros(5), st_)
    assert np.array_equal(theta2, theta)


def test_adam_constant_gradient_moves_by_lr():
    theta = np.zeros(3)
    state = AdamState.zeros(3, lr=1e-3)
    g = np.array([5.0, -0.01, 200.0])
    for _ in range(200):
        new = adam_step(theta, g, state)
        step = new - theta
        theta = new
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_first_step_value():
    state = AdamState.zeros(2, lr=0.1)
    out = adam_step(np.array([1.0, 1.0]), np.array([2.0, -3.0]), state)
    # bias correction makes the first step lr * g / (|g| + eps)
    np.testing.assert_allclose(out, [0.9, 1.1], atol=1e-8)
    assert state.step == 1


def _ckpt(with_opt=False):
    p = init_params(ARCH, 4)
    opt = AdamState.zeros(ARCH.n_params) if with_opt else None
    return Checkpoint(ARCH, SPEC, p, {"step": 0, "phase": "init"}, opt)


@pytest.mark.parametrize("with_opt", [False, True])
def test_checkpoint_round_trip_is_byte_stable(tmp_path, with_opt):
    a = save_checkpoint(_ckpt(with_opt), tmp_path / "a.json")
    loaded = load_checkpoint(a)
    b = save_checkpoint(loaded, tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(loaded.params.flat(), _ckpt().params.flat())


@pytest.mark.parametrize("field", ["format_version", "arch", "problem", "scaling", "params", "meta"])
def test_checkpoint_missing_field_is_named(field):
    doc = json.loads(_ckpt().dumps())
    del doc[field]
    with pytest.raises(SchemaError, match=field):
        checkpoint_from_dict(doc)


def test_checkpoint_wrong_layer_shape():
    doc = json.loads(_ckpt().dumps())
    doc["params"][1]["bias"] = [0.0]
    with pytest.raises(SchemaError, match=r"params\[1\]"):
        checkpoint_from_dict(doc)


def test_checkpoint_corrupt_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_checkpoint(path)
