import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ktimpute.numeric import (
    Adam,
    AdamState,
    GruCellParams,
    LstmCellParams,
    NonScalarLoss,
    Parameter,
    ShapeMismatch,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    concat,
    constant,
    exp,
    finite_difference_grad,
    gru_cell,
    linear,
    log,
    lstm_cell,
    masked_mean_square,
    matmul,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    sigmoid,
    slice_axis,
    square,
    stack,
    tanh,
)

from conftest import rel_err


def test_matmul_identity():
    A = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(matmul(constant(np.eye(2)), constant(A)).data, A)


def test_elementwise_basics():
    assert sigmoid(constant(0.0)).item() == 0.5
    assert reduce_sum(constant([1.0, 2.0, 3.0])).item() == 6.0
    assert reduce_mean(constant([1.0, 2.0, 3.0])).item() == 2.0
    assert tanh(constant(0.0)).item() == 0.0
    assert log(exp(constant(1.5))).item() == pytest.approx(1.5, abs=1e-15)


def test_sigmoid_is_stable_at_extremes():
    s = sigmoid(constant([-800.0, 800.0])).data
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[1] == 1.0


def test_shape_mismatch_raised():
    with pytest.raises(ShapeMismatch):
        matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        add(constant(np.ones(3)), constant(np.ones(2)))
    with pytest.raises(ShapeMismatch):
        mul(constant(np.ones((2, 1))), constant(np.ones((2, 2))))


def test_scalar_broadcast_allowed():
    out = mul(constant(2.0), constant(np.ones(3)))
    np.testing.assert_array_equal(out.data, [2.0, 2.0, 2.0])


def test_backward_square():
    x = Parameter(3.0)
    with Tape() as tape:
        loss = square(x)
    assert backward(tape, loss, [x])[x] == pytest.approx(6.0)


def test_disconnected_leaf_gets_zero():
    x, y = Parameter(3.0), Parameter(np.ones(4))
    with Tape() as tape:
        loss = square(x)
    g = backward(tape, loss, [x, y])
    np.testing.assert_array_equal(g[y], np.zeros(4))


def test_non_scalar_loss_rejected():
    x = Parameter(np.ones(3))
    with Tape() as tape:
        loss = square(x)
    with pytest.raises(NonScalarLoss):
        backward(tape, loss, [x])


def test_tape_is_topologically_ordered():
    x = Parameter(np.ones((2, 2)))
    with Tape() as tape:
        y = square(matmul(x, x))
        reduce_sum(add(y, x))
    seen = {id(x)}
    for node in tape.nodes:
        for p in node.parents:
            if tape.tracks(p):
                assert id(p) in seen
        seen.add(id(node.out))


def test_no_grad_records_nothing():
    x = Parameter(2.0)
    with Tape() as tape:
        with no_grad():
            square(x)
    assert tape.nodes == []


def _check_grad(loss_fn, params, tol=1e-4):
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss, params)

    def value():
        with no_grad():
            return loss_fn().item()

    for p in params:
        fd = finite_difference_grad(value, p)
        assert rel_err(grads[p], fd) < tol, p.name


@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.normal(size=(4, 2)))
    W = Parameter(rng.normal(size=(2, 4)))
    bias = Parameter(rng.normal(size=2))
    c = Parameter(rng.uniform(0.5, 2.0, size=(3, 2)))

    def loss():
        m = matmul(a, b)
        lin = linear(a, W, bias)
        joined = concat([sigmoid(m), tanh(lin), log(c)], axis=1)
        part = slice_axis(joined, 1, 4, axis=1)
        st_ = stack([part, exp(scale_down(part))], axis=0)
        return add(reduce_mean(square(st_)), reduce_sum(mul(c, m)))

    def scale_down(t):
        return mul(constant(0.3), t)

    _check_grad(loss, [a, b, W, bias, c])


def test_masked_mean_square_ignores_masked_targets():
    pred = Parameter(np.array([[0.1, 0.2, 0.3]]))
    mask = np.array([[True, True, False]])
    outs = []
    for pad_value in (0.0, 123.0):
        target = np.array([[0.0, 1.0, pad_value]])
        with Tape() as tape:
            loss = masked_mean_square(pred, target, mask)
        outs.append((loss.item(), backward(tape, loss, [pred])[pred]))
    assert outs[0][0] == outs[1][0]
    np.testing.assert_array_equal(outs[0][1], outs[1][1])
    assert outs[0][1][0, 2] == 0.0


# ---------------------------------------------------------------------------
# recurrent cells


def test_lstm_zero_params_zero_state():
    p = LstmCellParams.zeros(2, 3)
    h, c = lstm_cell(p, constant(np.zeros((1, 2))), constant(np.zeros((1, 3))), constant(np.zeros((1, 3))))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_lstm_saturated_forget_gate_keeps_cell():
    p = LstmCellParams.zeros(2, 3)
    p.b_f.data = np.full(3, 50.0)
    c_prev = np.array([[0.3, -1.2, 2.0]])
    x = np.array([[5.0, -4.0]])
    _, c = lstm_cell(p, constant(x), constant(np.zeros((1, 3))), constant(c_prev))
    np.testing.assert_allclose(c.data, c_prev, atol=1e-9)


def test_lstm_shapes_checked():
    p = LstmCellParams.zeros(2, 3)
    with pytest.raises(ShapeMismatch):
        lstm_cell(p, constant(np.zeros((1, 3))), constant(np.zeros((1, 3))), constant(np.zeros((1, 3))))


def test_lstm_param_shapes():
    p = LstmCellParams.init(2, 3, np.random.default_rng(0))
    for W in (p.W_i, p.W_f, p.W_g, p.W_o):
        assert W.shape == (3, 5)
    for b in (p.b_i, p.b_f, p.b_g, p.b_o):
        assert b.shape == (3,)


@pytest.mark.parametrize("seed", range(4))
def test_lstm_gradients(seed):
    rng = np.random.default_rng(seed)
    p = LstmCellParams.init(2, 3, rng)
    x = Parameter(rng.normal(size=(2, 2)))
    h0 = Parameter(rng.normal(size=(2, 3)))
    c0 = Parameter(rng.normal(size=(2, 3)))

    def loss():
        h, c = lstm_cell(p, x, h0, c0)
        return add(reduce_sum(h), reduce_sum(mul(c, c)))

    _check_grad(loss, [x, h0, c0, *p.parameters()])


def test_gru_zero_params():
    p = GruCellParams.zeros(2, 3)
    h = gru_cell(p, constant(np.zeros((1, 2))), constant(np.zeros((1, 3))))
    np.testing.assert_array_equal(h.data, 0.0)
    hp = np.array([[1.0, -2.0, 0.5]])
    h = gru_cell(p, constant(np.zeros((1, 2))), constant(hp))
    np.testing.assert_allclose(h.data, 0.5 * hp)


def test_gru_closed_update_gate_gives_candidate():
    rng = np.random.default_rng(1)
    p = GruCellParams.init(2, 3, rng)
    p.W_u.data = np.zeros_like(p.W_u.data)
    p.b_u.data = np.full(3, -50.0)
    x, hp = rng.normal(size=(1, 2)), rng.normal(size=(1, 3))
    xh = np.concatenate([x, hp], axis=1)
    r = 1 / (1 + np.exp(-(xh @ p.W_r.data.T + p.b_r.data)))
    n = np.tanh(np.concatenate([x, r * hp], axis=1) @ p.W_n.data.T + p.b_n.data)
    h = gru_cell(p, constant(x), constant(hp))
    np.testing.assert_allclose(h.data, n, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_gru_gradients(seed):
    rng = np.random.default_rng(10 + seed)
    p = GruCellParams.init(2, 3, rng)
    x = Parameter(rng.normal(size=(2, 2)))
    h0 = Parameter(rng.normal(size=(2, 3)))
    _check_grad(lambda: reduce_sum(square(gru_cell(p, x, h0))), [x, h0, *p.parameters()])


def test_lstm_over_five_steps_gradients():
    rng = np.random.default_rng(7)
    p = LstmCellParams.init(2, 3, rng)
    xs = rng.normal(size=(5, 2, 2))

    def loss():
        h, c = constant(np.zeros((2, 3))), constant(np.zeros((2, 3)))
        total = constant(0.0)
        for t in range(5):
            h, c = lstm_cell(p, constant(xs[t]), h, c)
            total = add(total, reduce_sum(square(h)))
        return total

    _check_grad(loss, p.parameters())


def test_cells_are_deterministic():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(3)
        p = LstmCellParams.init(2, 4, rng)
        x = rng.normal(size=(3, 2))
        h, c = lstm_cell(p, constant(x), constant(np.zeros((3, 4))), constant(np.zeros((3, 4))))
        outs.append(h.data.tobytes() + c.data.tobytes())
    assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0]))
    st_ = AdamState([np.array([0.5, 0.5])], [np.array([0.2, 0.2])], 3)
    adam_step([p], [np.zeros(2)], st_, lr=0.1)
    np.testing.assert_allclose(p.data, [1.0, -2.0] - 0.1 * (0.45 / (1 - 0.9**4)) / (
        np.sqrt(0.2 * 0.999 / (1 - 0.999**4)) + 1e-8))
    np.testing.assert_allclose(st_.m[0], 0.45)
    np.testing.assert_allclose(st_.v[0], 0.2 * 0.999)


def test_adam_zero_gradient_from_fresh_state_is_noop():
    p = Parameter(np.array([1.0, -2.0]))
    adam_step([p], [np.zeros(2)], AdamState.for_params([p]), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3)))
@settings(max_examples=100, deadline=None)
def test_adam_first_step_is_lr_sign(g):
    p = Parameter(np.zeros(5))
    adam_step([p], [g], AdamState.for_params([p]), lr=0.01)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_minimises_square():
    x = Parameter(5.0)
    opt = Adam([x], lr=0.1)
    for _ in range(100):
        with Tape() as tape:
            loss = square(x)
        opt.step(backward(tape, loss, [x]))
    assert abs(x.item()) < 0.5


def test_adam_shape_mismatch():
    p = Parameter(np.zeros(3))
    with pytest.raises(ShapeMismatch):
        adam_step([p], [np.zeros(2)], AdamState.for_params([p]))
