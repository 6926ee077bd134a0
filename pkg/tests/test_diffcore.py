import math
import zlib

import numpy as np
import pytest

from audiotext.diffcore import (GRU, Adam, BatchNorm, Conv2d, EncoderBlock, GRUCell, Linear,
                                MultiHeadAttention, OptimizerState, Parameter, Tensor, adam_step,
                                debug_mode, gradient_check, no_grad, ops)
from audiotext.diffcore import functional as F
from audiotext.errors import DimensionError, NumericError, StateError


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- forward examples ----------------------------------------------------------------

def test_embedding_lookup_returns_row():
    table = Parameter(np.arange(12.0).reshape(4, 3))
    out = F.embedding(table, [2])
    np.testing.assert_array_equal(out.data, [[6.0, 7.0, 8.0]])


def test_max_pool_of_constants():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1))
    assert F.max_pool2x2(x).data.item() == 4.0


def test_max_pool_tie_routes_gradient_to_first_index():
    x = Tensor(np.array([5.0, 5.0, 1.0, 5.0]).reshape(1, 2, 2, 1), requires_grad=True)
    out = F.max_pool2x2(x)
    assert out.nondiff
    out.sum().backward()
    np.testing.assert_array_equal(x.grad.reshape(-1), [1.0, 0.0, 0.0, 0.0])


def test_gru_cell_zero_weights_matches_hand_evaluation():
    rng = np.random.default_rng(3)
    cell = GRUCell(4, 2, rng)
    cell.w_ih.data[:] = 0.0
    cell.w_hh.data[:] = 0.0
    b_ih = np.array([0.1, -0.2, 0.3, 0.4, -0.5, 0.6])
    b_hh = np.array([0.2, 0.1, -0.1, 0.3, 0.7, -0.4])
    cell.b_ih.data[:] = b_ih
    cell.b_hh.data[:] = b_hh
    h0 = np.array([[0.5, -1.0]])
    out = cell(Tensor(rng.normal(size=(1, 4))), Tensor(h0)).data[0]

    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    expected = []
    for j in range(2):
        r = sig(b_ih[j] + b_hh[j])
        z = sig(b_ih[2 + j] + b_hh[2 + j])
        n = math.tanh(b_ih[4 + j] + r * b_hh[4 + j])
        expected.append((1 - z) * n + z * h0[0, j])
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_shape_mismatch_names_layer_and_axis():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError, match="conv2d.*axis 3"):
        Conv2d(3, 4, rng)(Tensor(np.zeros((1, 5, 5, 2))))
    with pytest.raises(DimensionError, match="linear.*axis -1"):
        Linear(3, 2, rng)(Tensor(np.zeros((2, 4))))
    with pytest.raises(DimensionError, match="matmul"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_debug_mode_flags_nan():
    with debug_mode():
        with pytest.raises(NumericError):
            ops.log(Tensor(np.array([-1.0])))


# -- gradient checking --------------------------------------------------------------

def test_gradcheck_quadratic():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    report = gradient_check(lambda t: (t * t).sum(), [x], eps=1e-5)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    assert report.max_relative_error < 1e-8
    assert report.passed and not report.excluded


def test_gradcheck_flags_max_pool_tie_as_excluded():
    x = Tensor(np.ones((1, 2, 2, 1)))
    report = gradient_check(lambda t: F.max_pool2x2(t).sum(), [x])
    assert report.excluded and report.passed
    assert "non-differentiable" in report.reason


def test_gradcheck_rejects_non_finite():
    x = Tensor(np.array([-1.0]))
    with pytest.raises(NumericError):
        gradient_check(lambda t: ops.log(t).sum(), [x])


SHAPES = [(2, 3), (3, 4), (1, 5)]


def _weights(rng, h):
    w = rng.normal(size=h.shape)
    return lambda t: (t * w).sum()


UNARY = {
    "exp": ops.exp,
    "log": lambda t: ops.log(ops.exp(t) + 1.0),
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "sqrt": lambda t: ops.sqrt(t * t + 1.0),
    "pow": lambda t: ops.power(t, 3),
    "relu": ops.relu,
    "log_softmax": lambda t: ops.log_softmax(t, axis=-1),
    "softmax": lambda t: ops.softmax(t, axis=0),
    "transpose": lambda t: ops.transpose(t),
    "reshape": lambda t: ops.reshape(t, (-1,)),
    "getitem": lambda t: t[:, ::2],
    "fancy_getitem": lambda t: t[np.array([0, 0, -1])],
    "sum_axis": lambda t: t.sum(axis=1, keepdims=True),
    "mean": lambda t: t.mean(axis=0),
    "max": lambda t: t.max(axis=1),
    "masked_fill": lambda t: ops.masked_fill(t, np.eye(*t.shape, dtype=bool), 0.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_ops_gradcheck(name, shape):
    rng = np.random.default_rng(zlib.crc32(f"{name}{shape}".encode()))
    x = _rand(rng, *shape)
    fn = UNARY[name]
    weigh = _weights(rng, fn(x))
    report = gradient_check(lambda t: weigh(fn(t)), [x], tol=1e-4)
    assert report.passed, report


BINARY = {
    "add_broadcast": lambda a, b: a + b[0:1, :],
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: ops.matmul(a, ops.transpose(b)),
    "concat": lambda a, b: ops.concat([a, b], axis=1),
    "stack": lambda a, b: ops.stack([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_binary_ops_gradcheck(name, shape):
    rng = np.random.default_rng(zlib.crc32(f"{name}{shape}".encode()))
    a, b = _rand(rng, *shape), _rand(rng, *shape)
    fn = BINARY[name]
    weigh = _weights(rng, fn(a, b))
    assert gradient_check(lambda x, y: weigh(fn(x, y)), [a, b]).passed


LAYER_SHAPES = [(2, 4, 6, 2), (1, 6, 4, 3), (3, 2, 2, 1)]


@pytest.mark.parametrize("shape", LAYER_SHAPES)
def test_conv2d_gradcheck(shape):
    rng = np.random.default_rng(sum(shape))
    x = _rand(rng, *shape)
    w = _rand(rng, 3, 3, shape[3], 2)
    weigh = _weights(rng, F.conv2d(x, w))
    assert gradient_check(lambda a, b: weigh(F.conv2d(a, b)), [x, w]).passed


@pytest.mark.parametrize("shape", LAYER_SHAPES)
def test_max_pool_gradcheck(shape):
    rng = np.random.default_rng(sum(shape) + 1)
    x = _rand(rng, *shape)
    weigh = _weights(rng, F.max_pool2x2(x))
    report = gradient_check(lambda a: weigh(F.max_pool2x2(a)), [x])
    assert report.passed and not report.excluded


@pytest.mark.parametrize("shape", LAYER_SHAPES)
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradcheck(shape, training):
    rng = np.random.default_rng(sum(shape) + 2)
    C = shape[-1]
    x, gamma, beta = _rand(rng, *shape), _rand(rng, C), _rand(rng, C)
    rm, rv = rng.normal(size=C), rng.uniform(0.5, 2.0, C)
    weigh = _weights(rng, x)
    fn = lambda a, g, b: weigh(F.batch_norm(a, g, b, rm.copy(), rv.copy(), training))
    assert gradient_check(fn, [x, gamma, beta]).passed


@pytest.mark.parametrize("shape", [(2, 5), (3, 2, 4), (1, 1, 6)])
def test_layer_norm_gradcheck(shape):
    rng = np.random.default_rng(sum(shape) + 3)
    D = shape[-1]
    x, gamma, beta = _rand(rng, *shape), _rand(rng, D), _rand(rng, D)
    weigh = _weights(rng, x)
    assert gradient_check(lambda a, g, b: weigh(F.layer_norm(a, g, b)), [x, gamma, beta]).passed


@pytest.mark.parametrize("dims", [(2, 3, 4), (1, 5, 2), (3, 2, 3)])
def test_linear_gradcheck(dims):
    B, din, dout = dims
    rng = np.random.default_rng(sum(dims) + 4)
    x, w, b = _rand(rng, B, din), _rand(rng, din, dout), _rand(rng, dout)
    weigh = _weights(rng, F.linear(x, w, b))
    assert gradient_check(lambda *t: weigh(F.linear(*t)), [x, w, b]).passed


@pytest.mark.parametrize("dims", [(2, 3, 4), (1, 2, 2), (3, 4, 3)])
def test_gru_cell_gradcheck(dims):
    B, din, H = dims
    rng = np.random.default_rng(sum(dims) + 5)
    args = [_rand(rng, B, din), _rand(rng, B, H), _rand(rng, din, 3 * H), _rand(rng, H, 3 * H),
            _rand(rng, 3 * H), _rand(rng, 3 * H)]
    weigh = _weights(rng, args[1])
    assert gradient_check(lambda *t: weigh(F.gru_cell(*t)), args).passed


@pytest.mark.parametrize("dims", [(2, 3, 2), (1, 4, 3), (2, 2, 4)])
def test_bidirectional_gru_gradcheck(dims):
    B, T, din = dims
    rng = np.random.default_rng(sum(dims) + 6)
    gru = GRU(din, 2, num_layers=2, rng=rng)
    x = _rand(rng, B, T, din)
    weigh = _weights(rng, gru(x))
    params = gru.parameters()
    report = gradient_check(lambda xx, *_: weigh(gru(xx)), [x] + params[:2])
    assert report.passed


@pytest.mark.parametrize("dims", [(5, 3, (2,)), (4, 2, (3, 2)), (6, 4, (1,))])
def test_embedding_gradcheck(dims):
    V, D, idx_shape = dims
    rng = np.random.default_rng(V + D)
    table = _rand(rng, V, D)
    idx = rng.integers(0, V, idx_shape)
    weigh = _weights(rng, F.embedding(table, idx))
    assert gradient_check(lambda t: weigh(F.embedding(t, idx)), [table]).passed


@pytest.mark.parametrize("dims", [(2, 3, 4, 2), (1, 4, 4, 1), (2, 2, 6, 3)])
def test_attention_gradcheck(dims):
    B, T, D, heads = dims[0], dims[1], dims[2] * dims[3], dims[3]
    rng = np.random.default_rng(sum(dims) + 7)
    mha = MultiHeadAttention(D, heads, rng)
    x = _rand(rng, B, T, D)
    mask = np.zeros((B, 1, 1, T), dtype=bool)
    mask[0, ..., -1] = True
    weigh = _weights(rng, x)
    p = mha.q.weight
    assert gradient_check(lambda a, w: weigh(mha(a, a, mask)), [x, p]).passed


@pytest.mark.parametrize("dims", [(2, 3, 4), (1, 2, 4), (3, 4, 8)])
def test_encoder_block_feedforward_gradcheck(dims):
    B, T, D = dims
    rng = np.random.default_rng(sum(dims) + 8)
    block = EncoderBlock(D, 2, 2 * D, rng)
    x = _rand(rng, B, T, D)
    weigh = _weights(rng, x)
    fc = block.ff.fc1.weight
    assert gradient_check(lambda a, w: weigh(block(a)), [x, fc]).passed


@pytest.mark.parametrize("shape", [(3, 4), (5, 2), (2, 7)])
def test_cross_entropy_gradcheck(shape):
    rng = np.random.default_rng(sum(shape) + 9)
    logits = _rand(rng, *shape)
    targets = rng.integers(0, shape[1], shape[0])
    targets[0] = 0
    assert gradient_check(lambda t: F.cross_entropy(t, targets, ignore_index=0), [logits]).passed
    assert gradient_check(lambda t: F.cross_entropy(t, targets), [logits]).passed


@pytest.mark.parametrize("shape", [(3, 4), (5, 2), (2, 7)])
def test_bce_gradcheck(shape):
    rng = np.random.default_rng(sum(shape) + 10)
    logits = _rand(rng, *shape)
    y = rng.integers(0, 2, shape).astype(float)
    assert gradient_check(lambda t: F.bce_with_logits(t, y), [logits]).passed


@pytest.mark.parametrize("shape", LAYER_SHAPES)
def test_global_pools_gradcheck(shape):
    rng = np.random.default_rng(sum(shape) + 11)
    x = _rand(rng, *shape)
    weigh = _weights(rng, F.global_mean_pool(x))
    fn = lambda a: weigh(F.global_mean_pool(a) + F.global_max_pool(a))
    assert gradient_check(fn, [x]).passed


def test_bce_closed_form_zero_logits():
    loss = F.bce_with_logits(Tensor(np.zeros((4, 3))), np.zeros((4, 3)))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


# -- invariants ---------------------------------------------------------------------

def test_gradient_linearity():
    rng = np.random.default_rng(1)
    x = _rand(rng, 3, 4)
    w = rng.normal(size=(4, 2))

    def loss_a(t):
        return ops.tanh(ops.matmul(t, Tensor(w))).sum()

    def loss_b(t):
        return (ops.exp(t * 0.3) * t).mean()

    loss_a(x).backward()
    ga = x.grad.copy()
    x.grad = None
    loss_b(x).backward()
    gb = x.grad.copy()
    x.grad = None
    (loss_a(x) + loss_b(x)).backward()
    np.testing.assert_allclose(x.grad, ga + gb, rtol=0, atol=1e-10)


def test_forward_is_pure():
    rng = np.random.default_rng(2)
    block = EncoderBlock(8, 2, 16, rng)
    conv = Conv2d(1, 4, rng)
    bn = BatchNorm(4)
    x = rng.normal(size=(2, 5, 8))
    img = rng.normal(size=(2, 6, 6, 1))
    for _ in range(2):
        outs = [block(Tensor(x)).data.tobytes(), bn(conv(Tensor(img))).data.tobytes()]
        if _ == 0:
            first = outs
    assert outs == first


def test_padding_keys_do_not_change_attention():
    rng = np.random.default_rng(4)
    mha = MultiHeadAttention(6, 2, rng)
    x = rng.normal(size=(1, 3, 6))
    padded = np.concatenate([x, rng.normal(size=(1, 2, 6))], axis=1)
    mask = np.zeros((1, 1, 1, 5), dtype=bool)
    mask[..., 3:] = True
    with no_grad():
        a = mha(Tensor(x), Tensor(x)).data
        b = mha(Tensor(padded), Tensor(padded), mask).data[:, :3]
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- Adam -----------------------------------------------------------------------------

def test_adam_zero_lr_keeps_params_updates_moments():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.25])
    state = OptimizerState()
    adam_step({"p": p}, state, lr=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_allclose(state.m["p"], [0.05, 0.025])
    np.testing.assert_allclose(state.v["p"], [0.001 * 0.25, 0.001 * 0.0625])
    assert state.step == 1


def test_adam_first_step_is_lr_sized():
    p = Parameter(np.array(0.0))
    p.grad = np.array(1.0)
    adam_step({"w": p}, OptimizerState(), lr=1e-3)
    # bias-corrected first step: lr * 1 / (1 + eps)
    assert p.data.item() == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_missing_gradient_names_parameter():
    p = Parameter(np.zeros(2))
    with pytest.raises(StateError, match="decoder.bias"):
        adam_step({"decoder.bias": p}, OptimizerState())


def test_adam_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(11)
        layer = Linear(3, 2, rng)
        opt = Adam(layer.named_parameters(), lr=1e-2)
        x = Tensor(rng.normal(size=(5, 3)))
        trace = []
        for _ in range(5):
            opt.zero_grad()
            (layer(x) ** 2).sum().backward()
            opt.step()
            trace.append(layer.weight.data.tobytes())
        return trace
    assert run() == run()


def test_adam_step_counter_increments_by_one():
    p = Parameter(np.ones(3))
    state = OptimizerState()
    for i in range(3):
        p.grad = np.ones(3)
        adam_step([("p", p)], state)
        assert state.step == i + 1
