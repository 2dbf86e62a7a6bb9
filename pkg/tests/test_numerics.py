import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from prnface.errors import DegenerateBatch, LabelOutOfRange, NonFiniteValue, ShapeMismatch
from prnface.numerics import checkpoint
from prnface.numerics import functional as F
from prnface.numerics import tensor as T
from prnface.numerics.gradcheck import grad_check, relative_error
from prnface.numerics.layers import Linear, MLP, Parameter
from prnface.numerics.optim import sgd_step
from prnface.numerics.tensor import Tensor


# affine ---------------------------------------------------------------

def test_affine_identity_and_hand_case():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(F.affine_forward(x, np.eye(4), np.zeros(4))[0], x)
    y, _ = F.affine_forward(np.array([[1.0, 2.0]]), np.eye(2), np.array([3.0, 3.0]))
    assert y.tolist() == [[4.0, 5.0]]


def test_affine_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        F.affine_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_affine_backward_matches_differences():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    proj = rng.normal(size=(2, 4))
    _, cache = F.affine_forward(x, w, b)
    dx, dw, db = F.affine_backward(proj, cache)
    assert grad_check(lambda v: (F.affine_forward(v, w, b)[0] * proj).sum(), x, dx) < 1e-6
    assert grad_check(lambda v: (F.affine_forward(x, v, b)[0] * proj).sum(), w, dw) < 1e-6
    assert grad_check(lambda v: (F.affine_forward(x, w, v)[0] * proj).sum(), b, db) < 1e-6


# convolution and pooling ------------------------------------------------

def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 5, 5, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(F.conv2d_forward(x, w)[0], x)


def test_conv_averaging_kernel_valid():
    x = np.arange(9.0).reshape(1, 3, 3, 1)
    w = np.full((3, 3, 1, 1), 1.0 / 9.0)
    y, _ = F.conv2d_forward(x, w, padding="valid")
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == pytest.approx(x.mean(), abs=1e-12)
    y, _ = F.conv2d_forward(x, np.ones((3, 3, 1, 1)), padding="valid")
    assert y.item() == pytest.approx(x.mean() * 9)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient_6x6x2(stride):
    rng = np.random.default_rng(stride)
    x, w = rng.normal(size=(2, 6, 6, 2)), rng.normal(size=(3, 3, 2, 3))
    y, cache = F.conv2d_forward(x, w, stride)
    proj = rng.normal(size=y.shape)
    dx, dw = F.conv2d_backward(proj, cache)
    assert grad_check(lambda v: (F.conv2d_forward(v, w, stride)[0] * proj).sum(), x, dx) < 1e-5
    assert grad_check(lambda v: (F.conv2d_forward(x, v, stride)[0] * proj).sum(), w, dw) < 1e-5


def test_conv_skips_input_gradient_on_request():
    rng = np.random.default_rng(0)
    y, cache = F.conv2d_forward(rng.normal(size=(1, 4, 4, 2)), rng.normal(size=(3, 3, 2, 2)))
    dx, dw = F.conv2d_backward(np.ones_like(y), cache, need_dx=False)
    assert dx is None and dw.shape == (3, 3, 2, 2)


@pytest.mark.parametrize("size, stride, out", [(140, 2, 70), (70, 2, 35), (35, 2, 18), (18, 2, 9), (5, 1, 5)])
def test_same_padding_ceil_plan(size, stride, out):
    assert F.same_padding(size, 3, stride)[0] == out


def test_max_pool_picks_window_max():
    # the odd padding cell goes after the image, so windows start at rows 0 and 2
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    y, _ = F.max_pool_forward(x, 3, 2)
    assert y[..., 0].tolist() == [[[10.0, 11.0], [14.0, 15.0]]]


# batch norm ---------------------------------------------------------------

def _bn(x, gamma=None, beta=None, training=True):
    c = x.shape[-1]
    gamma = np.ones(c) if gamma is None else gamma
    beta = np.zeros(c) if beta is None else beta
    return F.batch_norm_forward(x, gamma, beta, training, np.zeros(c), np.ones(c))


def test_bn_constant_column_gives_beta():
    y, *_ = _bn(np.full((5, 2), 3.0), beta=np.array([0.5, -1.0]))
    assert np.allclose(y, [[0.5, -1.0]] * 5, atol=0)


def test_bn_plus_minus_one():
    y, *_ = _bn(np.array([[-1.0], [1.0]]))
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    assert y[:, 0] == pytest.approx([-expected, expected], abs=1e-15)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        _bn(np.zeros((1, 3)))
    y, *_ = _bn(np.zeros((1, 3)), training=False)  # inference is fine
    assert y.shape == (1, 3)


def test_bn_running_statistics_momentum():
    x = np.array([[0.0], [2.0]])
    _, _, rm, rv = _bn(x)
    assert rm[0] == pytest.approx(0.1 * 1.0)
    assert rv[0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_bn_gradient():
    rng = np.random.default_rng(3)
    x, gamma, beta = rng.normal(size=(6, 4)) * 3, rng.normal(size=4), rng.normal(size=4)
    proj = rng.normal(size=(6, 4))
    y, cache, *_ = _bn(x, gamma, beta)
    dx, dg, db = F.batch_norm_backward(proj, cache)
    assert grad_check(lambda v: (_bn(v, gamma, beta)[0] * proj).sum(), x, dx) < 1e-5
    assert grad_check(lambda v: (_bn(x, v, beta)[0] * proj).sum(), gamma, dg) < 1e-5
    assert grad_check(lambda v: (_bn(x, gamma, v)[0] * proj).sum(), beta, db) < 1e-5


# relu and LSTM ----------------------------------------------------------------

def test_relu_values():
    assert F.relu(np.array(-3.0)) == 0.0 and F.relu(np.array(2.0)) == 2.0


def test_lstm_zero_parameters():
    state = F.lstm_cell_step(np.ones(3), F.LstmState(np.zeros(4), np.zeros(4)), np.zeros((7, 16)), np.zeros(16))
    assert not state.hidden.any() and not state.cell.any()


def test_lstm_state_shapes_must_agree():
    with pytest.raises(ShapeMismatch):
        F.LstmState(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        F.lstm_cell_step(np.ones(3), F.LstmState(np.zeros(4), np.zeros(4)), np.zeros((6, 16)), np.zeros(16))


def test_lstm_cell_closed_form():
    rng = np.random.default_rng(0)
    x, h, c = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    w, b = rng.normal(size=(5, 12)), rng.normal(size=12)
    z = np.concatenate([x, h]) @ w + b
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, o, g = sig(z[:3]), sig(z[3:6]), sig(z[6:9]), np.tanh(z[9:])
    c_new = f * c + i * g
    state = F.lstm_cell_step(x, F.LstmState(h, c), w, b)
    assert np.allclose(state.cell, c_new, atol=1e-14)
    assert np.allclose(state.hidden, o * np.tanh(c_new), atol=1e-14)


def test_lstm_three_step_gradient():
    rng = np.random.default_rng(4)
    xs, w, b = rng.normal(size=(2, 3, 4)), rng.uniform(-0.5, 0.5, size=(9, 20)), rng.normal(size=20) * 0.1
    proj = rng.normal(size=(2, 3, 5))
    hs, caches = F.lstm_sequence_forward(xs, w, b)
    dxs, dw, db = F.lstm_sequence_backward(proj, caches)
    assert grad_check(lambda v: (F.lstm_sequence_forward(v, w, b)[0] * proj).sum(), xs, dxs) < 1e-4
    assert grad_check(lambda v: (F.lstm_sequence_forward(xs, v, b)[0] * proj).sum(), w, dw) < 1e-4
    assert grad_check(lambda v: (F.lstm_sequence_forward(xs, w, v)[0] * proj).sum(), b, db) < 1e-4


# softmax cross-entropy -------------------------------------------------------

def test_softmax_ce_examples():
    loss, _ = F.softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 2])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    loss, _ = F.softmax_cross_entropy(np.array([[1.0, 0.0]]), [0])
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
    loss, _ = F.softmax_cross_entropy(np.array([[800.0, 0.0]]), [0])
    assert loss == 0.0


def test_softmax_ce_gradient_and_errors():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(4, 3)), np.array([0, 2, 1, 1])
    _, grad = F.softmax_cross_entropy(logits, labels)
    onehot = np.eye(3)[labels]
    assert np.allclose(grad, (F.softmax(logits) - onehot) / 4, atol=1e-15)
    assert grad_check(lambda v: F.softmax_cross_entropy(v, labels)[0], logits, grad) < 1e-6
    with pytest.raises(LabelOutOfRange):
        F.softmax_cross_entropy(logits, [0, 3, 1, 1])
    with pytest.raises(LabelOutOfRange):
        F.softmax_cross_entropy(logits, [0, -1, 1, 1])


@given(hnp.arrays(np.float64, (5, 6), elements=st.floats(-50, 50)), st.lists(st.integers(0, 5), min_size=5, max_size=5))
def test_softmax_rows_sum_to_one_and_ce_nonnegative(logits, labels):
    assert np.all(np.abs(F.softmax(logits).sum(axis=1) - 1.0) <= 1e-12)
    assert F.softmax_cross_entropy(logits, labels)[0] >= 0.0


# sgd -------------------------------------------------------------------------

def test_sgd_examples():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)
    q = Parameter(np.array([2.0, 3.0]))
    q.grad = np.zeros(2)
    sgd_step([q], 0.1)
    assert q.data.tolist() == [2.0, 3.0]


def test_sgd_skips_frozen():
    frozen, live = Linear(3, 2, np.random.default_rng(0)), Linear(3, 2, np.random.default_rng(1))
    frozen.freeze()
    before = frozen.checksum(), live.checksum()
    for p in frozen.parameters() + live.parameters():
        p.grad = np.ones_like(p.data)
    sgd_step(frozen.parameters() + live.parameters(), 0.1)
    assert frozen.checksum() == before[0] and live.checksum() != before[1]


@given(st.integers(0, 1000))
def test_sgd_zero_lr_is_identity(seed):
    mlp = MLP(4, (3, 2), np.random.default_rng(seed))
    before = {k: v.copy() for k, v in mlp.state_dict().items()}
    for p in mlp.parameters():
        p.grad = np.random.default_rng(seed).normal(size=p.data.shape)
    sgd_step(mlp.parameters(), 0.0)
    assert all(np.array_equal(before[k], v) for k, v in mlp.state_dict().items())


# grad_check itself ----------------------------------------------------------

def test_grad_check_examples():
    assert grad_check(lambda v: float(v[0] ** 2), np.array([3.0]), np.array([6.0])) < 1e-9
    assert grad_check(lambda v: float(F.relu(v)[0]), np.array([-1.0]), np.array([0.0])) == 0.0
    assert relative_error(0.0, 0.0) == 0.0


def test_grad_check_detects_wrong_gradient_and_nonfinite():
    assert grad_check(lambda v: float(v[0] ** 2), np.array([3.0]), np.array([5.0])) > 0.1
    with pytest.raises(NonFiniteValue), np.errstate(invalid="ignore", divide="ignore"):
        grad_check(lambda v: float(np.log(v[0])), np.array([0.0]), np.array([1.0]))


# tape ------------------------------------------------------------------------

def test_tape_rejects_nonfinite_forward():
    with pytest.raises(NonFiniteValue):
        T.relu(Tensor(np.array([np.inf]), requires_grad=True))


def test_tape_accumulates_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.sum_axis(T.add(x, x), 0)
    y.backward()
    assert x.grad.tolist() == [2.0, 2.0]


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 5))
    a, b = MLP(5, (4, 3), np.random.default_rng(1)), MLP(5, (4, 3), np.random.default_rng(1))
    assert np.array_equal(a(Tensor(x)).data, b(Tensor(x)).data)


# checkpoints ---------------------------------------------------------------

def test_checkpoint_layout():
    blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert blob[:4] == b"PRN1"
    pos = 4
    (n,) = struct.unpack_from("<Q", blob, pos)
    assert blob[pos + 8:pos + 8 + n] == b"w"
    pos += 8 + n
    assert struct.unpack_from("<QQQ", blob, pos) == (2, 1, 2)
    pos += 24
    assert blob[pos] == 4
    assert np.frombuffer(blob[pos + 1:], dtype="<f4").tolist() == [1.0, 2.0]


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       st.one_of(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
                                 hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4))),
                       max_size=4))
def test_checkpoint_round_trip_bit_exact(arrays):
    back = checkpoint.loads(checkpoint.dumps(arrays))
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOPE")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(checkpoint.dumps({"a": np.ones(3)})[:-2])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.dumps({"a": np.ones(3, dtype=np.int32)})
