import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ffcsn import numcore as nc
from ffcsn.numcore import Parameter
from ffcsn.verify import LAYER_CASES


def rng(seed=0):
    return np.random.default_rng(seed)


# -- forward ---------------------------------------------------------------

def test_forward_identity_graph():
    x = nc.tensor([[1.0, 2.0]])
    assert np.array_equal(nc.forward([], x).data, x.data)


def test_forward_single_relu():
    out = nc.forward([nc.ReLU()], nc.tensor([-1.0, 2.0]))
    assert out.data.tolist() == [0.0, 2.0]


def test_forward_identity_fc():
    fc = nc.Linear(2, 2, rng())
    fc.weight.data[...] = np.eye(2)
    out = nc.forward([fc], nc.tensor([3.0, 4.0]))
    assert out.data.tolist() == [3.0, 4.0]


def test_forward_shape_mismatch_names_layer_and_shapes():
    graph = nc.Sequential([nc.Linear(4, 3, rng()), nc.ReLU(), nc.Linear(5, 2, rng())])
    with pytest.raises(nc.ShapeError) as err:
        graph(nc.tensor(np.zeros((2, 4))))
    msg = str(err.value)
    assert "layer 2" in msg and "fully-connected(5->2)" in msg and "(2, 3)" in msg


def test_forward_records_graph_only_with_grad_params():
    x = nc.tensor(np.ones((1, 3)))
    fc = nc.Linear(3, 2, rng())
    assert fc(x).requires_grad
    with nc.no_grad():
        assert not fc(x).requires_grad


# -- backward --------------------------------------------------------------

def test_backward_square():
    x = nc.tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_relu_negative():
    x = nc.tensor(-1.0, requires_grad=True)
    x.relu().backward()
    assert x.grad == 0.0


def test_backward_linear_sum():
    x = np.array([1.0, -2.0, 0.5])
    W = nc.tensor(np.ones((2, 3)), requires_grad=True)
    (W @ nc.tensor(x)).sum().backward()
    assert np.array_equal(W.grad, np.tile(x, (2, 1)))


def test_backward_accumulates_until_zeroed():
    x = nc.tensor(2.0, requires_grad=True)
    (x * 3.0).backward()
    (x * 3.0).backward()
    assert x.grad == pytest.approx(6.0)
    x.zero_grad()
    assert x.grad is None


def test_backward_non_scalar_raises():
    x = nc.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_without_graph_raises():
    with pytest.raises(RuntimeError):
        nc.tensor(1.0).backward()


def test_shared_subexpression_gradient():
    x = nc.tensor(2.0, requires_grad=True)
    y = x * x
    (y * y + y).backward()  # x^4 + x^2
    assert x.grad == pytest.approx(4 * 8 + 2 * 2)


# -- grad_check --------------------------------------------------------------

def test_grad_check_fc_sigmoid_bce():
    r = rng(1)
    fc = nc.Linear(4, 3, r, init="fan_in")
    fc2 = nc.Linear(3, 1, r, init="fan_in")
    x = nc.tensor(r.standard_normal((6, 4)))
    y = (r.random(6) > 0.5).astype(float)

    def loss():
        p = fc2(fc(x).sigmoid()).sigmoid().reshape(-1)
        return nc.binary_cross_entropy(p, y)

    res = nc.check_gradients(loss, list(fc.named_parameters("a.")) + list(fc2.named_parameters("b.")), 1e-5)
    assert res.max_relative_error <= 1e-4


def test_grad_check_conv_bn_softmax_ce():
    r = rng(2)
    net = nc.Sequential([
        nc.Conv2d(2, 3, r, init="fan_in"),
        nc.BatchNorm(3),
        nc.ReLU(),
        nc.AvgPool(2),
        nc.Flatten(),
        nc.Linear(12, 3, r, init="fan_in"),
    ])
    x = nc.tensor(r.standard_normal((4, 2, 4, 4)))
    y = np.array([0, 1, 2, 1])

    def loss():
        probs = nc.softmax(net(x))
        return -(probs.log() * np.eye(3)[y]).sum() * 0.25

    res = nc.check_gradients(loss, list(net.named_parameters()), 1e-5)
    assert res.max_relative_error <= 1e-4


def test_grad_check_zero_parameter_graph():
    assert nc.grad_check([nc.ReLU()], nc.tensor(np.ones(3)), 1e-5) == 0.0


def test_grad_check_rejects_float32():
    fc = nc.Linear(2, 2, rng(), dtype=np.float32)
    with pytest.raises(nc.GradCheckError):
        nc.grad_check([fc], nc.tensor(np.ones((1, 2)), dtype=np.float32), 1e-5)


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        nc.grad_check([nc.Linear(2, 2, rng())], nc.tensor(np.ones((1, 2))), 1e-2)


def test_grad_check_non_finite_loss_raises():
    fc = nc.Linear(2, 1, rng(), init="fan_in")
    x = nc.tensor(np.ones((1, 2)))

    def loss():
        return (fc(x) * 0.0 + fc.bias.data[0] * 0).log().sum()  # log(0) -> -inf

    with np.errstate(divide="ignore"), pytest.raises(nc.GradCheckError):
        nc.check_gradients(loss, list(fc.named_parameters()), 1e-5)


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_every_layer_kind(kind, seed):
    r = rng(seed)
    layers, shape = LAYER_CASES[kind](r)
    graph = nc.Sequential(layers)
    assert sum(p.size for p in graph.parameters()) <= 64
    x = nc.tensor(r.standard_normal(shape))
    assert nc.grad_check(graph, x, 1e-5, seed=seed) <= 1e-4


# -- sgd ---------------------------------------------------------------------

def _param(value, grad):
    p = Parameter(np.array([value], dtype=np.float64), name="w")
    p.grad = np.array([grad], dtype=np.float64)
    return p


def test_sgd_momentum_first_step():
    p = _param(1.0, 1.0)
    nc.sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.data[0] == pytest.approx(0.9)
    assert p.momentum_buffer[0] == pytest.approx(1.0)


def test_sgd_zero_grad_no_change():
    p = _param(1.0, 0.0)
    nc.sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.data[0] == 1.0


def test_clip_grad_norm_rescales_to_max():
    a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert nc.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.allclose([a.grad[0], b.grad[0]], [0.6, 0.8])
    assert nc.clip_grad_norm([a, b], 2.0) == pytest.approx(1.0)
    assert np.allclose([a.grad[0], b.grad[0]], [0.6, 0.8])
    with pytest.raises(ValueError):
        nc.clip_grad_norm([a], 0.0)


def test_sgd_weight_decay_only():
    p = _param(1.0, 0.0)
    nc.sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    assert p.data[0] == pytest.approx(0.999)


def test_sgd_two_steps_closed_form():
    p = _param(1.0, 0.5)
    lr, mu, wd = 0.1, 0.9, 0.01
    nc.sgd_step([p], lr, mu, wd)
    p.grad = np.array([-0.25])
    nc.sgd_step([p], lr, mu, wd)
    # hand computation
    b1 = 0.5 + wd * 1.0
    w1 = 1.0 - lr * b1
    b2 = mu * b1 + (-0.25 + wd * w1)
    w2 = w1 - lr * b2
    assert p.data[0] == w2
    assert p.momentum_buffer[0] == b2


def test_sgd_missing_grad_names_parameter():
    p = Parameter(np.zeros(2), name="encoder.fc.weight")
    with pytest.raises(ValueError, match="encoder.fc.weight"):
        nc.sgd_step([p], 0.1, 0.9, 0.0)


# -- softmax and losses ------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(nc.softmax(nc.tensor(np.zeros(5))).data, 0.2)


def test_softmax_one_hot_logit():
    e = math.exp(1.0)
    expected = [e / (e + 4)] + [1 / (e + 4)] * 4
    out = nc.softmax(nc.tensor([1.0, 0, 0, 0, 0])).data
    assert np.allclose(out, expected, atol=1e-12)
    assert np.allclose(out, [0.4046, 0.1488, 0.1488, 0.1488, 0.1488], atol=1e-4)


def test_softmax_no_overflow():
    out = nc.softmax(nc.tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_simplex_shift_and_argmax(x, c):
    s = nc.softmax(nc.tensor(x)).data
    assert np.all(s >= 0) and abs(s.sum() - 1) < 1e-6
    assert np.allclose(nc.softmax(nc.tensor(x + c)).data, s, atol=1e-9)
    assert s[np.argmax(x)] == s.max()


@pytest.mark.parametrize("n", [2, 3, 5, 10])
def test_cross_entropy_uniform_logits(n):
    loss = nc.cross_entropy(nc.tensor(np.zeros((4, n))), np.arange(4) % n)
    assert abs(loss.item() - math.log(n)) < 1e-6


def test_batch_norm_training_statistics():
    r = rng(3)
    bn = nc.BatchNorm(3)
    x = nc.tensor(r.standard_normal((8, 3, 4, 4)) * 5 + 2)
    out = bn(x).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-3)


def test_batch_norm_eval_uses_running_stats():
    bn = nc.BatchNorm(2)
    bn.running_mean[...] = [1.0, -1.0]
    bn.running_var[...] = [4.0, 1.0]
    bn.eval()
    out = bn(nc.tensor(np.array([[1.0, -1.0], [3.0, 0.0]]))).data
    assert np.allclose(out, [[0, 0], [2 / math.sqrt(4 + 1e-5), 1 / math.sqrt(1 + 1e-5)]])


def test_layer_spec_builds_every_kind():
    r = rng()
    specs = [
        nc.LayerSpec("conv2d-3x3", {"in": 1, "out": 4}),
        nc.LayerSpec("batch-norm", {"channels": 4}),
        nc.LayerSpec("relu"),
        nc.LayerSpec("average-pool", {"size": 2}),
        nc.LayerSpec("depth-downsample", {"group": 2}),
        nc.LayerSpec("flatten"),
        nc.LayerSpec("fully-connected", {"in": 8, "out": 3}),
        nc.LayerSpec("elu"),
        nc.LayerSpec("sigmoid"),
        nc.LayerSpec("softmax"),
    ]
    graph = nc.Sequential.from_specs(specs, r)
    assert graph.output_shape((2, 1, 4, 4)) == (2, 3)
    assert graph(nc.tensor(r.standard_normal((2, 1, 4, 4)))).shape == (2, 3)


def test_state_dict_round_trip_preserves_identity():
    r = rng()
    fc = nc.Linear(3, 2, r)
    p = fc.weight
    state = {k: v.copy() * 2 for k, v in fc.state_dict().items()}
    fc.load_state_dict(state)
    assert fc.weight is p and np.array_equal(p.data, state["weight"])
    with pytest.raises(KeyError, match="bogus"):
        fc.load_state_dict({**state, "bogus": np.zeros(1)})
    with pytest.raises(nc.ShapeError, match="weight"):
        fc.load_state_dict({**state, "weight": np.zeros((2, 3))})


def test_reshape_pool_flatten_keeps_layout():
    x = np.arange(10 * 2 * 3 * 3, dtype=float).reshape(10, 2, 3, 3)
    out = nc.ReshapePool(5, flatten=True)(nc.tensor(x))
    assert out.shape == (2, 5, 18)
    assert np.array_equal(out.data[1, 2], x[7].reshape(-1))
    assert nc.ReshapePool(5, flatten=True).output_shape((10, 2, 3, 3)) == (2, 5, 18)


def test_check_gradients_entry_budget_limits_perturbations():
    fc = nc.Linear(6, 5, rng(), init="fan_in")
    x = nc.tensor(rng(1).standard_normal((2, 6)))
    calls = []

    def loss():
        calls.append(1)
        return (fc(x) ** 2).sum()

    res = nc.check_gradients(loss, list(fc.named_parameters()), 1e-5, max_entries=3)
    assert res.passed()
    assert len(calls) == 1 + 2 * (3 + 3)  # base point, then 3 weight and 3 bias entries
