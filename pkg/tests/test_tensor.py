import numpy as np
import pytest

from mimscnn import rtf
from mimscnn.optim import Adam, SGD, adam_step, sgd_step
from mimscnn.tensor import (
    Parameter, ShapeError, Tensor, backward, concat, exp, grad_check, log, matmul, no_grad,
    precision, reduce_max, reduce_mean, reduce_sum, relu, reshape, sigmoid, transpose,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_reduce_sum_ones():
    assert reduce_sum(Tensor(np.ones((2, 3)))).item() == 6.0


def test_relu_definition():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    got = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a, b), rtol=1e-5, atol=1e-6)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add: shape mismatch \(2, 3\) vs \(3, 2\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    backward(x * x)
    assert x.grad[0] == pytest.approx(6.0)


def test_sigmoid_sum_matches_central_differences():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, 16)
    x = Tensor(x0, requires_grad=True)
    backward(reduce_sum(sigmoid(x)))
    h = 1e-3
    f = lambda v: reduce_sum(sigmoid(Tensor(v))).item()
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        num = (f(xp) - f(xm)) / (2 * h)
        assert abs(x.grad[i] - num) / (abs(x.grad[i]) + abs(num)) < 1e-2


def test_unreachable_constant_has_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0, 5.0], requires_grad=True)
    backward(reduce_sum(x * x))
    assert c.grad is None


def test_fan_out_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    backward(reduce_sum(x + x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_second_backward_doubles_leaf_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = reduce_sum(x * x)
    backward(y)
    first = x.grad.copy()
    backward(y)
    np.testing.assert_allclose(x.grad, 2 * first)


def test_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * x)


def test_every_reachable_node_gets_matching_grad_shape():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    h = relu(transpose(x, (1, 0)))
    y = reduce_sum(reshape(h, (6,)))
    backward(y)
    for node in (x, h):
        assert node.grad.shape == node.shape


def test_max_routes_to_first_maximum():
    x = Tensor([1.0, 3.0, 3.0, 2.0], requires_grad=True)
    backward(reduce_max(x))
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_grad_check_linear_exact():
    # dyadic step and points keep x +- h exact in float32
    assert grad_check(lambda x: reduce_sum(x * 3.0), [np.linspace(-1, 1, 5)], step=2.0 ** -10) < 1e-6


def test_grad_check_zero_gradient_is_zero():
    assert grad_check(lambda x: reduce_sum(x * 0.0), [np.ones(4)]) == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: reduce_sum(x), [np.ones(2)], step=0)


@pytest.mark.parametrize("name,f", [
    ("add", lambda a, b: reduce_sum((a + b) * a)),
    ("sub", lambda a, b: reduce_sum((a - b) * b)),
    ("mul", lambda a, b: reduce_sum(a * b * a)),
    ("div", lambda a, b: reduce_sum(a / (b * b + 1.0))),
    ("matmul", lambda a, b: reduce_sum(sigmoid(matmul(a, transpose(b, (1, 0)))))),
    ("concat", lambda a, b: reduce_sum(sigmoid(concat([a, b], axis=1)) * concat([b, a], axis=1))),
    ("mean", lambda a, b: reduce_sum(reduce_mean(a * b, axis=0) * reduce_mean(b, axis=1)[:1])),
    ("exp_log", lambda a, b: reduce_sum(log(exp(a) + 2.0) * b)),
    ("max", lambda a, b: reduce_sum(reduce_max(a * b, axis=1)) + reduce_max(a)),
])
def test_elementwise_grad_check_64bit(name, f):
    rng = np.random.default_rng(7)
    with precision(np.float64):
        for _ in range(3):
            a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))
            assert grad_check(f, [a, b], step=1e-6) < 1e-5, name


def test_scalar_broadcast():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    s = Tensor([2.0], requires_grad=True)
    backward(reduce_sum(x * s))
    assert s.grad[0] == 4.0
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_sgd_definition():
    p = Parameter([1.0])
    p.grad = np.array([0.5], dtype=np.float32)
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.95)
    assert p.grad is None


def test_adam_first_step_moves_by_lr_against_gradient():
    p = Parameter([1.0, -2.0])
    p.grad = np.array([0.3, -7.0], dtype=np.float32)
    adam_step([p], lr=0.01)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], atol=1e-6)


def test_zero_lr_leaves_parameters():
    p = Parameter([1.0, 2.0])
    for opt in (SGD([p], 0.0), Adam([p], 0.0)):
        p.grad = np.ones(2, dtype=np.float32)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_missing_grad_is_an_error():
    with pytest.raises(RuntimeError, match="no gradient"):
        sgd_step([Parameter([1.0], name="w")], 0.1)


def test_rtf_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    rtf.save(tmp_path / "a.rtf", arr)
    raw = (tmp_path / "a.rtf").read_bytes()
    assert raw[:4] == b"RTF1" and raw[4] == 3
    assert int.from_bytes(raw[5:9], "little") == 2
    np.testing.assert_array_equal(rtf.load(tmp_path / "a.rtf"), arr)


def test_rtf_truncated(tmp_path):
    (tmp_path / "t.rtf").write_bytes(rtf.encode(np.ones((2, 2)))[:-3])
    with pytest.raises(rtf.RTFError, match=r"t\.rtf.*expected 16 bytes"):
        rtf.load(tmp_path / "t.rtf")
