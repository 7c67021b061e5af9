import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import numeric_grad, rel_err
from xmdistill import tensor as T
from xmdistill.tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor, backward

finite = st.floats(-5, 5, allow_nan=False)


def vec(n):
    return arrays(np.float64, n, elements=finite)


def test_matmul_identity_and_hand_values():
    m = np.array([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)))
    with Tape():
        loss = T.tensor_sum(T.matmul(a, b))
    backward(loss)
    num = numeric_grad(lambda: float((a.data @ b.data).sum()), a.data)
    assert rel_err(a.grad, num) < 1e-6


UNARY = {
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "exp": T.exp,
    "relu": T.relu,
    "softmax": lambda x: T.softmax(x, axis=1),
    "log_softmax": lambda x: T.log_softmax(x, axis=0),
    "mean_pool": lambda x: T.mean_pool(T.reshape(x, (3, 2, 2)), (1, 2)),
    "transpose": T.transpose,
    "scale": lambda x: T.scale(x, -2.5),
    "shift": lambda x: T.shift(x, 0.3),
    "mean": lambda x: T.mean(x, axes=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((3, 4))
    x0[np.abs(x0) < 0.05] = 0.3  # keep relu away from its kink
    weights = rng.standard_normal(UNARY[name](Tensor(x0)).shape)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        loss = T.tensor_sum(T.mul(UNARY[name](x), Tensor(weights)))
    backward(loss)
    num = numeric_grad(lambda: float((UNARY[name](Tensor(x.data)).data * weights).sum()), x.data)
    assert rel_err(x.grad, num) < 1e-6


def test_binary_ops_and_log_gradients():
    rng = np.random.default_rng(2)
    a = Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    bias = Tensor(rng.standard_normal(3), requires_grad=True)

    def f(a, b, bias):
        joint = T.concat([T.mul(a, b), T.sub(T.log(a), b), T.bias_add(b, bias)], axis=-1)
        return T.tensor_sum(T.add(joint, joint))

    with Tape():
        loss = f(a, b, bias)
    backward(loss)
    for t in (a, b, bias):
        num = numeric_grad(lambda: f(Tensor(a.data), Tensor(b.data), Tensor(bias.data)).item(), t.data)
        assert rel_err(t.grad, num) < 1e-6


def test_bmm_gradient():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
    w = rng.standard_normal((2, 3, 5))
    with Tape():
        loss = T.tensor_sum(T.mul(T.bmm(a, b), Tensor(w)))
    backward(loss)
    for t in (a, b):
        num = numeric_grad(lambda: float((np.matmul(a.data, b.data) * w).sum()), t.data)
        assert rel_err(t.grad, num) < 1e-6


def test_sigmoid_softmax_pool_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert np.allclose(T.softmax(Tensor([1.0, 1.0, 1.0]), axis=0).data, 1 / 3, atol=0, rtol=1e-15)
    assert np.all(T.mean_pool(Tensor(np.full((2, 3, 4, 5), 7.0)), (0, 1, 2, 3)).data == 7.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_probability_vectors(x):
    p = T.softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)


def test_softmax_is_stable_for_large_logits():
    p = T.softmax(Tensor([1000.0, 1000.0]), axis=0).data
    assert p.tolist() == [0.5, 0.5]


def test_axis_out_of_range():
    with pytest.raises((ValueError, IndexError)):
        T.softmax(Tensor(np.ones((2, 2))), axis=2)


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_cosine_values():
    x = Tensor([1.0, 2.0, 3.0])
    assert T.cosine_similarity(x, x).item() == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    # reference value from a 40-digit evaluation of 32 / sqrt(14 * 77)
    ref = 0.9746318461970762710785724911
    assert abs(T.cosine_similarity(x, Tensor([4.0, 5.0, 6.0])).item() - ref) < 1e-12


def test_cosine_zero_vector_is_finite():
    assert T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 2.0])).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(vec(5), vec(5), st.floats(1e-3, 1e3))
def test_cosine_range_and_scale_invariance(x, y, alpha):
    if np.linalg.norm(x) * np.linalg.norm(y) < 1e-3:
        return
    c = T.cosine_similarity(Tensor(x), Tensor(y)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert abs(T.cosine_similarity(Tensor(alpha * x), Tensor(y)).item() - c) < 1e-10
    assert abs(T.cosine_similarity(Tensor(x), Tensor(alpha * y)).item() - c) < 1e-10


def test_rowwise_and_pairwise_cosine_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 3))

    def f(x, y):
        return T.add(T.tensor_sum(T.mul(T.pairwise_cosine(x, y), Tensor(w))), T.tensor_sum(T.cosine_similarity(x, y)))

    with Tape():
        loss = f(x, y)
    backward(loss)
    for t in (x, y):
        num = numeric_grad(lambda: f(Tensor(x.data), Tensor(y.data)).item(), t.data)
        assert rel_err(t.grad, num) < 1e-6


def test_cross_entropy_value_and_gradient():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 2])
    with Tape():
        loss = T.cross_entropy(logits, labels)
    backward(loss)
    ref = lambda: float(np.mean(np.log(np.exp(logits.data).sum(1)) - logits.data[np.arange(4), labels]))  # noqa: E731
    assert loss.item() == pytest.approx(ref(), abs=1e-14)
    assert rel_err(logits.grad, numeric_grad(ref, logits.data)) < 1e-6
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_detach_blocks_gradient():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    w = Tensor([0.5, 0.5, 0.5], requires_grad=True)
    with Tape():
        d = T.detach(x)
        loss = T.tensor_sum(T.mul(d, w))
    backward(loss)
    assert np.array_equal(d.data, x.data)
    assert x.grad is None
    assert np.array_equal(w.grad, x.data)
    dd = T.detach(T.detach(x))
    assert np.array_equal(dd.data, x.data) and not dd.requires_grad


def test_sum_gives_all_ones():
    x = Tensor(np.random.default_rng(6).standard_normal((2, 3, 4)), requires_grad=True)
    with Tape():
        loss = T.tensor_sum(x)
    backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_determinism():
    rng = np.random.default_rng(7)
    a0, b0 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    grads = []
    for _ in range(2):
        a = Tensor(a0, requires_grad=True)
        with Tape():
            loss = T.tensor_sum(T.softmax(T.matmul(a, Tensor(b0)), axis=1) * Tensor(b0))
        backward(loss)
        grads.append(a.grad.tobytes())
    assert grads[0] == grads[1]


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(y)
    with pytest.raises(TapeError):
        backward(T.tensor_sum(x))  # no tape was active
    with Tape():
        loss = T.tensor_sum(x)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_tape_is_cleared_after_backward():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(T.exp(x))
    assert len(tape) == 2
    backward(loss)
    assert len(tape) == 0


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_extents_must_be_positive():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))
