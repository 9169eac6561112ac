import numpy as np
import pytest

from stepreuse import tensor as T
from stepreuse.nn import Parameter
from stepreuse.tensor import Tape, Tensor, backward

from util import check_grad

RNG = np.random.default_rng(1234)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_constant_image_all_ones_kernel():
    c = 0.7
    x = Tensor(np.full((1, 1, 5, 5), c))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, stride=1, padding=0)
    assert out.shape == (1, 1, 3, 3)
    assert np.allclose(out.data, 9 * c)


def test_softmax_symmetry():
    out = T.softmax(Tensor([0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [0.5, 0.5])


def test_backward_sum_of_squares():
    x = Parameter(np.array([1.0, 2.0, 3.0]), "x")
    with Tape():
        loss = T.tensor_sum(x * x)
        backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_detached_param_gets_zero_grad():
    x = Parameter(np.array([1.0, 2.0]), "x")
    p = Parameter(np.array([5.0]), "p")
    with Tape():
        loss = T.tensor_sum(x * x)
        backward(loss)
    assert np.array_equal(p.grad, [0.0])


def test_backward_requires_scalar():
    x = Parameter(np.ones(3), "x")
    with Tape():
        y = x * 2.0
        with pytest.raises(T.ShapeError):
            backward(y)


def test_backward_twice_raises():
    x = Parameter(np.ones(3), "x")
    with Tape():
        loss = T.tensor_sum(x)
        backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            backward(loss)


def test_backward_without_tape_raises():
    x = Parameter(np.ones(3), "x")
    loss = Tensor(1.0)
    with pytest.raises(RuntimeError, match="tape"):
        backward(loss)


def test_matmul_grad_matches_finite_differences():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4, 2))
    pa = Parameter(a.copy(), "a")
    with Tape():
        loss = T.tensor_sum(T.matmul(pa, Tensor(b)))
        backward(loss)
    from util import finite_diff_grad
    numeric = finite_diff_grad(lambda av: float((av @ b).sum()), a.copy())
    rel = np.abs(pa.grad - numeric).max() / max(np.abs(numeric).max(), 1e-8)
    assert rel < 1e-6


# -- exhaustive per-primitive gradient checks (20 seeds each) ---------------

def _away_from_kinks(x, margin=0.05):
    return x + np.sign(x) * margin + (x == 0) * margin


ELEMENTWISE_CASES = [
    ("add", lambda x: x + Tensor(np.linspace(-1, 1, x.size).reshape(x.shape))),
    ("sub", lambda x: Tensor(np.ones(x.shape)) - x),
    ("mul", lambda x: x * Tensor(np.linspace(0.5, 2, x.size).reshape(x.shape))),
    ("div", lambda x: x / Tensor(np.linspace(1.0, 3.0, x.size).reshape(x.shape))),
    ("div_denominator", lambda x: Tensor(np.ones(x.shape)) / (x * x + 1.0)),
    ("neg", T.neg),
    ("power", lambda x: T.power(x * x + 0.5, 1.7)),
    ("abs", lambda x: T.absolute(x)),
    ("exp", T.exp),
    ("log", lambda x: T.log(x * x + 0.5)),
    ("sqrt", lambda x: T.sqrt(x * x + 0.5)),
    ("relu", T.relu),
    ("silu", T.silu),
    ("sigmoid", T.sigmoid),
    ("tanh", T.tanh),
    ("softmax", lambda x: T.softmax(x, axis=-1)),
    ("log_softmax", lambda x: T.log_softmax(x, axis=-1)),
    ("sum", lambda x: T.tensor_sum(x, axis=1, keepdims=True)),
    ("sum_all", lambda x: T.tensor_sum(x)),
    ("mean", lambda x: T.mean(x, axis=0)),
    ("mean_all", lambda x: T.mean(x)),
    ("reshape", lambda x: T.reshape(x, (x.size,))),
    ("transpose", lambda x: T.transpose(x)),
    ("slice", lambda x: x[1:, :2]),
    ("concat", lambda x: T.concat([x, x * 2.0], axis=0)),
]


@pytest.mark.parametrize("name,op", ELEMENTWISE_CASES, ids=[c[0] for c in ELEMENTWISE_CASES])
def test_gradcheck_elementwise(name, op):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4))
        if name in ("abs", "relu", "silu"):
            x = _away_from_kinks(x)
        check_grad(op, x, rng)


def test_gradcheck_matmul_both_sides():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        b = rng.standard_normal((4, 3))
        check_grad(lambda x: T.matmul(x, Tensor(b)), rng.standard_normal((2, 4)), rng)
        a = rng.standard_normal((2, 4))
        check_grad(lambda x: T.matmul(Tensor(a), x), rng.standard_normal((4, 3)), rng)


@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", [0, 1])
def test_gradcheck_conv2d(kernel, stride, padding):
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        w = rng.standard_normal((2, 3, kernel, kernel))
        x = rng.standard_normal((2, 3, 5, 6))
        check_grad(lambda v: T.conv2d(v, Tensor(w), stride=stride, padding=padding), x, rng)
        check_grad(lambda v: T.conv2d(Tensor(x), v, stride=stride, padding=padding), w, rng)


def test_gradcheck_conv2d_bias():
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        check_grad(lambda v: T.conv2d(Tensor(x), Tensor(w), bias=v, padding=1),
                   rng.standard_normal(3), rng)


def test_gradcheck_upsample():
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        x = rng.standard_normal((1, 2, 3, 3))
        check_grad(lambda v: T.upsample_nearest(v, 2), x, rng)


# -- shape algebra -----------------------------------------------------------

@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", [0, 1])
@pytest.mark.parametrize("size", [4, 5, 7, 8])
def test_conv_output_shape_formula(kernel, stride, padding, size):
    x = Tensor(np.zeros((1, 1, size, size)))
    w = Tensor(np.zeros((1, 1, kernel, kernel)))
    expected = (size + 2 * padding - kernel) // stride + 1
    out = T.conv2d(x, w, stride=stride, padding=padding)
    assert out.shape == (1, 1, expected, expected)


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_upsample_output_shape(factor):
    out = T.upsample_nearest(Tensor(np.zeros((2, 3, 4, 5))), factor)
    assert out.shape == (2, 3, 4 * factor, 5 * factor)


def test_upsample_values_replicate():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = T.upsample_nearest(x, 2)
    assert np.array_equal(out.data[0, 0], np.repeat(np.repeat(x.data[0, 0], 2, 0), 2, 1))


# -- determinism --------------------------------------------------------------

def test_ops_bit_identical_across_runs():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 6, 8, 8))
    w = rng.standard_normal((3, 6, 3, 3))

    def run():
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        out = T.softmax(T.reshape(out, (out.shape[0], -1)), axis=1)
        return out.data.tobytes()

    assert run() == run()


def test_all_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 3))
    for _, op in ELEMENTWISE_CASES:
        out = op(Tensor(x.copy()))
        assert np.isfinite(out.data).all()
