import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rtsfuse import tensor as T

pytestmark = pytest.mark.usefixtures("f64")

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def weighted(t, rng):
    w = T.Tensor(rng.normal(size=t.shape))
    return T.tensor_sum(T.mul(t, w))


# -- elementwise ---------------------------------------------------------------


def test_add_identity_and_arithmetic(rng):
    a = T.Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(T.add(a, T.zeros(a.shape)).data, a.data)
    np.testing.assert_array_equal(T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_sum_of_add_gradient_is_ones(rng):
    a, b = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    T.backward(T.tensor_sum(T.add(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones(5))
    assert T.grad_check(lambda: T.tensor_sum(T.add(a, b)), [a, b]) < 1e-6


@given(hnp.arrays(np.float64, (3, 2), elements=finite), hnp.arrays(np.float64, (3, 2), elements=finite),
       hnp.arrays(np.float64, (3, 2), elements=finite))
def test_elementwise_add_commutative_associative(x, y, z):
    a, b, c = T.Tensor(x), T.Tensor(y), T.Tensor(z)
    np.testing.assert_array_equal(T.elementwise_add(a, b).data, T.elementwise_add(b, a).data)
    left = T.elementwise_add(T.elementwise_add(a, b), c).data
    right = T.elementwise_add(a, T.elementwise_add(b, c)).data
    scale = np.abs(x) + np.abs(y) + np.abs(z)
    assert np.all(np.abs(left - right) <= np.spacing(np.maximum(scale, 1e-300)) * 2)


def test_linear_and_quadratic_gradients(rng):
    w = leaf(rng.normal(size=(4,)))
    T.backward(T.tensor_sum(w))
    np.testing.assert_array_equal(w.grad, np.ones(4))
    w.grad = None
    T.backward(T.tensor_sum(T.mul(w, w)))
    np.testing.assert_allclose(w.grad, 2 * w.data, rtol=0, atol=0)


def test_shape_error_on_mismatch():
    with pytest.raises(T.ShapeError):
        T.elementwise_add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


# -- matmul --------------------------------------------------------------------


def test_matmul_examples(rng):
    a = T.Tensor(rng.normal(size=(3, 3)))
    np.testing.assert_array_equal(T.matmul(a, T.Tensor(np.eye(3))).data, a.data)
    out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient(rng):
    a, b = leaf(rng.normal(size=(5, 4))), leaf(rng.normal(size=(4, 3)))
    assert T.grad_check(lambda: weighted(T.matmul(a, b), np.random.default_rng(0)), [a, b]) < 1e-4


# -- conv / pool ---------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = T.Tensor(rng.normal(size=(3, 5, 5)))
    k = T.Tensor(np.eye(3).reshape(3, 3, 1, 1))
    np.testing.assert_array_equal(T.conv2d(x, k).data, x.data)


def test_conv_all_ones():
    out = T.conv2d(T.Tensor(np.ones((1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1) and out.data.item() == 9.0


def test_conv_is_cross_correlation():
    x = np.zeros((1, 3, 3))
    x[0, 0, 0] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), padding=1).data[0]
    # the impulse at (0, 0) picks kernel entry (1 - dy, 1 - dx) at output (dy, dx)
    assert out[0, 0] == k[0, 0, 1, 1] and out[1, 1] == k[0, 0, 0, 0]


def test_conv_gradient(rng):
    x = leaf(rng.normal(size=(3, 8, 8)))
    k = leaf(rng.normal(size=(4, 3, 3, 3)))
    b = leaf(rng.normal(size=4))
    assert T.grad_check(lambda: weighted(T.conv2d(x, k, b, padding=1), np.random.default_rng(1)), [x, k, b]) < 1e-4


def test_pool_examples(rng):
    x = T.Tensor(rng.normal(size=(2, 4, 4)))
    np.testing.assert_array_equal(T.pool2d(x, "avg", 1, 1).data, x.data)
    m = T.pool2d(T.Tensor([[[1.0, 2.0], [3.0, 4.0]]]), "max", 2)
    assert m.data.item() == 4.0


def test_avg_pool_gradient_spreads_evenly(rng):
    x = leaf(rng.normal(size=(1, 4, 4)))
    T.backward(T.tensor_sum(T.pool2d(x, "avg", 2)))
    np.testing.assert_allclose(x.grad, np.full((1, 4, 4), 0.25))
    assert T.grad_check(lambda: weighted(T.pool2d(x, "avg", 2), np.random.default_rng(2)), [x]) < 1e-4


def test_max_pool_tie_goes_to_first_index():
    x = leaf(np.ones((1, 2, 2)))
    T.backward(T.tensor_sum(T.pool2d(x, "max", 2)))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


# -- softmax / norm / activations ----------------------------------------------


def test_softmax_uniform_and_shift():
    np.testing.assert_array_equal(T.softmax(T.Tensor(np.zeros(4))).data, np.full(4, 0.25))


@given(hnp.arrays(np.float64, (3, 5), elements=st.integers(-50, 50).map(lambda v: v / 8)), st.integers(-1000, 1000))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    # dyadic inputs and integer shifts keep x + c exact, so max subtraction reproduces the same logits
    p = T.softmax(T.Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(T.softmax(T.Tensor(x + c)).data, p)


def test_softmax_jacobian(rng):
    x = leaf(rng.normal(size=6))
    assert T.grad_check(lambda: weighted(T.softmax(x), np.random.default_rng(3)), [x]) < 1e-4


def test_layer_norm_examples(rng):
    g, b = T.Tensor(np.ones(5)), T.Tensor(np.zeros(5))
    np.testing.assert_array_equal(T.layer_norm(T.Tensor(np.full((2, 5), 3.0)), g, b).data, np.zeros((2, 5)))
    x = rng.normal(size=(4096, 64)) * 3 + 1
    y = T.layer_norm(T.Tensor(x), T.Tensor(np.full(64, 2.5)), T.Tensor(np.full(64, -0.75))).data
    np.testing.assert_allclose(y.mean(-1), -0.75, atol=1e-4)
    np.testing.assert_allclose(y.std(-1), 2.5, atol=1e-4)


def test_layer_norm_gradient(rng):
    x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    assert T.grad_check(lambda: weighted(T.layer_norm(x, g, b), np.random.default_rng(4)), [x, g, b]) < 1e-4


def test_activations(rng):
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert T.sigmoid(T.Tensor([0.0])).data.item() == 0.5
    x = leaf(rng.normal(size=7))
    assert T.grad_check(lambda: weighted(T.gelu(x), np.random.default_rng(5)), [x]) < 1e-4


def test_sigmoid_is_stable_at_extremes():
    out = T.sigmoid(T.Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


# -- grad_check itself ---------------------------------------------------------


def test_grad_check_exact_cases(rng):
    x = T.Tensor(rng.normal(size=(4, 3)))
    assert T.grad_check(T.tensor_sum, x) < 1e-10
    y = T.Tensor(rng.normal(size=6))
    T.backward(T.tensor_sum(T.softmax(leaf(y.data))))
    assert T.grad_check(lambda t: T.tensor_sum(T.softmax(t)), y) < 1e-6


def test_grad_check_catches_a_wrong_backward(rng):
    x = leaf(rng.normal(size=5))

    def wrong_square(t):
        # forward t², backward claims 2.1·t
        return T._make(t.data * t.data, (t,), lambda g: (2.1 * g * t.data,), "wrong_square")

    good = T.grad_check(lambda t: weighted(T.mul(t, t), np.random.default_rng(6)), x)
    bad = T.grad_check(lambda t: weighted(wrong_square(t), np.random.default_rng(6)), x)
    assert good < 1e-4 and bad > 1e-2


def test_grad_check_rejects_non_scalar(rng):
    with pytest.raises(T.GradientError):
        T.grad_check(lambda t: t, T.Tensor(rng.normal(size=3)))


def test_backward_rejects_detached():
    with pytest.raises(T.GradientError):
        T.backward(T.tensor_sum(T.Tensor(np.ones(3))))


# -- allocation meter ----------------------------------------------------------


def test_meter_single_allocation():
    def run():
        return T.Tensor(np.zeros((10, 10)))

    with T.AllocationMeter() as m:
        run()
    assert m.peak == 800


def test_meter_peak_reproducible(rng):
    x = rng.normal(size=(8, 8))

    def run():
        a = leaf(x)
        T.backward(T.tensor_sum(T.mul(T.softmax(a), a)))

    peaks = []
    for _ in range(3):
        with T.AllocationMeter() as m:
            run()
        peaks.append(m.peak)
    assert len(set(peaks)) == 1 and peaks[0] > 0
