import numpy as np
import pytest

from cafnet import tensor as T


def test_constructors_are_float64():
    assert T.zeros((2, 3)).dtype == np.float64
    assert T.as_tensor([1, 2]).dtype == np.float64
    np.testing.assert_array_equal(T.fill((2,), 3.5), [3.5, 3.5])


def test_reshape_size_mismatch_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\)"):
        T.reshape(T.zeros((2, 3)), (4, 2))
    assert T.reshape(T.zeros((2, 3)), (3, 2)).shape == (3, 2)


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_elementwise_rejects_broadcasting(op):
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(3,\)"):
        op(T.zeros((2, 3)), T.zeros((3,)))


def test_elementwise_values():
    a, b = T.as_tensor([1.0, 2.0]), T.as_tensor([3.0, 5.0])
    np.testing.assert_array_equal(T.add(a, b), [4, 7])
    np.testing.assert_array_equal(T.sub(a, b), [-2, -3])
    np.testing.assert_array_equal(T.mul(a, b), [3, 10])


def test_matmul_checks_inner_dimension():
    with pytest.raises(T.ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))
    np.testing.assert_array_equal(T.matmul(np.eye(2), T.as_tensor([[1.0, 2], [3, 4]])), [[1, 2], [3, 4]])


def test_mean_over_axes_drops_axes():
    x = np.arange(24.0).reshape(2, 3, 4)
    out = T.mean_over_axes(x, (0, 2))
    assert out.shape == (3,)
    np.testing.assert_allclose(out, x.mean(axis=(0, 2)))


def test_check_finite():
    with pytest.raises(T.NonFiniteError):
        T.check_finite(T.as_tensor([1.0, np.nan]))
    T.check_finite(T.zeros((2,)))


def test_matmul_identity_and_triple_loop():
    np.testing.assert_array_equal(T.matmul(T.as_tensor([[1, 2], [3, 4]]), np.eye(2)), [[1, 2], [3, 4]])
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(a, b), ref, rtol=0, atol=1e-12)


def test_mean_of_constant():
    np.testing.assert_array_equal(T.mean_over_axes(T.fill((2, 3, 4), 5.0), (1,)), np.full((2, 4), 5.0))
