import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from melo.errors import ShapeError
from melo.tensor import (
    gelu,
    gelu_backward,
    layernorm,
    layernorm_backward,
    layernorm_with_stats,
    matmul,
    softmax,
    softmax_backward,
)


def triple_loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def gelu_reference(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


class TestMatmul:
    def test_identity(self):
        m = np.array([[1, 2], [3, 4]], np.float32)
        np.testing.assert_array_equal(matmul(np.eye(2, dtype=np.float32), m), m)

    def test_all_ones(self):
        assert matmul(np.ones((1, 2), np.float32), np.ones((2, 1), np.float32)).tolist() == [[2.0]]

    def test_hand_computed(self):
        a = [[1, 2], [3, 4]]
        b = [[5, 6], [7, 8]]
        expected = triple_loop_matmul(a, b)
        assert expected == [[19, 22], [43, 50]]
        got = matmul(np.array(a, np.float32), np.array(b, np.float32))
        np.testing.assert_array_equal(got, expected)

    def test_random_against_loop(self, rng):
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((5, 4))
        np.testing.assert_allclose(matmul(a, b), triple_loop_matmul(a.tolist(), b.tolist()), rtol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_deterministic(self, rng):
        a = rng.standard_normal((17, 33)).astype(np.float32)
        b = rng.standard_normal((33, 9)).astype(np.float32)
        first = matmul(a, b)
        for _ in range(5):
            assert matmul(a, b).tobytes() == first.tobytes()

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = (rng.standard_normal(s).astype(np.float32) for s in ((4, 5), (5, 6), (6, 3)))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-4, atol=1e-4 * np.abs(left).max())

    def test_distributivity_used_by_lora(self, rng):
        for _ in range(20):
            d, r = 16, 4
            W0 = rng.standard_normal((d, d)).astype(np.float32)
            B = rng.standard_normal((d, r)).astype(np.float32)
            A = rng.standard_normal((r, d)).astype(np.float32)
            x = rng.standard_normal((d, 1)).astype(np.float32)
            dense = matmul(W0 + matmul(B, A), x)
            factored = matmul(W0, x) + matmul(B, matmul(A, x))
            scale = np.abs(dense).max()
            np.testing.assert_allclose(factored, dense, rtol=1e-5, atol=1e-5 * scale)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, rtol=1e-15)

    def test_no_overflow(self):
        out = softmax(np.array([1000.0, 0.0], np.float32))
        assert np.all(np.isfinite(out))
        assert out[0] == 1.0 and out[1] == 0.0

    def test_ln2(self):
        out = softmax(np.array([math.log(2), 0.0]))
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], rtol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            softmax(np.zeros((2, 2)), axis=2)

    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
    def test_probability_rows(self, x):
        p = softmax(x, axis=-1)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_backward_finite_difference(self, rng):
        x = rng.standard_normal(5)
        w = rng.standard_normal(5)
        y = softmax(x)
        analytic = softmax_backward(y, w)
        h = 1e-6
        numeric = [(softmax(x + h * e) @ w - softmax(x - h * e) @ w) / (2 * h) for e in np.eye(5)]
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


class TestLayerNorm:
    def test_constant_input_is_zero(self):
        x = np.full((2, 4), 3.0, np.float32)
        out = layernorm(x, np.ones(4, np.float32), np.zeros(4, np.float32))
        np.testing.assert_array_equal(out, 0.0)

    def test_already_normalized(self):
        out = layernorm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=0.0)
        np.testing.assert_allclose(out, [1.0, -1.0])

    def test_shift(self):
        # mean 1, population std 1 -> [-1, 1] then +5
        out = layernorm(np.array([0.0, 2.0]), np.ones(2), np.full(2, 5.0), eps=0.0)
        np.testing.assert_allclose(out, [4.0, 6.0])

    def test_moments(self, rng):
        x = rng.standard_normal((10, 32)) * 7 + 3
        out = layernorm(x, np.ones(32), np.zeros(32), eps=1e-12)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_param_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layernorm(np.zeros((2, 4)), np.ones(3), np.zeros(3))

    def test_backward_finite_difference(self, rng):
        x = rng.standard_normal((3, 6))
        g = rng.standard_normal(6)
        b = rng.standard_normal(6)
        w = rng.standard_normal((3, 6))

        def f(x_, g_, b_):
            return np.sum(layernorm_with_stats(x_, g_, b_, 1e-6)[0] * w)

        _, xhat, rstd = layernorm_with_stats(x, g, b, 1e-6)
        dx, dg, db = layernorm_backward(w, xhat, rstd, g)
        h = 1e-6
        for analytic, arr in ((dx, x), (dg, g), (db, b)):
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                plus = f(x, g, b)
                arr[idx] = orig - h
                minus = f(x, g, b)
                arr[idx] = orig
                numeric[idx] = (plus - minus) / (2 * h)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


class TestGelu:
    def test_zero(self):
        assert gelu(np.array([0.0]))[0] == 0.0

    def test_asymptotes(self):
        out = gelu(np.array([20.0, -20.0]))
        assert out[0] == pytest.approx(20.0)
        assert abs(out[1]) < 1e-12

    def test_one(self):
        ref = gelu_reference(1.0)
        assert ref == pytest.approx(0.8412, abs=5e-5)
        assert gelu(np.array([1.0]))[0] == pytest.approx(ref, rel=1e-14)
        assert gelu(np.array([1.0], np.float32))[0] == pytest.approx(ref, rel=1e-6)

    @settings(max_examples=50)
    @given(st.floats(-8, 8))
    def test_matches_scalar_formula(self, x):
        assert gelu(np.array([x]))[0] == pytest.approx(gelu_reference(x), rel=1e-12, abs=1e-15)

    def test_backward_finite_difference(self, rng):
        x = rng.standard_normal(20) * 3
        analytic = gelu_backward(x, np.ones_like(x))
        h = 1e-6
        numeric = (gelu(x + h) - gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)

    def test_preserves_dtype(self):
        assert gelu(np.ones(3, np.float32)).dtype == np.float32
