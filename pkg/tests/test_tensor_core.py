import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err
from ttrnn.tensor_core import (ShapeError, as_tensor, contract, contraction_cost, count_flops,
                               map_elementwise, reshape, sigmoid)


def loop_contract(a, b, axes_a, axes_b):
    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [i for i in range(b.ndim) if i not in axes_b]
    out = np.zeros([a.shape[i] for i in free_a] + [b.shape[i] for i in free_b])
    summed = [range(a.shape[i]) for i in axes_a]
    for ia in itertools.product(*[range(a.shape[i]) for i in free_a]):
        for ib in itertools.product(*[range(b.shape[i]) for i in free_b]):
            total = 0.0
            for s in itertools.product(*summed):
                idx_a, idx_b = [0] * a.ndim, [0] * b.ndim
                for pos, ax in enumerate(free_a):
                    idx_a[ax] = ia[pos]
                for pos, ax in enumerate(free_b):
                    idx_b[ax] = ib[pos]
                for pos, (xa, xb) in enumerate(zip(axes_a, axes_b)):
                    idx_a[xa] = s[pos]
                    idx_b[xb] = s[pos]
                total += a[tuple(idx_a)] * b[tuple(idx_b)]
            out[ia + ib] = total
    return out


class TestReshape:
    def test_row_major_2x3(self):
        flat = np.arange(6.0)
        t = reshape(flat, [2, 3])
        for i in range(2):
            for j in range(3):
                assert t[i, j] == flat[3 * i + j]

    def test_round_trip(self):
        t = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(reshape(reshape(t, [6]), [2, 3]), t)

    def test_cube_index(self):
        assert reshape(np.arange(64.0), [4, 4, 4])[1, 2, 3] == 27.0

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(np.zeros(6), [4, 2])

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4))
    def test_composition(self, dims):
        n = int(np.prod(dims))
        t = np.arange(float(n))
        np.testing.assert_array_equal(reshape(reshape(t, dims), [n]), t)
        np.testing.assert_array_equal(reshape(reshape(t, [n, 1]), dims), t.reshape(dims))


class TestContract:
    def test_matmul(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
        np.testing.assert_allclose(contract(a, b, [1], [0]), a @ b, rtol=1e-14)

    def test_identity(self, rng):
        a = rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(contract(a, np.eye(4), [2], [0]), a)

    def test_two_axis_loop_oracle(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 3))
        out = contract(a, b, [1, 2], [1, 0])
        assert out.shape == (2,)
        assert rel_err(out, loop_contract(a, b, [1, 2], [1, 0])) <= 1e-12

    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            contract(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)), [1], [0])

    def test_axis_out_of_range(self, rng):
        with pytest.raises(ShapeError):
            contract(rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), [2], [0])

    @settings(max_examples=30, deadline=None)
    @given(st.data())
    def test_random_vs_loop(self, data):
        na = data.draw(st.integers(1, 3))
        nb = data.draw(st.integers(1, 6 - na))
        k = data.draw(st.integers(0, min(na, nb)))
        shared = data.draw(st.lists(st.integers(1, 3), min_size=k, max_size=k))
        axes_a = data.draw(st.permutations(range(na)))[:k]
        axes_b = data.draw(st.permutations(range(nb)))[:k]
        sa, sb = [data.draw(st.integers(1, 3)) for _ in range(na)], [data.draw(st.integers(1, 3)) for _ in range(nb)]
        for s, i, j in zip(shared, axes_a, axes_b):
            sa[i] = sb[j] = s
        rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        got = contract(a, b, axes_a, axes_b)
        want = loop_contract(a, b, axes_a, axes_b)
        assert got.shape == want.shape
        assert rel_err(got, want) <= 1e-12 or np.linalg.norm(want) == 0

    def test_bilinear(self, rng):
        a, a2, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        lhs = contract(2.5 * a + a2, b, [1], [0])
        rhs = 2.5 * contract(a, b, [1], [0]) + contract(a2, b, [1], [0])
        assert rel_err(lhs, rhs) <= 1e-12

    def test_flop_counter(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        with count_flops() as c:
            contract(a, b, [2], [0])
        assert c[0] == 2 * 3 * 4 * 5 == contraction_cost(a.shape, b.shape, [2], [0])


class TestElementwise:
    def test_sigmoid_zero(self):
        np.testing.assert_array_equal(map_elementwise(np.zeros((2, 3)), "sigmoid"), 0.5)

    def test_tanh_values(self):
        np.testing.assert_allclose(map_elementwise(np.array([0.0, 1.0]), "tanh"),
                                   [0.0, 0.7615941559557649], rtol=1e-15)

    def test_hadamard(self):
        np.testing.assert_array_equal(map_elementwise(np.array([1.0, 2.0]), "hadamard", np.array([3.0, 4.0])),
                                      [3.0, 8.0])

    def test_hadamard_mismatch(self):
        with pytest.raises(ShapeError):
            map_elementwise(np.ones(2), "hadamard", np.ones(3))

    def test_add_const(self):
        np.testing.assert_array_equal(map_elementwise(np.ones(2), "add-const", 2.0), [3.0, 3.0])

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(np.array([-1000.0, 1000.0]))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_fp32_needs_flag(self):
        with pytest.raises(TypeError):
            as_tensor([1.0], np.float32)
        assert as_tensor([1.0], np.float32, allow_fp32=True).dtype == np.float32
        assert as_tensor([1]).dtype == np.float64
