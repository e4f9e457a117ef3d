import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttrnn import autograd as ag
from ttrnn.cells import init_cell, run_sequence
from ttrnn.training import ge2e_loss


def grads_of(f, params):
    tape = ag.Tape()
    out = f(tape.watch(params))
    return out, tape.backward(out)


class TestRecording:
    def test_tanh_of_matvec_has_two_nodes(self, rng):
        tape = ag.Tape()
        W = tape.param("W", rng.standard_normal((3, 2)))
        y = ag.tanh(ag.contract(W, rng.standard_normal(2), [1], [0]))
        assert [n.op for n in tape.nodes] == ["contract", "tanh"]
        assert isinstance(y, ag.Var)

    def test_untaped_ops_return_arrays(self, rng):
        x = rng.standard_normal((2, 3))
        assert isinstance(ag.tanh(x), np.ndarray)

    def test_taped_matches_untaped_bitwise(self, rng):
        cell = init_cell("lstm", "tt-fused", 4, 8, rank=2, seed=1)
        x = rng.standard_normal((3, 2, 4))
        _, plain = run_sequence(cell, x)
        tape = ag.Tape()
        _, taped = run_sequence(cell.with_tensors(tape.watch(cell.tensors)), x)
        np.testing.assert_array_equal(taped.h.value, plain.h)
        np.testing.assert_array_equal(taped.c.value, plain.c)

    def test_node_count_scales_with_steps(self, rng):
        cell = init_cell("lstm", "dense", 3, 4, seed=0)
        counts = []
        for T in (1, 3):
            tape = ag.Tape()
            run_sequence(cell.with_tensors(tape.watch(cell.tensors)), rng.standard_normal((T, 2, 3)))
            counts.append(len(tape.nodes))
        assert counts[1] == 3 * counts[0]

    def test_unsupported_op_rejected(self, rng):
        tape = ag.Tape()
        w = tape.param("w", rng.standard_normal(3))
        with pytest.raises(TypeError):
            np.exp(w)


class TestBackward:
    def test_sum_tanh(self, rng):
        x = rng.standard_normal(5)
        _, g = grads_of(lambda p: ag.sum_(ag.tanh(p["x"])), {"x": x})
        np.testing.assert_allclose(g["x"], 1 - np.tanh(x) ** 2, rtol=1e-15)

    def test_linear_map_column_sums(self, rng):
        A, x = rng.standard_normal((4, 3)), rng.standard_normal(3)
        _, g = grads_of(lambda p: ag.sum_(ag.contract(A, p["x"], [1], [0])), {"x": x})
        np.testing.assert_allclose(g["x"], A.sum(axis=0), rtol=1e-15)

    def test_sigmoid_rule(self, rng):
        x = rng.standard_normal(4)
        _, g = grads_of(lambda p: ag.sum_(ag.sigmoid(p["x"])), {"x": x})
        s = 1 / (1 + np.exp(-x))
        np.testing.assert_allclose(g["x"], s * (1 - s), rtol=1e-14)

    def test_untouched_param_gets_zero(self, rng):
        _, g = grads_of(lambda p: ag.sum_(p["a"]), {"a": np.ones(2), "b": np.ones((3, 3))})
        np.testing.assert_array_equal(g["b"], np.zeros((3, 3)))

    def test_tape_single_use(self, rng):
        tape = ag.Tape()
        out = ag.sum_(tape.param("a", np.ones(2)))
        tape.backward(out)
        with pytest.raises(ag.TapeError):
            tape.backward(out)

    def test_seed_shape_checked(self):
        tape = ag.Tape()
        out = ag.tanh(tape.param("a", np.ones(2)))
        with pytest.raises(ag.TapeError):
            tape.backward(out, np.ones(3))

    def test_seeded_vector_output(self, rng):
        tape = ag.Tape()
        a = tape.param("a", rng.standard_normal(3))
        seed = rng.standard_normal(3)
        g = tape.backward(ag.tanh(a), seed)
        np.testing.assert_allclose(g["a"], seed * (1 - np.tanh(a.value) ** 2), rtol=1e-15)

    def test_order_independence(self, rng):
        W, x = rng.standard_normal((3, 3)), rng.standard_normal(3)

        def forward(first_tanh):
            def f(p):
                a = lambda: ag.tanh(ag.contract(p["W"], x, [1], [0]))
                b = lambda: ag.sigmoid(ag.contract(p["W"], x, [0], [0]))
                ya, yb = (a(), b()) if first_tanh else (b(), a())[::-1]
                return ag.add(ag.sum_(ya), ag.sum_(yb))
            return f

        _, g1 = grads_of(forward(True), {"W": W})
        _, g2 = grads_of(forward(False), {"W": W})
        np.testing.assert_array_equal(g1["W"], g2["W"])


class TestOps:
    @pytest.mark.parametrize("name,f", [
        ("slice_concat", lambda p: ag.sum_(ag.mul(ag.concat([ag.slice_axis(p["a"], 1, 0, 2), p["a"]], 1), 1.5))),
        ("reshape_transpose", lambda p: ag.sum_(ag.mul(ag.transpose(ag.reshape(p["a"], (3, 2, 2)), (2, 0, 1)),
                                                      np.arange(12.0).reshape(2, 3, 2)))),
        ("broadcast_mul", lambda p: ag.sum_(ag.mul(p["a"], p["b"]))),
        ("sub_neg", lambda p: ag.sum_(ag.tanh(ag.sub(ag.neg(p["a"]), p["b"])))),
        ("mean", lambda p: ag.mean(ag.mul(p["a"], p["a"]), axis=None)),
        ("normalize", lambda p: ag.sum_(ag.mul(ag.l2_normalize(p["a"], 1), np.arange(12.0).reshape(3, 4)))),
        ("logsumexp", lambda p: ag.sum_(ag.logsumexp(p["a"], 1))),
        ("cross_entropy", lambda p: ag.softmax_cross_entropy(p["a"], np.array([0, 3, 1]))),
        ("matmul", lambda p: ag.sum_(ag.tanh(ag.matmul(p["a"], ag.transpose(p["a"], (1, 0)))))),
    ])
    def test_gradcheck(self, rng, name, f):
        params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
        assert ag.gradcheck(f, params) <= 1e-7

    def test_normalize_zero_norm(self):
        with pytest.raises(FloatingPointError):
            ag.l2_normalize(np.zeros((2, 3)), 1)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError):
            ag.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestGradcheck:
    # central differences of ||t||^2 are exact up to cancellation error ~ |f| * 1e-16 / eps,
    # so entries are kept away from zero relative to the norm
    def test_quadratic(self, rng):
        t = rng.uniform(0.5, 2.0, 10) * rng.choice([-1.0, 1.0], 10)
        err = ag.gradcheck(lambda p: ag.sum_(ag.mul(p["t"], p["t"])), {"t": t})
        assert err <= 1e-9

    @settings(max_examples=20, deadline=None)
    @given(arrays(np.float64, st.integers(1, 5), elements=st.floats(0.5, 2.0)))
    def test_quadratic_property(self, theta):
        assert ag.gradcheck(lambda p: ag.sum_(ag.mul(p["t"], p["t"])), {"t": theta}) <= 1e-9

    def test_samples_at_most_200(self, rng):
        calls = []

        def f(p):
            calls.append(1)
            return ag.sum_(ag.mul(p["t"], p["t"]))

        ag.gradcheck(f, {"t": rng.standard_normal(1000)})
        assert len(calls) == 1 + 2 * 200

    def test_fused_lstm_sequence(self, rng):
        cell = init_cell("lstm", "tt-fused", 4, 8, rank=2, seed=3)
        x, w = rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 8))

        def f(p):
            _, s = run_sequence(cell.with_tensors(p), x)
            return ag.sum_(ag.mul(s.h, w))

        assert ag.gradcheck(f, cell.tensors) <= 1e-5

    @pytest.mark.parametrize("op", ["tanh", "sigmoid"])
    def test_fault_injection_detected(self, rng, op):
        cell = init_cell("lstm", "dense", 3, 4, seed=3)
        x, w = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 4))

        def f(p):
            _, s = run_sequence(cell.with_tensors(p), x)
            return ag.sum_(ag.mul(s.h, w))

        with ag.inject_fault(op):
            assert ag.gradcheck(f, cell.tensors) > 1e-2
        assert ag.gradcheck(f, cell.tensors) <= 1e-5

    def test_ge2e_wrt_embeddings(self, rng):
        e = rng.standard_normal((3, 4, 5))
        assert ag.gradcheck(lambda p: ge2e_loss(p["e"], 10.0, -5.0), {"e": e}) <= 1e-5

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            ag.gradcheck(lambda p: ag.sum_(ag.mul(p["t"], np.inf)), {"t": np.ones(2)})


class TestAllocationGuard:
    def test_forbidden_shape(self, rng):
        tape = ag.Tape()
        a = tape.param("a", rng.standard_normal((8, 2)))
        with ag.allocation_guard([(8, 8)]):
            with pytest.raises(ag.AllocationError):
                ag.contract(a, rng.standard_normal((8, 2)), [1], [1])
        assert not ag.guard_active()
