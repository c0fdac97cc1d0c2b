import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from erba import diffcore as dc
from erba.diffcore import DimensionError, EmptyPoolError, ModelParams, Tape, Tensor


def finite(shape):
    return arrays(np.float64, shape, elements=st.floats(-50, 50, allow_nan=False))


class TestTensor:
    def test_vectors_become_rows(self):
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)
        assert Tensor(2.5).shape == (1, 1)

    def test_rejects_non_finite(self):
        with pytest.raises(FloatingPointError):
            Tensor([[1.0, np.nan]])
        with pytest.raises(FloatingPointError):
            Tensor([[np.inf]])

    def test_grad_matches_shape(self):
        t = Tensor(np.ones((3, 2)), requires_grad=True)
        assert t.grad.shape == t.shape
        assert not t.grad.any()


class TestLinearMap:
    def test_identity(self):
        w = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(dc.linear_map(Tensor(np.eye(2)), w).data, w.data)

    def test_basis_selection(self):
        out = dc.linear_map(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_ones(self):
        ones = Tensor(np.ones((2, 2)))
        np.testing.assert_array_equal(dc.linear_map(ones, ones).data, [[2.0, 2.0], [2.0, 2.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            dc.linear_map(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(dc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
        np.testing.assert_allclose(dc.softmax_rows(Tensor([[7.0, 7.0, 7.0]])).data, [[1 / 3] * 3])
        out = dc.softmax_rows(Tensor([[np.log(1.0), np.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_large_logits_stay_finite(self):
        out = dc.softmax_rows(Tensor([[1e4, 0.0, -1e4]])).data
        np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]])

    @given(finite((3, 5)), st.floats(-100, 100))
    def test_rows_are_distributions_and_shift_invariant(self, x, c):
        p = dc.softmax_rows(Tensor(x)).data
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(dc.softmax_rows(Tensor(x + c)).data, p, atol=1e-12)


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        out = dc.layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_standardized_row(self):
        out = dc.layer_norm(Tensor([[-1.0, 1.0]]), eps=1e-14)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_affine(self):
        out = dc.layer_norm(Tensor([[0.0, 2.0]]), Tensor([[2.0, 2.0]]), Tensor([[1.0, 1.0]]), eps=1e-14)
        np.testing.assert_allclose(out.data, [[-1.0, 3.0]], atol=1e-12)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            dc.layer_norm(Tensor([[1.0, 2.0]]), eps=0.0)

    @given(finite((4, 6)))
    def test_row_moments(self, x):
        out = dc.layer_norm(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        var = x.var(axis=1)
        np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), atol=1e-9)


class TestGelu:
    def test_examples(self):
        assert dc.gelu(Tensor([[0.0]])).item() == 0.0
        assert dc.gelu(Tensor([[1.0]])).item() == pytest.approx(norm.cdf(1.0), abs=1e-12)
        assert dc.gelu(Tensor([[1.0]])).item() == pytest.approx(0.841345, abs=1e-6)
        for x in (6.0, 8.0, 20.0):
            assert abs(dc.gelu(Tensor([[x]])).item() - x) < 1e-6

    def test_monotone_on_grid(self):
        # the exact GELU dips below zero near x = -0.75; non-decreasing from there on
        grid = np.linspace(-0.75, 10.0, 2001)[None, :]
        assert np.all(np.diff(dc.gelu(Tensor(grid)).data) >= 0)

    @given(finite((2, 7)))
    def test_odd_part_is_identity(self, x):
        diff = dc.gelu(Tensor(x)).data - dc.gelu(Tensor(-x)).data
        np.testing.assert_allclose(diff, x, atol=1e-12)


class TestMeanPool:
    def test_examples(self):
        np.testing.assert_array_equal(dc.mean_pool_rows(Tensor([[1.0, 3.0], [3.0, 5.0]])).data, [[2.0, 4.0]])
        np.testing.assert_array_equal(dc.mean_pool_rows(Tensor([[7.0, -1.0]])).data, [[7.0, -1.0]])
        x = Tensor([[0.0, 0.0], [6.0, -3.0], [0.0, 0.0]])
        np.testing.assert_array_equal(dc.mean_pool_rows(x).data, [[2.0, -1.0]])

    def test_empty(self):
        with pytest.raises(EmptyPoolError):
            dc.mean_pool_rows(Tensor(np.zeros((0, 3))))


def _params(rng, **shapes):
    p = ModelParams()
    for name, shape in shapes.items():
        p.add(name, rng.normal(size=shape))
    return p


OP_CASES = {
    "add_row_broadcast": (dict(a=(3, 4), b=(1, 4)), lambda p: dc.sum_all((p["a"] + p["b"]) * p["a"])),
    "sub_col_broadcast": (dict(a=(3, 4), b=(3, 1)), lambda p: dc.sum_all((p["a"] - p["b"]) * p["a"])),
    "div": (dict(a=(2, 3), b=(2, 3)), lambda p: dc.sum_all(p["a"] / (dc.exp(p["b"]) + 1.0))),
    "matmul": (dict(a=(3, 4), b=(4, 2)), lambda p: dc.sum_all(dc.gelu(p["a"] @ p["b"]))),
    "softmax": (dict(a=(3, 5), b=(3, 5)), lambda p: dc.sum_all(dc.softmax_rows(p["a"]) * p["b"])),
    "layer_norm": (dict(a=(3, 5), g=(1, 5), b=(1, 5), w=(3, 5)),
                   lambda p: dc.sum_all(dc.layer_norm(p["a"], p["g"], p["b"]) * p["w"])),
    "transpose_scale": (dict(a=(2, 3), b=(2, 3)), lambda p: dc.sum_all((p["a"].T @ p["b"]) * 0.5)),
    "take_scatter": (dict(a=(5, 3), d=(2, 3), w=(5, 3)),
                     lambda p: dc.sum_all(dc.scatter_add_rows(p["a"], [1, 3], dc.take_rows(p["a"], [0, 0]) * p["d"])
                                          * p["w"])),
    "cols": (dict(a=(2, 5), w=(2, 6)),
             lambda p: dc.sum_all(dc.scatter_cols(dc.take_cols(p["a"], [4, 1, 1]), [0, 2, 5], 6) * p["w"])),
    "concat_pool": (dict(a=(2, 3), b=(4, 3), w=(1, 6)),
                    lambda p: dc.sum_all(dc.concat_cols([dc.mean_pool_rows(dc.concat_rows([p["a"], p["b"]])),
                                                         dc.mean_pool_rows(p["b"])]) * p["w"])),
    "sqdist_clamp": (dict(a=(3, 2), b=(4, 2)),
                     lambda p: dc.sum_all(dc.exp(dc.clamp(dc.pairwise_sqdist(p["a"], p["b"]) * -0.3, -2.0, 0.0)))),
}


class TestGradients:
    @pytest.mark.parametrize("case", sorted(OP_CASES))
    def test_op_matches_finite_differences(self, case):
        shapes, fn = OP_CASES[case]
        params = _params(np.random.default_rng(len(case)), **shapes)
        for r in dc.grad_check(fn, params):
            assert r.max_rel_error < 1e-4, (case, r)

    def test_quadratic(self):
        p = ModelParams()
        p.add("theta", [[3.0]])
        dc.backward(p["theta"] * p["theta"])
        assert p["theta"].grad[0, 0] == 6.0
        (r,) = dc.grad_check(lambda q: q["theta"] * q["theta"], p)
        assert r.max_rel_error < 1e-10

    def test_constant_loss(self):
        p = ModelParams()
        p.add("theta", [[3.0, -1.0]])
        (r,) = dc.grad_check(lambda q: Tensor([[2.0]]), p)
        assert r.max_rel_error == 0.0
        assert not p["theta"].grad.any()

    def test_frozen_parameters_are_skipped(self):
        p = ModelParams()
        p.add("a", [[1.0]])
        p.add("b", [[2.0]], frozen=True)
        reports = dc.grad_check(lambda q: q["a"] * q["b"], p)
        assert [r.name for r in reports] == ["a"]

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            dc.grad_check(lambda q: Tensor([[0.0]]), ModelParams(), h=0.0)

    def test_shared_leaf_accumulates(self):
        x = Tensor([[2.0]], requires_grad=True)
        dc.backward(x * x + x * 3.0)
        assert x.grad[0, 0] == 7.0


class TestDeterminism:
    @settings(max_examples=20)
    @given(finite((3, 4)))
    def test_repeatable_bitwise(self, x):
        def run():
            t = Tensor(x, requires_grad=True)
            out = dc.sum_all(dc.layer_norm(dc.gelu(t)) * dc.softmax_rows(t))
            dc.backward(out)
            return out.data.copy(), t.grad.copy()

        (a, ga), (b, gb) = run(), run()
        assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()

    def test_gradients_independent_of_thread_interleaving(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        xs = [Tensor(rng.normal(size=(3, 4))) for _ in range(6)]

        def grads(threaded):
            w.zero_grad()
            outs = [None] * len(xs)

            def one(j):
                with dc.recording(Tape(rank=j + 1)):
                    outs[j] = dc.sum_all(dc.gelu(xs[j] @ w))

            if threaded:
                threads = [threading.Thread(target=one, args=(j,)) for j in reversed(range(len(xs)))]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
            else:
                for j in range(len(xs)):
                    one(j)
            with dc.recording(Tape(rank=len(xs) + 1)):
                total = outs[0]
                for o in outs[1:]:
                    total = total + o
            dc.backward(total)
            return w.grad.copy()

        assert grads(False).tobytes() == grads(True).tobytes()
