"""Core tensor ops: oracle equivalence, stability, and gradient correctness."""

import numpy as np
import pytest

from histomask import numcore as nc
from fdcheck import finite_diff_check


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive O(mkp) triple loop, independent of the library path."""
    m, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(3, 5))
        out = nc.matmul(nc.constant(np.eye(3)), nc.constant(b))
        np.testing.assert_array_equal(out.data, b)

    def test_one_by_one(self):
        out = nc.matmul(nc.constant([[2.0]]), nc.constant([[3.0]]))
        assert out.data.item() == 6.0

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m, k, p = rng.integers(1, 17, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, p))
            out = nc.matmul(nc.constant(a), nc.constant(b))
            np.testing.assert_allclose(out.data, matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.matmul(nc.constant(np.zeros((2, 3))), nc.constant(np.zeros((4, 2))))

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4, 5, 2))
        out = nc.matmul(nc.constant(a), nc.constant(b))
        for i in range(4):
            np.testing.assert_allclose(out.data[i], a[i] @ b[i], atol=1e-12)


class TestMaskedSoftmax:
    def test_uniform_on_equal_logits(self):
        out = nc.masked_softmax(nc.constant(np.zeros((3, 5))))
        np.testing.assert_allclose(out.data, np.full((3, 5), 0.2), atol=1e-15)

    def test_direct_evaluation(self):
        out = nc.masked_softmax(nc.constant([0.0, np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_masked_entry_underflows(self):
        out = nc.masked_softmax(nc.constant([0.0, 0.0]), np.array([0.0, -1e5]))
        assert out.data[1] < 1e-20
        np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 4, 9)) * 5
        mask = np.where(rng.random((6, 4, 9)) < 0.3, -1e5, 0.0)
        mask[..., 0] = 0.0  # keep one live key per row
        out = nc.masked_softmax(nc.constant(logits), mask)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_fully_masked_row_is_hard_error(self):
        with pytest.raises(ValueError):
            nc.masked_softmax(nc.constant([0.0, 0.0]), np.array([-1e5, -1e5]))


class TestLayerNorm:
    def _ln(self, x, gain=None, bias=None):
        d = np.shape(x)[-1]
        gain = np.ones(d) if gain is None else gain
        bias = np.zeros(d) if bias is None else bias
        return nc.layer_norm(nc.constant(x), nc.constant(gain), nc.constant(bias))

    def test_constant_row_maps_to_zero(self):
        out = self._ln(np.full((2, 4), 3.7))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        # mean 0, variance 1; eps shrinks the output slightly
        out = self._ln(np.array([[1.0, -1.0]]))
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, [[expected, -expected]], atol=1e-12)

    def test_zero_gain_collapses_to_bias(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 6))
        bias = rng.normal(size=6)
        out = self._ln(x, gain=np.zeros(6), bias=bias)
        np.testing.assert_allclose(out.data, np.broadcast_to(bias, (3, 6)), atol=1e-15)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        theta = nc.parameter(np.array([1.0, 2.0, 3.0]))
        with nc.GradGraph() as graph:
            loss = theta.sum()
            grads = nc.backward(graph, loss)
        np.testing.assert_array_equal(grads[id(theta)], np.ones(3))

    def test_squared_norm_gradient(self):
        theta = nc.parameter(np.array([1.0, 2.0]))
        with nc.GradGraph() as graph:
            loss = (theta * theta).sum()
            grads = nc.backward(graph, loss)
        np.testing.assert_allclose(grads[id(theta)], [2.0, 4.0], atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        theta = nc.parameter(np.ones(2))
        with nc.GradGraph() as graph:
            loss = theta * 2.0
            with pytest.raises(nc.ShapeError):
                nc.backward(graph, loss)

    def test_reused_operand_accumulates(self):
        theta = nc.parameter(np.array([3.0]))
        with nc.GradGraph() as graph:
            loss = (theta * theta * theta).sum()  # d/dx x^3 = 3x^2
            grads = nc.backward(graph, loss)
        np.testing.assert_allclose(grads[id(theta)], [27.0], atol=1e-10)


class TestFiniteDifferences:
    """Every differentiable op, probed against central differences."""

    def _params(self, rng, shapes):
        return {name: nc.parameter(rng.normal(size=shape)) for name, shape in shapes.items()}

    def test_elementwise_chain(self):
        rng = np.random.default_rng(5)
        params = self._params(rng, {"a": (3, 4), "b": (3, 4)})

        def build():
            a, b = params["a"], params["b"]
            out = nc.tanh(a) * nc.sigmoid(b) + nc.gelu(a - b) - nc.exp(b * 0.1)
            return (out * out).mean()

        finite_diff_check(build, params, rng, n_probes=24)

    def test_log_sqrt(self):
        rng = np.random.default_rng(6)
        params = {"a": nc.parameter(rng.uniform(0.5, 2.0, size=(4, 3)))}

        def build():
            a = params["a"]
            return (nc.log(a) + nc.sqrt(a)).sum()

        finite_diff_check(build, params, rng, n_probes=12)

    def test_matmul_forms(self):
        rng = np.random.default_rng(7)
        params = self._params(rng, {"w": (4, 3), "batched": (2, 5, 4), "rhs": (2, 4, 3)})

        def build():
            a = params["batched"] @ params["w"]
            b = params["batched"] @ params["rhs"]
            return (a * a).sum() + (b * b).mean()

        finite_diff_check(build, params, rng, n_probes=24)

    def test_structural_ops(self):
        rng = np.random.default_rng(8)
        params = self._params(rng, {"a": (2, 3, 4), "b": (2, 3, 4), "table": (6, 4)})

        def build():
            a = params["a"].transpose((1, 0, 2)).reshape(3, 8)
            b = params["b"].transpose((1, 0, 2)).reshape(3, 8)
            cat = nc.concat([a, b], axis=1)
            rows = nc.take(params["table"], np.array([0, 5, 2, 2]))
            tiled = nc.tile_leading(rows, 3)
            return (cat * cat).sum() + (tiled * tiled).sum()

        finite_diff_check(build, params, rng, n_probes=24)

    def test_masked_softmax_grad(self):
        rng = np.random.default_rng(9)
        params = self._params(rng, {"logits": (3, 6)})
        mask = np.where(rng.random((3, 6)) < 0.3, -1e5, 0.0)
        mask[:, 0] = 0.0
        weight = rng.normal(size=(3, 6))

        def build():
            probs = nc.masked_softmax(params["logits"], mask)
            return (probs * nc.constant(weight)).sum()

        finite_diff_check(build, params, rng, n_probes=18)

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(10)
        params = self._params(rng, {"x": (4, 7), "gain": (7,), "bias": (7,)})
        weight = rng.normal(size=(4, 7))

        def build():
            out = nc.layer_norm(params["x"], params["gain"], params["bias"])
            return (out * nc.constant(weight)).sum()

        finite_diff_check(build, params, rng, n_probes=21)

    def test_pairwise_euclidean_grad(self):
        rng = np.random.default_rng(11)
        params = self._params(rng, {"y": (5, 4)})
        x = rng.normal(size=(6, 4))
        weight = rng.normal(size=(5, 6))

        def build():
            dist = nc.pairwise_euclidean(params["y"], x)
            return (dist * nc.constant(weight)).sum()

        finite_diff_check(build, params, rng, n_probes=15)

    def test_pairwise_euclidean_matches_brute_force(self):
        rng = np.random.default_rng(12)
        y = rng.normal(size=(7, 5))
        x = rng.normal(size=(4, 5))
        out = nc.pairwise_euclidean(nc.constant(y), x)
        expected = np.array([[np.sqrt(((yi - xj) ** 2).sum()) for xj in x] for yi in y])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestFiniteGuard:
    def test_overflowing_exp_raises(self):
        with pytest.raises(nc.NonFiniteError):
            nc.exp(nc.constant(np.array([1e6])))

    def test_leaf_rejects_nan(self):
        with pytest.raises(nc.NonFiniteError):
            nc.constant(np.array([np.nan]))


class TestDeterminism:
    def test_same_seed_same_trajectory(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            params = {"w": nc.parameter(rng.normal(size=(4, 4)))}
            state = nc.AdamWState()
            x = rng.normal(size=(8, 4))
            for _ in range(5):
                with nc.GradGraph() as graph:
                    out = nc.constant(x) @ params["w"]
                    loss = (out * out).mean()
                    grads = nc.grads_by_name(nc.backward(graph, loss), params)
                nc.adamw_step(state, params, grads, 1e-2)
            return params["w"].data.copy()

        first = run(123)
        second = run(123)
        np.testing.assert_array_equal(first, second)
