"""Kernel-level autodiff checks against central finite differences."""

import numpy as np
import pytest

from balancerec import tensor as T


def numeric_grad(build, arrays, step=1e-5):
    """Central-difference gradient of build(arrays) w.r.t. each array.

    `build` maps plain numpy arrays to a scalar float. Independent of the
    tape: used as the oracle for every backward rule.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for k in range(flat_a.size):
            orig = flat_a[k]
            flat_a[k] = orig + step
            up = build(arrays)
            flat_a[k] = orig - step
            down = build(arrays)
            flat_a[k] = orig
            flat_g[k] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0))


class TestKernelForward:
    def test_matmul_value(self):
        g = T.GradGraph()
        a = g.constant([[1.0, 2.0], [3.0, 4.0]])
        b = g.constant([[5.0], [6.0]])
        np.testing.assert_allclose(T.matmul(a, b).value, [[17.0], [39.0]])

    def test_bias_add_broadcasts_rows(self):
        g = T.GradGraph()
        m = g.constant([[1.0, 2.0], [3.0, 4.0]])
        b = g.constant([10.0, 20.0])
        np.testing.assert_allclose(T.add(m, b).value, [[11.0, 22.0], [13.0, 24.0]])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        g = T.GradGraph()
        x = g.constant(rng.normal(size=(7, 5)) * 30.0)
        s = T.softmax(x).value
        np.testing.assert_allclose(s.sum(axis=1), np.ones(7), atol=1e-12)
        assert np.all(s >= 0.0)

    def test_sigmoid_extremes_stable(self):
        g = T.GradGraph()
        x = g.constant(np.array([[-800.0, 800.0]]))
        s = T.sigmoid(x).value
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s, [[0.0, 1.0]], atol=1e-12)

    def test_embed_lookup_gathers_rows(self):
        g = T.GradGraph()
        table = g.constant(np.arange(12.0).reshape(4, 3))
        out = T.embed_lookup(table, [2, 0, 2])
        np.testing.assert_allclose(out.value, [[6, 7, 8], [0, 1, 2], [6, 7, 8]])

    def test_shape_mismatch_rejected(self):
        g = T.GradGraph()
        a = g.constant(np.ones((2, 3)))
        b = g.constant(np.ones((2, 3)))
        with pytest.raises(T.ShapeError):
            T.matmul(a, b)
        with pytest.raises(T.ShapeError):
            T.add(a, g.constant(np.ones((3, 2))))

    def test_non_finite_rejected(self):
        g = T.GradGraph()
        x = g.constant(np.array([[0.5, -1.0]]))
        with pytest.raises(T.NonFiniteError):
            T.log(x)
        bad = g.constant(np.array([[1.0, 2.0]]))
        bad.value[0, 0] = np.nan
        with pytest.raises(T.NonFiniteError):
            T.apply_kernel("relu", bad)

    def test_apply_kernel_dispatch_and_unknown(self):
        g = T.GradGraph()
        a = g.constant(np.ones((2, 2)))
        out = T.apply_kernel("add", a, g.constant(np.ones((2, 2))))
        np.testing.assert_allclose(out.value, 2.0 * np.ones((2, 2)))
        with pytest.raises(KeyError):
            T.apply_kernel("convolve", a)


class TestKernelGradients:
    """Every kernel's backward agrees with central differences."""

    @pytest.mark.parametrize("seed", range(5))
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.uniform(-1, 1, size=(3, 4))
        B = rng.uniform(-1, 1, size=(4, 2))

        def build(arrs):
            return float(np.sum((arrs[0] @ arrs[1]) ** 2))

        want = numeric_grad(build, [A, B])
        g = T.GradGraph()
        a, b = g.parameter(A), g.parameter(B)
        out = T.matmul(a, b)
        loss = T.reduce_sum(T.elementwise_mul(out, out))
        got = g.backward(loss)
        assert rel_err(got[a.idx], want[0]) < 1e-4
        assert rel_err(got[b.idx], want[1]) < 1e-4

    @pytest.mark.parametrize("kernel,fn", [
        ("relu", lambda v: np.maximum(v, 0.0)),
        ("sigmoid", lambda v: 1.0 / (1.0 + np.exp(-v))),
        ("exp", np.exp),
    ])
    def test_elementwise(self, kernel, fn):
        rng = np.random.default_rng(42)
        V = rng.uniform(-1, 1, size=(4, 3))
        V[np.abs(V) < 1e-3] = 0.2  # keep clear of the relu kink

        def build(arrs):
            return float(np.sum(fn(arrs[0])))

        want = numeric_grad(build, [V])
        g = T.GradGraph()
        x = g.parameter(V)
        out = getattr(T, kernel)(x)
        got = g.backward(T.reduce_sum(out))
        assert rel_err(got[x.idx], want[0]) < 1e-4

    def test_log_div_sqrt(self):
        rng = np.random.default_rng(7)
        A = rng.uniform(0.2, 2.0, size=(3, 3))
        B = rng.uniform(0.5, 2.0, size=(3, 3))

        def build(arrs):
            return float(np.sum(np.log(arrs[0]) / arrs[1] + np.sqrt(arrs[0])))

        want = numeric_grad(build, [A, B])
        g = T.GradGraph()
        a, b = g.parameter(A), g.parameter(B)
        loss = T.reduce_sum(T.add(T.div(T.log(a), b), T.sqrt(a)))
        got = g.backward(loss)
        assert rel_err(got[a.idx], want[0]) < 1e-4
        assert rel_err(got[b.idx], want[1]) < 1e-4

    def test_softmax_grad(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, size=(4, 5))
        W = rng.uniform(-1, 1, size=(5, 1))

        def build(arrs):
            e = np.exp(arrs[0] - arrs[0].max(axis=1, keepdims=True))
            s = e / e.sum(axis=1, keepdims=True)
            return float(np.mean(s @ arrs[1]))

        want = numeric_grad(build, [X, W])
        g = T.GradGraph()
        x, w = g.parameter(X), g.parameter(W)
        loss = T.reduce_mean(T.matmul(T.softmax(x), w))
        got = g.backward(loss)
        assert rel_err(got[x.idx], want[0]) < 1e-4
        assert rel_err(got[w.idx], want[1]) < 1e-4

    def test_embed_concat_bias(self):
        rng = np.random.default_rng(11)
        E = rng.uniform(-1, 1, size=(5, 3))
        F = rng.uniform(-1, 1, size=(5, 2))
        W = rng.uniform(-1, 1, size=(5, 2))
        bias = rng.uniform(-1, 1, size=2)
        idx = np.array([0, 3, 3, 1])

        def build(arrs):
            e, f, w, b8 = arrs
            h = np.concatenate([e[idx], f[idx]], axis=1) @ w + b8
            return float(np.mean(1.0 / (1.0 + np.exp(-h))))

        want = numeric_grad(build, [E, F, W, bias])
        g = T.GradGraph()
        e, f, w, b = g.parameter(E), g.parameter(F), g.parameter(W), g.parameter(bias)
        h = T.add(T.matmul(T.concat(T.embed_lookup(e, idx), T.embed_lookup(f, idx)), w), b)
        got = g.backward(T.reduce_mean(T.sigmoid(h)))
        for node, ref in zip([e, f, w, b], want):
            assert rel_err(got[node.idx], ref) < 1e-4

    def test_unreached_parameter_gets_zero_gradient(self):
        g = T.GradGraph()
        a = g.parameter(np.ones((2, 2)))
        b = g.parameter(np.ones((2, 2)))
        loss = T.reduce_mean(a)
        got = g.backward(loss)
        np.testing.assert_array_equal(got[b.idx], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        g = T.GradGraph()
        a = g.parameter(np.ones((2, 2)))
        with pytest.raises(T.ShapeError):
            g.backward(T.relu(a))


class TestGraphMechanics:
    def test_backward_bitwise_deterministic(self):
        rng = np.random.default_rng(5)
        g = T.GradGraph()
        a = g.parameter(rng.normal(size=(6, 4)))
        w = g.parameter(rng.normal(size=(4, 3)))
        loss = T.reduce_mean(T.sigmoid(T.matmul(T.relu(a), w)))
        g1 = g.backward(loss)
        g2 = g.backward(loss)
        for k in g1:
            assert np.array_equal(g1[k], g2[k])

    def test_replay_recomputes_after_leaf_change(self):
        g = T.GradGraph()
        a = g.parameter(np.array([[1.0, 2.0]]))
        out = T.reduce_sum(T.elementwise_mul(a, a))
        assert float(out.value) == 5.0
        a.value[0, 0] = 3.0
        g.replay()
        assert float(out.value) == 13.0

    def test_check_gradients_passes_on_mlp(self):
        rng = np.random.default_rng(9)
        g = T.GradGraph()
        x = g.constant(rng.uniform(-1, 1, size=(6, 4)))
        w1 = g.parameter(rng.uniform(-1, 1, size=(4, 5)), name="w1")
        b1 = g.parameter(rng.uniform(-0.5, 0.5, size=5), name="b1")
        w2 = g.parameter(rng.uniform(-1, 1, size=(5, 1)), name="w2")
        h = T.relu(T.add(T.matmul(x, w1), b1))
        loss = T.reduce_mean(T.sigmoid(T.matmul(h, w2)))
        report = g.check_gradients(loss, step=1e-5, tol=1e-4)
        assert report.passed, report.per_param
        assert report.max_rel_error < 1e-4

    def test_check_gradients_flags_corrupted_gradient(self):
        """A +1 corruption on one entry must push the report over tol."""
        rng = np.random.default_rng(10)
        g = T.GradGraph()
        x = g.constant(rng.uniform(-1, 1, size=(4, 3)))
        w = g.parameter(rng.uniform(-1, 1, size=(3, 2)), name="w")
        loss = T.reduce_mean(T.sigmoid(T.matmul(x, w)))

        original = T.GradGraph.backward

        def corrupted(self, node):
            grads = original(self, node)
            grads[w.idx] = grads[w.idx].copy()
            grads[w.idx].flat[0] += 1.0
            return grads

        T.GradGraph.backward = corrupted
        try:
            report = g.check_gradients(loss, step=1e-5, tol=1e-4)
        finally:
            T.GradGraph.backward = original
        assert not report.passed
        assert report.max_rel_error > 0.1
