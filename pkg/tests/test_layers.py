"""
Finite-difference checks for every hand-written layer, plus the
closed-form cases of the optimizer helpers.

Each check projects the layer output onto a fixed random tensor R so the
scalar loss is <out, R>; the backward pass is then fed R directly.
"""

import numpy as np
import pytest

from ccdgan.ccgan import layers as L
from ccdgan.ccgan.optim import (
    AdamState,
    SpectralState,
    adam_step,
    orthogonal_init,
    orthogonal_regularizer,
    spectral_backward,
    spectral_init,
    spectral_normalize,
)
from ccdgan.errors import ShapeMismatch, ZeroMatrix

from oracles import central_difference, jacobi_singular_values, relative_error

TOL = 1e-4
H = 1e-5


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def check(forward, arrays, backward, rng):
    """forward(*arrays) -> out; backward(R) -> grads aligned with arrays."""
    out = forward(*arrays)
    r = rng.standard_normal(np.shape(out))
    analytic = backward(r)
    worst = 0.0
    for x, g in zip(arrays, analytic):
        if g is None:
            continue
        num = central_difference(lambda: float(np.sum(forward(*arrays) * r)), x, H)
        worst = max(worst, relative_error(g, num, floor=1e-6))
    return worst


SHAPES_4D = [(2, 3, 4, 4), (1, 2, 6, 6), (3, 4, 2, 2)]


# ---------------------------------------------------------------------------
# Per-layer gradient checks
# ---------------------------------------------------------------------------


class TestGradients:
    @pytest.mark.parametrize("n,d,m", [(3, 4, 5), (1, 7, 2), (5, 2, 3)])
    def test_linear(self, n, d, m):
        rng = np.random.default_rng(n * 100 + d)
        x, w, b = rng.standard_normal((n, d)), rng.standard_normal((d, m)), rng.standard_normal(m)
        fwd = lambda x, w, b: L.linear_forward(x, w, b)[0]
        bwd = lambda r: L.linear_backward(r, L.linear_forward(x, w, b)[1])
        assert check(fwd, [x, w, b], bwd, rng) <= TOL

    @pytest.mark.parametrize("shape,f,k,pad", [
        ((2, 3, 5, 5), 4, 3, 1), ((1, 2, 6, 6), 3, 3, 0), ((2, 3, 4, 4), 2, 1, 0), ((1, 1, 5, 5), 2, 5, 2),
    ])
    def test_conv(self, shape, f, k, pad):
        rng = np.random.default_rng(sum(shape) + k)
        x = rng.standard_normal(shape)
        w = rng.standard_normal((f, shape[1], k, k))
        b = rng.standard_normal(f)
        fwd = lambda x, w, b: L.conv_forward(x, w, b, pad)[0]
        bwd = lambda r: L.conv_backward(r, L.conv_forward(x, w, b, pad)[1])
        assert check(fwd, [x, w, b], bwd, rng) <= TOL

    def test_conv_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        out = L.conv_forward(x, w, None, 1)[0]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for f in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, f, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[f])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("shape", [(4, 3), (3, 2, 3, 3), (2, 4, 2, 2)])
    def test_batchnorm_train(self, shape):
        rng = np.random.default_rng(len(shape) + shape[0])
        c = shape[1]
        x, gamma, beta = rng.standard_normal(shape), rng.standard_normal(c), rng.standard_normal(c)
        rm, rv = np.zeros(c), np.ones(c)
        fwd = lambda x, g, b: L.batchnorm_forward(x, g, b, rm, rv, True)[0]
        bwd = lambda r: L.batchnorm_backward(r, L.batchnorm_forward(x, gamma, beta, rm, rv, True)[1])
        assert check(fwd, [x, gamma, beta], bwd, rng) <= TOL

    @pytest.mark.parametrize("shape", [(4, 3), (3, 2, 3, 3), (2, 4, 2, 2)])
    def test_batchnorm_eval(self, shape):
        rng = np.random.default_rng(7 + shape[0])
        c = shape[1]
        x, gamma, beta = rng.standard_normal(shape), rng.standard_normal(c), rng.standard_normal(c)
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
        fwd = lambda x, g, b: L.batchnorm_forward(x, g, b, rm, rv, False)[0]
        bwd = lambda r: L.batchnorm_backward(r, L.batchnorm_forward(x, gamma, beta, rm, rv, False)[1])
        assert check(fwd, [x, gamma, beta], bwd, rng) <= TOL

    @pytest.mark.parametrize("shape", SHAPES_4D)
    def test_relu(self, shape):
        rng = np.random.default_rng(shape[1])
        x = away_from_zero(rng, shape)
        assert check(lambda x: L.relu_forward(x)[0], [x],
                     lambda r: [L.relu_backward(r, L.relu_forward(x)[1])], rng) <= TOL

    @pytest.mark.parametrize("shape", SHAPES_4D)
    def test_tanh(self, shape):
        rng = np.random.default_rng(shape[2])
        x = rng.standard_normal(shape)
        assert check(lambda x: L.tanh_forward(x)[0], [x],
                     lambda r: [L.tanh_backward(r, L.tanh_forward(x)[1])], rng) <= TOL

    @pytest.mark.parametrize("shape", SHAPES_4D)
    def test_upsample(self, shape):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(shape)
        assert check(lambda x: L.upsample_forward(x)[0], [x],
                     lambda r: [L.upsample_backward(r, 2)], rng) <= TOL

    @pytest.mark.parametrize("shape", SHAPES_4D)
    def test_avgpool(self, shape):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(shape)
        assert check(lambda x: L.avgpool_forward(x)[0], [x],
                     lambda r: [L.avgpool_backward(r, 2)], rng) <= TOL

    @pytest.mark.parametrize("shape", SHAPES_4D)
    def test_maxpool(self, shape):
        rng = np.random.default_rng(3)
        # distinct values spaced well beyond the FD step so the argmax never flips
        x = rng.permutation(np.arange(np.prod(shape), dtype=np.float64)).reshape(shape) * 0.01
        assert check(lambda x: L.maxpool_forward(x)[0], [x],
                     lambda r: [L.maxpool_backward(r, L.maxpool_forward(x)[1])], rng) <= TOL

    @pytest.mark.parametrize("v,d,n", [(2, 3, 4), (5, 2, 7), (3, 4, 1)])
    def test_embedding(self, v, d, n):
        rng = np.random.default_rng(v + n)
        table = rng.standard_normal((v, d))
        ids = rng.integers(0, v, n)
        assert check(lambda t: L.embedding_forward(ids, t)[0], [table],
                     lambda r: [L.embedding_backward(r, L.embedding_forward(ids, table)[1])], rng) <= TOL

    @pytest.mark.parametrize("sizes", [(2, 3), (1, 1, 4), (3, 2)])
    def test_concat(self, sizes):
        rng = np.random.default_rng(len(sizes))
        parts = [rng.standard_normal((2, s)) for s in sizes]
        assert check(lambda *p: L.concat_forward(list(p))[0], parts,
                     lambda r: L.concat_backward(r, L.concat_forward(parts)[1]), rng) <= TOL

    @pytest.mark.parametrize("shape,pool", [((2, 4, 4, 4), 2), ((1, 3, 4, 4), 1), ((2, 2, 2, 2), 2)])
    def test_nonlocal(self, shape, pool):
        rng = np.random.default_rng(shape[1] * 10 + pool)
        c = shape[1]
        ck, cv = max(1, c // 2), c
        # integer-spaced inputs keep the max-pooled keys away from ties
        x = rng.permutation(np.arange(np.prod(shape), dtype=np.float64)).reshape(shape) * 0.05 - 1
        wt, wp = rng.standard_normal((ck, c)) * 0.5, rng.standard_normal((ck, c)) * 0.5
        wg, wo = rng.standard_normal((cv, c)) * 0.5, rng.standard_normal((c, cv)) * 0.5
        gain = np.array(0.7)
        fwd = lambda x, wt, wp, wg, wo, gain: L.nonlocal_forward(x, wt, wp, wg, wo, float(gain), pool)[0]
        if pool > 1:
            # FD may only perturb x where the pooled argmax is stable; perturb weights only
            def fwd_w(wt, wp, wg, wo, gain):
                return fwd(x, wt, wp, wg, wo, gain)
            bwd = lambda r: L.nonlocal_backward(r, L.nonlocal_forward(x, wt, wp, wg, wo, float(gain), pool)[1])[1:]
            assert check(fwd_w, [wt, wp, wg, wo, gain], bwd, rng) <= TOL
        else:
            bwd = lambda r: L.nonlocal_backward(r, L.nonlocal_forward(x, wt, wp, wg, wo, float(gain), pool)[1])
            assert check(fwd, [x, wt, wp, wg, wo, gain], bwd, rng) <= TOL

    def test_nonlocal_input_gradient_with_pooling(self):
        rng = np.random.default_rng(11)
        x = rng.permutation(np.arange(64, dtype=np.float64)).reshape(1, 4, 4, 4) * 0.05 - 1
        wt, wp, wg, wo = (rng.standard_normal(s) * 0.5 for s in [(2, 4), (2, 4), (4, 4), (4, 4)])
        fwd = lambda x: L.nonlocal_forward(x, wt, wp, wg, wo, 0.7, 2)[0]
        bwd = lambda r: [L.nonlocal_backward(r, L.nonlocal_forward(x, wt, wp, wg, wo, 0.7, 2)[1])[0]]
        assert check(fwd, [x], bwd, rng) <= TOL

    @pytest.mark.parametrize("n", [3, 8, 1])
    def test_bce(self, n):
        rng = np.random.default_rng(n)
        z, t = rng.standard_normal(n) * 3, rng.integers(0, 2, n).astype(float)
        num = central_difference(lambda: L.bce_with_logits(z, t)[0], z, H)
        assert relative_error(L.bce_with_logits(z, t)[1], num, 1e-6) <= TOL

    @pytest.mark.parametrize("n,k", [(3, 2), (5, 4), (1, 3)])
    def test_softmax_cross_entropy(self, n, k):
        rng = np.random.default_rng(n * k)
        z, y = rng.standard_normal((n, k)), rng.integers(0, k, n)
        num = central_difference(lambda: L.softmax_cross_entropy(z, y)[0], z, H)
        assert relative_error(L.softmax_cross_entropy(z, y)[1], num, 1e-6) <= TOL

    @pytest.mark.parametrize("shape", [(4, 3), (3, 5), (4, 2, 3, 3)])
    def test_spectral_norm(self, shape):
        rng = np.random.default_rng(shape[0] * 3 + shape[1])
        w = rng.standard_normal(shape)
        state = spectral_init(w, rng)
        fixed = SpectralState(state.u, state.v, state.sigma)

        def fwd(w):
            # sigma = u^T W v with u, v held fixed
            m = w.reshape(w.shape[0], -1)
            return w / float(fixed.u @ m @ fixed.v)

        def bwd(r):
            return [spectral_backward(r, w, fixed)]

        assert check(fwd, [w], bwd, rng) <= TOL

    @pytest.mark.parametrize("shape", [(4, 3), (3, 5), (2, 3, 3, 3)])
    def test_orthogonal_regularizer(self, shape):
        rng = np.random.default_rng(shape[1])
        w = rng.standard_normal(shape)
        num = central_difference(lambda: orthogonal_regularizer(w, 0.3)[0], w, H)
        assert relative_error(orthogonal_regularizer(w, 0.3)[1], num, 1e-6) <= TOL


# ---------------------------------------------------------------------------
# Closed-form layer cases
# ---------------------------------------------------------------------------


class TestLayerCases:
    def test_tanh_gradient_at_zero(self):
        out, cache = L.tanh_forward(np.zeros(3))
        assert np.array_equal(L.tanh_backward(np.ones(3), cache), np.ones(3))

    def test_zero_output_gradient(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
        _, cache = L.conv_forward(x, w, b)
        dx, dw, db = L.conv_backward(np.zeros((2, 2, 4, 4)), cache)
        assert not dx.any() and not dw.any() and not db.any()

    def test_batchnorm_running_stats_returned(self):
        x = np.random.default_rng(0).standard_normal((8, 2))
        rm, rv = np.zeros(2), np.ones(2)
        _, _, (nm, nv) = L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, True)
        assert np.array_equal(rm, np.zeros(2)) and not np.array_equal(nm, rm)


# ---------------------------------------------------------------------------
# Orthogonal init and spectral normalization
# ---------------------------------------------------------------------------


class TestOrthogonal:
    def test_square(self):
        w = orthogonal_init(8, 8, rng=np.random.default_rng(0))
        np.testing.assert_allclose(w.T @ w, np.eye(8), atol=1e-5)

    def test_wide(self):
        w = orthogonal_init(4, 8, rng=np.random.default_rng(0))
        np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-5)

    def test_gain(self):
        w = orthogonal_init(6, 3, gain=2.0, rng=np.random.default_rng(0))
        np.testing.assert_allclose(w.T @ w, 4 * np.eye(3), atol=1e-5)

    def test_regularizer_cases(self):
        p, g = orthogonal_regularizer(orthogonal_init(5, 5, rng=np.random.default_rng(1)), 1.0)
        assert p <= 1e-8
        p, _ = orthogonal_regularizer(np.ones((2, 2)), 1.0)
        assert p == 8.0


class TestSpectral:
    def test_diagonal(self):
        w = np.diag([3.0, 1.0])
        wn, st = spectral_normalize(w, spectral_init(w, np.random.default_rng(0)))
        np.testing.assert_allclose(wn, np.diag([1.0, 1 / 3]), atol=1e-3)

    def test_orthogonal_unchanged(self):
        w = orthogonal_init(6, 6, rng=np.random.default_rng(2))
        wn, _ = spectral_normalize(w, spectral_init(w, np.random.default_rng(3)))
        np.testing.assert_allclose(wn, w, atol=1e-3)

    def test_random_against_jacobi_svd(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            w = rng.standard_normal((16, 16))
            wn, _ = spectral_normalize(w, spectral_init(w, rng, warmup=200))
            s = jacobi_singular_values(wn)[0]
            assert 0.999 <= s <= 1.001

    def test_zero_matrix(self):
        with pytest.raises(ZeroMatrix):
            spectral_normalize(np.zeros((3, 3)), SpectralState(np.ones(3) / np.sqrt(3)))


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 1, 1e-2)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_quadratic_descent(self):
        p, st = {"t": np.array(1.0)}, AdamState()
        for t in range(1, 101):
            adam_step(p, {"t": 2 * p["t"]}, st, t, 1e-2, beta1=0.0, beta2=0.9)
        assert abs(p["t"]) < 1.0
        # scalar oracle: the same recurrence written out by hand
        th, v = 1.0, 0.0
        for t in range(1, 101):
            g = 2 * th
            v = 0.9 * v + 0.1 * g * g
            th -= 1e-2 * g / (np.sqrt(v / (1 - 0.9**t)) + 1e-8)
        assert p["t"] == pytest.approx(th, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 1, 1e-3)
