import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sosd.model import (
    Batch,
    ForwardCache,
    ModelConfig,
    ModelState,
    backward,
    forward,
    gen_dataset,
    init_params,
    linearized_attention,
    softmax_rows,
)
from sosd.verification import gradcheck_instance


def _instance(n=5, d=4, C=3, seed=0, sigma=0.5, noise=1.0):
    cfg = ModelConfig(n=n, d=d, C=C, init_sigma=sigma, seed=seed)
    return init_params(cfg), gen_dataset(cfg, noise, seed + 100)


def _loop_forward(state, batch):
    """Token-by-token reference implementation with explicit sums."""
    X, y = batch.X, batch.labels
    n, d = X.shape
    Q, K, V = X @ state.W_Q, X @ state.W_K, X @ state.W_V
    total = 0.0
    for i in range(n):
        scores = [sum(Q[i, k] * K[j, k] for k in range(d)) / math.sqrt(d) for j in range(n)]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        a = [x / sum(w) for x in w]
        h = [sum(a[j] * V[j, k] for j in range(n)) for k in range(d)]
        z = [sum(h[k] * state.W_C[k, c] for k in range(d)) for c in range(state.C)]
        zt = max(z)
        total += -(z[y[i]] - zt - math.log(sum(math.exp(v - zt) for v in z)))
    return total / n


class TestConfig:
    @pytest.mark.parametrize("kw", [{"n": 1}, {"d": 1}, {"C": 1}, {"init_sigma": 0.0}, {"n": 2.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)


class TestInit:
    def test_deterministic(self):
        a = init_params(ModelConfig(seed=3))
        b = init_params(ModelConfig(seed=3))
        for k in ("W_Q", "W_K", "W_V", "W_C"):
            assert getattr(a, k).tobytes() == getattr(b, k).tobytes()

    def test_tiny_sigma_gives_near_zero_weights(self):
        s = init_params(ModelConfig(init_sigma=1e-300))
        for k in ("W_Q", "W_K", "W_V"):
            assert np.max(np.abs(getattr(s, k))) < 1e-298

    def test_gaussian_moments(self):
        sigma, d = 0.01, 64
        pooled = np.concatenate([
            init_params(ModelConfig(d=d, init_sigma=sigma, seed=s)).W_Q.ravel() for s in range(10)
        ])
        assert abs(pooled.mean()) < 3 * sigma / math.sqrt(10 * d * d)
        assert abs(pooled.var() / sigma**2 - 1) < 0.10

    def test_wc_orthonormal_columns(self):
        s = init_params(ModelConfig(d=16, C=4))
        assert np.allclose(s.W_C.T @ s.W_C, np.eye(4), atol=1e-12)

    def test_wc_orthonormal_rows_when_wide(self):
        s = init_params(ModelConfig(d=3, C=5))
        assert s.W_C.shape == (3, 5)
        assert np.allclose(s.W_C @ s.W_C.T, np.eye(3), atol=1e-12)

    def test_state_shape_checks(self):
        with pytest.raises(ValueError):
            ModelState(np.eye(3), np.eye(3), np.eye(2), np.eye(3))
        with pytest.raises(ValueError):
            ModelState(np.eye(3), np.eye(3), np.eye(3), np.eye(2))


class TestDataset:
    def test_zero_noise_tokens_equal_means(self):
        cfg = ModelConfig(n=40, d=6, C=3)
        b = gen_dataset(cfg, 0.0, seed=4)
        for c in range(3):
            rows = b.X[b.labels == c]
            assert np.all(rows == rows[0])
            assert np.linalg.norm(rows[0]) == pytest.approx(1.0)

    def test_deterministic(self):
        cfg = ModelConfig()
        a, b = gen_dataset(cfg, 0.3, 9), gen_dataset(cfg, 0.3, 9)
        assert a.X.tobytes() == b.X.tobytes() and np.array_equal(a.labels, b.labels)

    def test_label_counts_binomial(self):
        n, C = 1000, 4
        b = gen_dataset(ModelConfig(n=n, d=8, C=C), 0.3, seed=11)
        counts = np.bincount(b.labels, minlength=C)
        tol = 3 * math.sqrt(n * (1 / C) * (1 - 1 / C))
        assert np.all(np.abs(counts - n / C) <= tol)

    def test_draws_share_means(self):
        cfg = ModelConfig(n=30, d=5, C=2)
        a, b = gen_dataset(cfg, 0.0, 1, draw=0), gen_dataset(cfg, 0.0, 1, draw=7)
        means_a = {int(c): a.X[a.labels == c][0].tobytes() for c in set(a.labels)}
        means_b = {int(c): b.X[b.labels == c][0].tobytes() for c in set(b.labels)}
        assert all(means_a[c] == means_b[c] for c in means_a.keys() & means_b.keys())

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            gen_dataset(ModelConfig(), -1.0)

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            Batch(np.ones((3, 2)), np.array([0, 1]))
        with pytest.raises(ValueError):
            Batch(np.ones((2, 2)), np.array([0.5, 1.0]))


class TestForward:
    def test_zero_scores_uniform_attention(self):
        state, batch = _instance(n=6)
        state = state.replace(W_Q=np.zeros((4, 4)), W_K=np.zeros((4, 4)))
        cache = forward(state, batch)
        assert np.array_equal(cache.M, np.zeros((6, 6)))
        assert np.all(cache.A == 1 / 6)

    def test_uniform_logits_loss_is_log_c(self):
        state, batch = _instance(C=4)
        state = state.replace(W_V=np.zeros((4, 4)))
        cache = forward(state, batch)
        assert np.all(cache.Z == 0)
        assert cache.loss == pytest.approx(math.log(4), abs=1e-15)
        assert cache.loss == pytest.approx(1.386294, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_reference(self, seed):
        state, batch = _instance(n=6, d=5, C=4, seed=seed, sigma=0.8)
        assert forward(state, batch).loss == pytest.approx(_loop_forward(state, batch), abs=1e-12)

    def test_row_stochastic(self):
        state, batch = _instance(n=8, d=6, C=5, sigma=2.0)
        c = forward(state, batch)
        assert np.max(np.abs(c.A.sum(1) - 1)) < 1e-12
        assert np.max(np.abs(c.P.sum(1) - 1)) < 1e-12
        assert np.all(c.A > 0) and c.loss >= 0

    def test_shape_mismatch(self):
        state, _ = _instance(d=4)
        _, other = _instance(d=5)
        with pytest.raises(ValueError, match="features"):
            forward(state, other)

    def test_label_out_of_range(self):
        state, batch = _instance(C=3)
        with pytest.raises(ValueError):
            forward(state, Batch(batch.X, np.full(batch.n, 3)))

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(0)
        M = rng.normal(size=(5, 5))
        shifted = M + rng.normal(size=(5, 1)) * 100
        assert np.max(np.abs(softmax_rows(M) - softmax_rows(shifted))) < 1e-14

    def test_loss_finite_under_saturation(self):
        state, batch = _instance(sigma=50.0)
        assert math.isfinite(forward(state, batch).loss)


class TestBackward:
    def test_perfect_prediction_gives_zero_gradients(self):
        state, batch = _instance()
        c = forward(state, batch)
        forced = ForwardCache(c.Q, c.K, c.V, c.M, c.A, c.H, c.Z, np.eye(state.C)[batch.labels], 0.0)
        g = backward(state, batch, forced)
        for arr in (g.G_WQ, g.G_WK, g.G_WV, g.G_Z, g.G_H, g.G_A, g.G_M):
            assert not np.any(arr)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 8), st.integers(2, 5), st.integers(0, 10**6))
    def test_gradcheck(self, n, d, C, seed):
        state, batch = _instance(n, d, C, seed)
        assert gradcheck_instance(state, batch) < 1e-6

    def test_directional_derivative_single_entry(self):
        state, batch = _instance(seed=3)
        g = backward(state, batch, forward(state, batch))
        h = 1e-5
        Wp, Wm = state.W_Q.copy(), state.W_Q.copy()
        Wp[1, 2] += h
        Wm[1, 2] -= h
        fd = (forward(state.replace(W_Q=Wp), batch).loss - forward(state.replace(W_Q=Wm), batch).loss) / (2 * h)
        assert g.G_WQ[1, 2] == pytest.approx(fd, rel=1e-6)

    def test_gz_after_rescaling(self):
        state, batch = _instance(seed=2)
        s2 = state.replace(W_Q=3.0 * state.W_Q)
        c2 = forward(s2, batch)
        g2 = backward(s2, batch, c2)
        Y = np.eye(state.C)[batch.labels]
        assert np.array_equal(g2.G_Z, (c2.P - Y) / batch.n)

    def test_stale_cache(self):
        state, batch = _instance(n=5)
        _, other = _instance(n=6)
        with pytest.raises(ValueError):
            backward(state, batch, forward(state, other))

    def test_jacobian_row_form(self):
        state, batch = _instance(n=4)
        c = forward(state, batch)
        g = backward(state, batch, c)
        for i in range(batch.n):
            a = c.A[i]
            J = np.diag(a) - np.outer(a, a)
            assert np.allclose(g.G_M[i], J.T @ g.G_A[i], atol=1e-15)


class TestLinearized:
    def test_zero_scores(self):
        n = 5
        out = linearized_attention(np.zeros((n, n)))
        assert np.array_equal(out, np.full((n, n), 1 / n))
        assert np.array_equal(out, softmax_rows(np.zeros((n, n))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 10**6), st.floats(-3, 1))
    def test_rows_sum_to_one(self, n, seed, logscale):
        M = np.random.default_rng(seed).normal(size=(n, n)) * 10**logscale
        assert np.max(np.abs(linearized_attention(M).sum(1) - 1)) < 1e-14

    @pytest.mark.parametrize("seed", range(5))
    def test_second_order_residual(self, seed):
        M = np.random.default_rng(seed).normal(size=(6, 6))
        M *= 1e-2 / np.linalg.norm(M)
        r1 = np.linalg.norm(softmax_rows(M) - linearized_attention(M))
        r2 = np.linalg.norm(softmax_rows(M / 2) - linearized_attention(M / 2))
        assert r1 / r2 >= 3.5


class TestSoftmaxLemmas:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 10**6), st.floats(-2, 1.5))
    def test_gap_bounds_on_attention_rows(self, m, seed, logscale):
        u = np.random.default_rng(seed).normal(size=m) * 10**logscale
        s = softmax_rows(u[None])[0]
        j = int(np.argmax(u))
        g = u[j] - np.max(np.delete(u, j))
        assert 1 - s[j] <= (m - 1) * math.exp(-g) + 1e-12
        assert np.max(np.delete(s, j)) <= math.exp(-g) + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 10**6), st.floats(-2, 1.5))
    def test_jacobian_psd_and_norm(self, m, seed, logscale):
        a = softmax_rows((np.random.default_rng(seed).normal(size=m) * 10**logscale)[None])[0]
        J = np.diag(a) - np.outer(a, a)
        ev = np.linalg.eigvalsh(J)
        assert ev[0] >= -1e-12
        assert ev[-1] <= 1 - a @ a + 1e-12
        assert 1 - a @ a <= 2 * (1 - a.max()) + 1e-12

    def test_jacobian_half_half(self):
        a = np.array([0.5, 0.5])
        J = np.diag(a) - np.outer(a, a)
        assert np.linalg.norm(J, 2) == pytest.approx(0.5)
        assert 1 - a @ a == 0.5
