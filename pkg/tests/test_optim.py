import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sosd.model import GradientSet, ModelConfig, backward, forward, gen_dataset, init_params
from sosd.optim import (
    NS_COEFFS,
    OptimizerSpec,
    OptState,
    ScheduleSpec,
    clip_global_norm,
    init_opt_state,
    lr_at,
    newton_schulz,
    optimizer_step,
)
from sosd.spectral import snapshot


def _poly(x):
    a, b, c = NS_COEFFS
    return a * x + b * x**3 + c * x**5


def _grads(state, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    d = state.d
    z = np.zeros((1, 1))
    return GradientSet(*(rng.normal(size=(d, d)) * scale for _ in range(3)), z, z, z, z)


def _zero_grads(state):
    d = state.d
    z = np.zeros((1, 1))
    return GradientSet(np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)), z, z, z, z)


@pytest.fixture
def state():
    return init_params(ModelConfig(d=6, C=3, init_sigma=0.3, seed=1))


class TestSchedules:
    def test_constant(self):
        s = ScheduleSpec("constant", 0.05)
        assert all(lr_at(s, t, 100) == 0.05 for t in (0, 37, 100))

    def test_step_drop(self):
        s = ScheduleSpec("step", 1.8e-3, milestones=(0.5, 0.75), factor=0.1)
        assert lr_at(s, 15000, 20400) == pytest.approx(1.8e-4, rel=1e-12)
        assert lr_at(s, 10199, 20400) == 1.8e-3
        assert lr_at(s, 10200, 20400) == pytest.approx(1.8e-4)
        assert lr_at(s, 15300, 20400) == pytest.approx(1.8e-5)

    def test_cosine_endpoints(self):
        s = ScheduleSpec("cosine", 6.0e-4, warmup=1000, min_ratio=0.1)
        assert lr_at(s, 1000, 10000) == pytest.approx(6.0e-4, rel=1e-12)
        assert lr_at(s, 10000, 10000) == pytest.approx(6.0e-5, rel=1e-12)
        assert lr_at(s, 500, 10000) == pytest.approx(3.0e-4)
        assert lr_at(s, 0, 10000) == 0.0

    def test_wsd_shape(self):
        s = ScheduleSpec("wsd", 0.1, warmup=10, stable=60, decay=30)
        assert lr_at(s, 0, 100) == 0.0
        assert lr_at(s, 5, 100) == pytest.approx(0.05)
        assert lr_at(s, 10, 100) == 0.1
        assert lr_at(s, 69, 100) == 0.1
        assert lr_at(s, 85, 100) == pytest.approx(0.05)
        assert lr_at(s, 100, 100) == 0.0

    @pytest.mark.parametrize(
        "spec",
        [
            ScheduleSpec("wsd", 0.1, warmup=10, stable=60, decay=30),
            ScheduleSpec("cosine", 0.1, warmup=10, min_ratio=0.2),
        ],
    )
    def test_non_increasing_after_warmup(self, spec):
        vals = [lr_at(spec, t, 100) for t in range(10, 101)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(ScheduleSpec(), 101, 100)
        with pytest.raises(ValueError):
            lr_at(ScheduleSpec(), -1, 100)

    def test_wsd_must_partition(self):
        with pytest.raises(ValueError, match="sum"):
            lr_at(ScheduleSpec("wsd", 0.1, warmup=10, stable=10, decay=10), 0, 100)

    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "linear"},
            {"base_lr": 0.0},
            {"kind": "step", "milestones": (0.75, 0.5)},
            {"kind": "step", "milestones": (1.0,)},
            {"kind": "cosine", "min_ratio": 0.0},
            {"warmup": -1},
        ],
    )
    def test_invalid_specs(self, kw):
        with pytest.raises(ValueError):
            ScheduleSpec(**kw)


class TestNewtonSchulz:
    def test_coefficient_sum(self):
        # p(1) = a + b + c
        assert sum(NS_COEFFS) == pytest.approx(0.701, abs=1e-12)

    def test_scalar_one_step(self):
        out = newton_schulz(np.array([[1.0]]), 1)
        assert out[0, 0] == pytest.approx(0.701, abs=1e-12)

    def test_unit_singular_values_map_to_poly_value(self):
        # input with all singular values 1 is first scaled to 1/sqrt(d)
        d = 4
        Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(d, d)))
        out = newton_schulz(Q, 1)
        x = 1 / math.sqrt(d)
        assert np.allclose(snapshot(out).singular_values, _poly(x), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 10), st.integers(1, 10), st.integers(1, 6))
    def test_acts_on_singular_values(self, seed, m, n, steps):
        M = np.random.default_rng(seed).normal(size=(m, n))
        x = snapshot(M).singular_values / np.linalg.norm(M)
        for _ in range(steps):
            x = _poly(x)
        got = snapshot(newton_schulz(M, steps)).singular_values
        assert np.allclose(np.sort(got), np.sort(np.abs(x)), atol=1e-9)

    def test_five_step_range(self):
        # five iterations of p map [0.0015, 1] into about [0.68, 1.21]
        rng = np.random.default_rng(0)
        for _ in range(100):
            M = rng.normal(size=(8, 8))
            x = snapshot(M).singular_values / np.linalg.norm(M)
            s = snapshot(newton_schulz(M, 5)).singular_values
            kept = s[x >= 0.0015]
            assert kept.min() >= 0.68 and kept.max() <= 1.21

    def test_small_singular_values_stay_small(self):
        M = np.diag([1.0, 1e-5])
        s = snapshot(newton_schulz(M, 5)).singular_values
        assert s[1] < 0.1

    def test_preserves_singular_vectors(self):
        M = np.random.default_rng(2).normal(size=(5, 3))
        out = newton_schulz(M, 5)
        # same column space and same right singular subspace ordering
        P = M @ np.linalg.pinv(M)
        assert np.allclose(P @ out, out, atol=1e-10)

    def test_zero_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            newton_schulz(np.zeros((3, 3)))


class TestSpecs:
    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "sgd"},
            {"beta1": 1.0},
            {"beta2": -0.1},
            {"eps": 0.0},
            {"ns_steps": 0},
            {"weight_decay": -1.0},
            {"clip_norm": 0.0},
            {"momentum": 1.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OptimizerSpec(**kw)


class TestStep:
    def test_gd_zero_lr(self, state):
        new, _ = optimizer_step(state, _grads(state), OptimizerSpec("gd"), OptState(), 0.0)
        for k in ("W_Q", "W_K", "W_V"):
            assert np.array_equal(getattr(new, k), getattr(state, k))

    def test_gd_exact_update(self, state):
        g = _grads(state)
        new, st_ = optimizer_step(state, g, OptimizerSpec("gd"), OptState(), 0.05)
        assert np.array_equal(new.W_Q, state.W_Q - 0.05 * g.G_WQ)
        assert np.array_equal(new.W_V, state.W_V - 0.05 * g.G_WV)
        assert st_.t == 1

    def test_decoupled_decay_with_zero_grad(self, state):
        spec = OptimizerSpec("gd", weight_decay=0.1)
        new, _ = optimizer_step(state, _zero_grads(state), spec, OptState(), 0.5)
        assert np.array_equal(new.W_K, state.W_K * (1 - 0.5 * 0.1))

    @pytest.mark.parametrize("kind", ["gd", "adamw", "muon"])
    def test_geometric_decay(self, state, kind):
        spec = OptimizerSpec(kind, weight_decay=0.2)
        ost = init_opt_state(spec, state)
        s, norms = state, [np.linalg.norm(state.W_Q)]
        for _ in range(5):
            s, ost = optimizer_step(s, _zero_grads(s), spec, ost, 0.1)
            norms.append(np.linalg.norm(s.W_Q))
        ratios = np.array(norms[1:]) / np.array(norms[:-1])
        assert np.allclose(ratios, 0.98, rtol=1e-13)

    def test_wc_untouched(self, state):
        for kind in ("gd", "adamw", "muon"):
            spec = OptimizerSpec(kind, weight_decay=0.1)
            new, _ = optimizer_step(state, _grads(state), spec, init_opt_state(spec, state), 0.1)
            assert new.W_C is state.W_C

    def test_inputs_not_modified(self, state):
        before = state.copy()
        spec = OptimizerSpec("adamw", weight_decay=0.1)
        ost = init_opt_state(spec, state)
        m_before = ost.first["W_Q"].copy()
        optimizer_step(state, _grads(state), spec, ost, 0.1)
        assert np.array_equal(state.W_Q, before.W_Q)
        assert np.array_equal(ost.first["W_Q"], m_before)

    def test_adamw_matches_scalar_reference(self, state):
        spec = OptimizerSpec("adamw", beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.01)
        ost = init_opt_state(spec, state)
        s = state
        w = state.W_Q[0, 0]
        m = v = 0.0
        for t in range(1, 6):
            g = _grads(s, seed=t)
            s, ost = optimizer_step(s, g, spec, ost, 0.01)
            gi = g.G_WQ[0, 0]
            w = w * (1 - 0.01 * 0.01)
            m = 0.9 * m + 0.1 * gi
            v = 0.95 * v + 0.05 * gi * gi
            w = w - 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.95**t)) + 1e-8)
        assert s.W_Q[0, 0] == pytest.approx(w, rel=1e-13)

    def test_adamw_first_step_is_sign(self, state):
        spec = OptimizerSpec("adamw", eps=1e-30)
        g = _grads(state)
        new, _ = optimizer_step(state, g, spec, init_opt_state(spec, state), 0.01)
        assert np.allclose(state.W_V - new.W_V, 0.01 * np.sign(g.G_WV), rtol=1e-12)

    def test_muon_direction_is_orthogonalized_momentum(self, state):
        spec = OptimizerSpec("muon", momentum=0.9)
        ost = init_opt_state(spec, state)
        g1, g2 = _grads(state, seed=1), _grads(state, seed=2)
        s1, ost = optimizer_step(state, g1, spec, ost, 0.1)
        s2, ost = optimizer_step(s1, g2, spec, ost, 0.1)
        buf = 0.9 * g1.G_WK + g2.G_WK
        assert np.allclose(s1.W_K - s2.W_K, 0.1 * newton_schulz(buf, 5), atol=1e-14)

    def test_shape_mismatch(self, state):
        bad = GradientSet(np.zeros((2, 2)), *(np.zeros((6, 6)),) * 2, *(np.zeros((1, 1)),) * 4)
        with pytest.raises(ValueError, match="shape"):
            optimizer_step(state, bad, OptimizerSpec(), OptState(), 0.1)

    def test_negative_lr(self, state):
        with pytest.raises(ValueError):
            optimizer_step(state, _grads(state), OptimizerSpec(), OptState(), -0.1)

    def test_clipping(self, state):
        g = _grads(state, scale=10.0)
        clipped = clip_global_norm(g.for_weights(), 1.0)
        total = math.sqrt(sum(np.sum(v * v) for v in clipped.values()))
        assert total == pytest.approx(1.0)
        small = clip_global_norm(g.for_weights(), 1e9)
        assert small is not None and all(small[k] is g.for_weights()[k] for k in small)

    def test_deterministic_trajectory(self):
        cfg = ModelConfig(n=6, d=5, C=3, init_sigma=0.2, seed=4)
        batch = gen_dataset(cfg, 1.0, 5)

        def run():
            s = init_params(cfg)
            spec = OptimizerSpec("adamw", weight_decay=0.1)
            ost = init_opt_state(spec, s)
            for _ in range(20):
                g = backward(s, batch, forward(s, batch))
                s, ost = optimizer_step(s, g, spec, ost, 0.01)
            return s.W_Q.tobytes() + s.W_K.tobytes() + s.W_V.tobytes()

        assert run() == run()
