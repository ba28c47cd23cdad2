from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kinseg.cbo import Box, CboConfig, CboState, MemoObjective, cbo_step, consensus_point, landscape, optimize, write_history_csv
from kinseg.errors import AllLossesInfinite, ConfigError, NumericalError

BOX2 = Box((-1.0, -1.0), (1.0, 1.0))


class TestConsensus:
    def test_single_point(self):
        x = np.tile([0.3, 0.7, 0.1], (5, 1))
        np.testing.assert_allclose(consensus_point(x, np.arange(5.0), 3.0), [0.3, 0.7, 0.1])

    def test_midpoint(self):
        np.testing.assert_allclose(consensus_point(np.array([[0.0, 1.0], [1.0, 3.0]]), np.array([2.0, 2.0]), 50.0), [0.5, 2.0])

    def test_sharp_limit_picks_argmin(self):
        g = np.random.default_rng(4)
        x = g.random((30, 4))
        f = g.random(30)
        c = consensus_point(x, f, 1e6)
        np.testing.assert_allclose(c, x[np.argmin(f)], atol=1e-6)

    def test_infinite_losses_skipped(self):
        x = np.array([[0.0], [1.0], [5.0]])
        c = consensus_point(x, np.array([1.0, 1.0, np.inf]), 2.0)
        np.testing.assert_allclose(c, [0.5])
        with pytest.raises(AllLossesInfinite):
            consensus_point(x, np.full(3, np.inf), 2.0)

    @settings(max_examples=80, deadline=None)
    @given(
        arrays(float, (12, 3), elements=st.floats(-5, 5)),
        arrays(float, 12, elements=st.floats(0, 1e3)),
        st.floats(0.1, 1e4),
    )
    def test_hull_containment(self, x, f, alpha):
        c = consensus_point(x, f, alpha)
        assert np.all(c >= x.min(axis=0)) and np.all(c <= x.max(axis=0))

    @settings(max_examples=80, deadline=None)
    @given(
        arrays(float, (10, 2), elements=st.floats(-3, 3)),
        arrays(float, 10, elements=st.floats(0, 10)),
        st.floats(-1e3, 1e3),
    )
    def test_shift_invariance(self, x, f, shift):
        a = consensus_point(x, f, 7.0)
        b = consensus_point(x, f + shift, 7.0)
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


class TestStep:
    def _state(self, x, fn):
        f = np.array([fn(p) for p in x])
        return CboState(x.copy(), f, consensus_point(x, f, 5.0), x[0].copy(), float(f.min()))

    def test_pure_drift_jumps_to_consensus(self):
        g = np.random.default_rng(0)
        x = g.uniform(-0.5, 0.5, (8, 2))
        fn = lambda p: float(np.sum(p**2))  # noqa: E731
        st_ = self._state(x, fn)
        c = consensus_point(x, st_.losses, 5.0)
        cfg = CboConfig(n_particles=8, lam=1.0, dt=1.0, sigma_cbo=0.0, alpha_gibbs=5.0, box=BOX2)
        cbo_step(st_, cfg, fn, g)
        np.testing.assert_allclose(st_.positions, np.tile(c, (8, 1)), atol=1e-15)

    def test_particle_at_consensus_stays(self):
        x = np.array([[0.2, 0.2], [0.2, 0.2]])
        fn = lambda p: 1.0  # noqa: E731
        st_ = self._state(x, fn)
        cfg = CboConfig(n_particles=2, sigma_cbo=2.0, box=BOX2)
        cbo_step(st_, cfg, fn, np.random.default_rng(1))
        np.testing.assert_allclose(st_.positions, x)

    @pytest.mark.parametrize("iso", [True, False])
    def test_box_projection(self, iso):
        g = np.random.default_rng(2)
        x = g.uniform(-1, 1, (16, 2))
        fn = lambda p: float(np.sum(p**2))  # noqa: E731
        st_ = self._state(x, fn)
        cfg = CboConfig(n_particles=16, sigma_cbo=5.0, dt=0.5, box=BOX2, isotropic=iso)
        for _ in range(10):
            cbo_step(st_, cfg, fn, g)
            assert np.all(np.abs(st_.positions) <= 1.0)


class TestOptimize:
    def test_convex_target(self):
        target = np.array([0.31, -0.42, 0.05])
        box = Box((-1.0,) * 3, (1.0,) * 3)
        res = optimize(lambda p: float(np.sum((p - target) ** 2)), CboConfig(n_particles=64, n_iterations=200, box=box, quantum=1e-12))
        assert np.linalg.norm(res.x - target) < 1e-2

    def test_deterministic_and_monotone(self):
        box = Box((-2.0, -2.0), (2.0, 2.0))
        fn = lambda p: float(np.sum(p**2) + 0.5 * np.sin(5 * p[0]) ** 2)  # noqa: E731
        cfg = CboConfig(n_particles=20, n_iterations=30, box=box, seed=11)
        a, b = optimize(fn, cfg), optimize(fn, cfg)
        np.testing.assert_array_equal([h.consensus for h in a.history], [h.consensus for h in b.history])
        best = [h.best_loss for h in a.history]
        assert np.all(np.diff(best) <= 0)
        c = optimize(fn, CboConfig(n_particles=20, n_iterations=30, box=box, seed=12))
        assert not np.array_equal(a.history[-1].consensus, c.history[-1].consensus)

    def test_failures_become_infinite(self):
        def fn(p):
            if p[0] > 0.5:
                raise NumericalError("boom")
            return float(p[0] ** 2)

        memo = MemoObjective(fn)
        assert memo(np.array([0.9])) == np.inf and memo.failures == 1
        res = optimize(memo, CboConfig(n_particles=16, n_iterations=20, box=Box((-1.0,), (1.0,))))
        assert np.isfinite(res.loss) and abs(res.x[0]) < 0.2

    def test_memo_cache(self):
        calls = []
        memo = MemoObjective(lambda p: calls.append(1) or 1.0, quantum=1e-3)
        memo(np.array([0.1]))
        memo(np.array([0.1 + 1e-5]))
        assert len(calls) == 1 and memo.calls == 1

    def test_history_csv(self, tmp_path):
        res = optimize(lambda p: float(p @ p), CboConfig(n_particles=4, n_iterations=3, box=BOX2))
        write_history_csv(res.history, tmp_path / "h.csv", ["a", "b"])
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "iteration,best_loss,min_loss,consensus_a,consensus_b" and len(lines) == 5

    def test_landscape(self):
        vals = landscape(lambda p: float(p[0] + 10 * p[1]), np.zeros(2), (0, 1), (np.array([0.0, 1.0]), np.array([0.0, 2.0])))
        np.testing.assert_allclose(vals, [[0, 20], [1, 21]])


class TestBox:
    def test_invalid(self):
        with pytest.raises(ConfigError):
            Box((0.0, 1.0), (1.0, 1.0))
        with pytest.raises(ConfigError):
            Box((0.0,), (np.inf,))

    def test_channels(self):
        b = Box.for_channels(3)
        assert b.dim == 6

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            CboConfig(lam=0.0)
