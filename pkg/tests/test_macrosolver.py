from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinseg.core import FeatureGrid, MacroState, ModelParams
from kinseg.errors import CflViolation, ZeroTarget
from kinseg.macrosolver import (
    MacroRun,
    _divergence,
    _interface_flux,
    l1_loss,
    macro_step,
    marginals,
    rho_gtsm_from_mask,
    run_to_time,
    stable_dt,
)
from kinseg.noise import NoiseSpec, apply_noise
from kinseg.core import RngStream
from kinseg.pipeline import build_problem, generate_shape_image, macro_loss


def _run(rho, F=None, **kw):
    grid = FeatureGrid(1, rho.size)
    F = np.zeros((rho.size, 2)) if F is None else F
    params = kw.pop("params")
    return MacroRun(MacroState(rho.astype(float), F), grid, params, **kw)


class TestLoss:
    def test_examples(self):
        t = np.zeros(10)
        t[3] = 10.0
        assert l1_loss(t, t, 0.1) == 0.0
        assert l1_loss(np.zeros(10), t, 0.1) == pytest.approx(1.0)
        assert l1_loss(np.roll(t, 1), t, 0.1) == pytest.approx(2.0)

    def test_zero_target(self):
        with pytest.raises(ZeroTarget):
            l1_loss(np.ones(3), np.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_bounded_for_unit_masses(self, seed):
        g = np.random.default_rng(seed)
        a, b = g.random(8), g.random(8)
        a /= a.sum() / 8
        b /= b.sum() / 8
        assert 0 <= l1_loss(a, b, 1 / 8) <= 2 + 1e-12


class TestTarget:
    def test_all_foreground(self):
        grid = FeatureGrid(1, 30)
        r = rho_gtsm_from_mask(np.ones((4, 4)), grid)
        assert r[-1] * grid.dc == pytest.approx(1.0) and r[:-1].sum() == 0

    def test_square_fraction(self):
        grid = FeatureGrid(1, 30)
        _, mask = generate_shape_image("square")
        r = rho_gtsm_from_mask(mask, grid) * grid.dc
        assert r[-1] == pytest.approx(0.25) and r[0] == pytest.approx(0.75)

    def test_red_square_channels(self):
        grid = FeatureGrid(3, 5)
        m = np.zeros((28, 28, 3))
        m[7:21, 7:21, 0] = 1
        r = rho_gtsm_from_mask(m, grid)
        mr, mg, mb = marginals(r, grid)
        assert mr[-1] * grid.dc == pytest.approx(196 / 784) and mr[0] * grid.dc == pytest.approx(588 / 784)
        assert mg[0] * grid.dc == pytest.approx(1.0) and mb[0] * grid.dc == pytest.approx(1.0)


class TestSteps:
    def test_zero_velocity_unchanged(self):
        rho = np.linspace(0.5, 1.5, 20)
        F = np.random.default_rng(0).uniform(-0.1, 0.1, (20, 2))
        run = _run(rho, F.copy(), params=ModelParams(0.3, 0.4, 0.05, theta_f=0.0, theta_b=0.0), dt_fixed=0.1)
        run_to_time(run, 1.0)
        np.testing.assert_array_equal(run.state.rho, rho)
        np.testing.assert_array_equal(run.state.F, F)

    def test_zero_horizon(self):
        rho = np.ones(10)
        run = _run(rho, params=ModelParams(0.3, 0.4, 0.05))
        run_to_time(run, 0.0)
        assert run.steps == 0
        np.testing.assert_array_equal(run.state.rho, rho)

    def test_pure_binarization_splits_evenly(self):
        # method of characteristics: every interior point flows to the wall on its own side of c_max
        rho = np.ones(30)
        run = _run(rho, params=ModelParams(0.3, 0.4, 0.05, (0.5,), theta_f=0.0))
        run_to_time(run, 200.0)
        dc = run.grid.dc
        assert run.state.rho[0] * dc == pytest.approx(0.5, abs=1e-3)
        assert run.state.rho[-1] * dc == pytest.approx(0.5, abs=1e-3)

    def test_mass_conserved_and_positive(self):
        g = np.random.default_rng(1)
        rho = g.random(30) + 0.1
        rho /= rho.sum() / 30
        run = _run(rho, params=ModelParams(0.3, 0.4, 0.05, (0.45,)))
        run_to_time(run, 5.0)
        assert abs(run.mass() - 1.0) < 1e-12
        assert np.all(run.state.rho >= 0)

    def test_cfl_step(self):
        run = _run(np.ones(30), params=ModelParams(0.3, 0.4, 0.05))
        dt = stable_dt(run)
        assert 0 < dt < np.inf
        run.dt_fixed = -1.0
        with pytest.raises(CflViolation):
            macro_step(run)

    def test_steady_stop(self):
        run = _run(np.ones(30), params=ModelParams(0.3, 0.4, 0.05, (0.5,), theta_f=0.0))
        run_to_time(run, 1000.0, steady_tol=1e-6)
        assert run.t < 1000.0


@pytest.mark.parametrize("mode", ["rusanov", "upwind"])
def test_linear_advection_first_order(mode):
    """Smooth bump advected at unit speed; L1 error should halve with the cell size."""
    errs = []
    for n in (100, 200, 400, 800):
        x = (np.arange(n) + 0.5) / n
        u = np.exp(-((x - 0.3) / 0.1) ** 2)
        v = np.ones(n)
        dt = 0.5 / n
        steps = int(round(0.3 / dt))
        for _ in range(steps):
            fl = _interface_flux(u, v * u, v, 0, mode, True)
            u = u - dt * n * _divergence(fl, 0, n)
        exact = np.exp(-((x - 0.6) / 0.1) ** 2)
        errs.append(np.abs(u - exact).sum() / n)
    order = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(order > 0.85) and np.all(order < 1.15)


def test_grid_refinement_changes_loss_little():
    clean, mask = generate_shape_image("square")
    noisy = apply_noise(clean, NoiseSpec("gaussian", 5.0, 10.0, mask), RngStream(0))
    p = ModelParams(0.2903, 0.4685, 0.1549, (0.4778,))
    losses = [macro_loss(build_problem(noisy, mask, nc), p, 20.0) for nc in (30, 60)]
    assert abs(losses[1] - losses[0]) < 0.02
