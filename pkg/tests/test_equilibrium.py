from __future__ import annotations

import numpy as np
import pytest

from kinseg.core import FeatureGrid, ModelParams, SpatialDomain, window_sum
from kinseg.equilibrium import alpha_field, build_equilibrium, disc_kernel, drift_fields
from kinseg.errors import ZeroDiffusion

SP = SpatialDomain(30, 30)


def _oracle_slice(sp, mean, var):
    x, y = np.meshgrid(sp.x_centers, sp.y_centers, indexing="ij")
    w = np.exp(-((x - mean[0]) ** 2 + (y - mean[1]) ** 2) / (2 * var))
    return w / (w.sum() * sp.dx * sp.dy)


def _alpha_oracle(eq, delta1):
    """Direct double sum over spatial cells and feature cells."""
    sp, grid = eq.spatial, eq.grid
    table = np.zeros((grid.ncells, sp.nx, sp.ny))
    for k in range(grid.ncells):
        table[k] = eq.slice_density(k)
    c = grid.centers.reshape(-1, grid.d)
    x, y = np.meshgrid(sp.x_centers, sp.y_centers, indexing="ij")
    pts = np.column_stack([x.ravel(), y.ravel()])
    W = (np.sum((pts[:, None] - pts[None]) ** 2, axis=-1) < delta1**2).astype(float)
    mass = table.sum(axis=0).ravel()
    num = np.stack([(table * c[:, ch, None, None]).sum(axis=0).ravel() for ch in range(grid.d)], axis=1)
    return (W @ num) / (W @ mass)[:, None], table


def _two_slices(delta2=0.3, sigma2=0.02):
    grid = FeatureGrid(1, 10)
    rho = np.zeros(10)
    rho[2] = rho[8] = 5.0  # c = 0.25 and 0.85, unit mass in total
    R = window_sum(rho, grid, delta2)
    F = np.zeros((10, 2))
    F[2] = (-0.5 * R[2], 0.0)
    F[8] = (0.5 * R[8], 0.0)
    return grid, rho, F, ModelParams(0.3, delta2, sigma2)


def test_symmetric_full_window_slices():
    grid = FeatureGrid(1, 20)
    rho = np.ones(20)
    eq = build_equilibrium(rho, np.zeros((20, 2)), ModelParams(0.5, 1.0, 0.04), grid, SP)
    np.testing.assert_allclose(eq.R, 1.0)
    np.testing.assert_allclose(eq.mean, 0.0)
    np.testing.assert_allclose(eq.variance, 0.02)
    ref = eq.slice_density(0)
    for k in range(20):
        np.testing.assert_allclose(eq.slice_density(k), ref)


def test_concentrated_slice_matches_quadrature():
    grid = FeatureGrid(1, 30)
    rho = np.zeros(30)
    rho[12] = 30.0
    F = np.zeros((30, 2))
    p = ModelParams(0.5, 0.05, 0.01)
    R = window_sum(rho, grid, p.delta2)
    F[12] = np.array([0.3, -0.1]) * R[12]
    eq = build_equilibrium(rho, F, p, grid, SP)
    np.testing.assert_allclose(eq.mean[12], [0.3, -0.1])
    assert eq.variance[12] == pytest.approx(0.01 / (2 * R[12]))
    want = 30.0 * _oracle_slice(SP, (0.3, -0.1), eq.variance[12])
    np.testing.assert_allclose(eq.slice_density(12), want, rtol=1e-10, atol=1e-12)
    assert eq.slice_density(12).sum() * SP.dx * SP.dy == pytest.approx(30.0)
    assert not eq.slice_density(3).any()


def test_zero_diffusion_rejected():
    with pytest.raises(ZeroDiffusion):
        build_equilibrium(np.ones(5), np.zeros((5, 2)), ModelParams(0.5, 0.5, 0.0), FeatureGrid(1, 5), SP)


def test_spatial_mass_map():
    grid, rho, F, p = _two_slices()
    eq = build_equilibrium(rho, F, p, grid, SP)
    assert eq.spatial_mass_map().sum() * SP.dx * SP.dy == pytest.approx(1.0)
    np.testing.assert_allclose(eq.slice_table().sum(axis=0) * grid.dc, eq.spatial_mass_map())


class TestAlpha:
    def test_single_feature_constant(self):
        grid = FeatureGrid(1, 10)
        rho = np.zeros(10)
        rho[7] = 10.0
        eq = build_equilibrium(rho, np.zeros((10, 2)), ModelParams(0.3, 0.2, 0.05), grid, SP)
        a = alpha_field(eq, 0.3)
        # far-tail cells carry FFT roundoff relative to a denominator near 1e-11
        np.testing.assert_allclose(a.values[~a.empty], 0.75, atol=1e-4)
        np.testing.assert_allclose(a.values[10:20, 10:20], 0.75, atol=1e-12)

    def test_full_window_global_mean(self):
        grid, rho, F, p = _two_slices()
        eq = build_equilibrium(rho, F, p, grid, SP)
        a = alpha_field(eq, 3.0)
        np.testing.assert_allclose(a.values, 0.55, atol=1e-12)

    def test_two_slices_left_right(self):
        grid, rho, F, p = _two_slices(sigma2=0.005)
        eq = build_equilibrium(rho, F, p, grid, SP)
        a = alpha_field(eq, 0.2).values[:, :, 0]
        assert a[5, 15] == pytest.approx(0.25, abs=0.01)
        assert a[24, 15] == pytest.approx(0.85, abs=0.01)

    @pytest.mark.parametrize("delta1", [0.15, 0.4, 1.1])
    def test_matches_direct_sum(self, delta1):
        grid, rho, F, p = _two_slices()
        eq = build_equilibrium(rho, F, p, grid, SP)
        want, _ = _alpha_oracle(eq, delta1)
        got = alpha_field(eq, delta1).values.reshape(-1, 1)
        assert np.abs(got - want).sum() / np.abs(want).sum() < 1e-3

    def test_three_channels_match_direct_sum(self):
        grid = FeatureGrid(3, 4)
        rng = np.random.default_rng(3)
        rho = rng.random(grid.shape)
        rho /= rho.sum() * grid.cell_volume
        p = ModelParams(0.35, 0.4, 0.05, (0.5, 0.5, 0.5))
        R = window_sum(rho, grid, p.delta2)
        F = rng.uniform(-0.5, 0.5, grid.shape + (2,)) * R[..., None]
        eq = build_equilibrium(rho, F, p, grid, SpatialDomain(12, 12))
        want, _ = _alpha_oracle(eq, 0.35)
        got = alpha_field(eq, 0.35).values.reshape(-1, 3)
        assert np.abs(got - want).sum() / np.abs(want).sum() < 1e-3

    def test_kernel_is_strict_disc(self):
        K = disc_kernel(SpatialDomain(10, 10), 0.4)
        assert K.shape == (5, 5)
        assert K[2, 0] == 0 and K[2, 1] == 1


class TestDrift:
    def _oracle(self, eq, delta1):
        alpha, table = _alpha_oracle(eq, delta1)
        sp, grid = eq.spatial, eq.grid
        area = sp.dx * sp.dy
        x, y = np.meshgrid(sp.x_centers, sp.y_centers, indexing="ij")
        rho = eq.rho.reshape(-1)
        A = np.full(grid.ncells, np.nan)
        E = np.zeros((grid.ncells, 2))
        for k in eq.active:
            w = table[k].ravel() * area
            A[k] = (w @ alpha[:, 0]) / rho[k]
            E[k, 0] = w @ (x.ravel() * alpha[:, 0])
            E[k, 1] = w @ (y.ravel() * alpha[:, 0])
        return A, E

    def test_matches_quadrature(self):
        grid, rho, F, p = _two_slices()
        eq = build_equilibrium(rho, F, p, grid, SP)
        dr = drift_fields(eq, 0.4)
        A, E = self._oracle(eq, 0.4)
        act = eq.active
        np.testing.assert_allclose(dr.A[act, 0], A[act], rtol=1e-3)
        got_E = dr.E[act, 0, :]
        assert np.abs(got_E - E[act]).sum() / np.abs(E[act]).sum() < 1e-3

    def test_single_feature_is_transport_fixed_point(self):
        grid = FeatureGrid(1, 10)
        rho = np.zeros(10)
        rho[4] = 10.0
        eq = build_equilibrium(rho, np.zeros((10, 2)), ModelParams(0.3, 0.2, 0.05), grid, SP)
        assert drift_fields(eq, 0.3).A[4, 0] == pytest.approx(0.45)

    def test_full_window_global_mean(self):
        grid, rho, F, p = _two_slices()
        eq = build_equilibrium(rho, F, p, grid, SP)
        A = drift_fields(eq, 3.0).A[eq.active, 0]
        np.testing.assert_allclose(A, 0.55, atol=1e-12)

    def test_low_cluster_average_grows_with_radius(self):
        grid, rho, F, p = _two_slices(sigma2=0.01)
        eq = build_equilibrium(rho, F, p, grid, SP)
        vals = [drift_fields(eq, r).A[2, 0] for r in (0.1, 0.3, 0.6, 0.9, 1.2)]
        assert all(0.25 <= v < 0.55 for v in vals)
        assert np.all(np.diff(vals) > 0)
