"""Spatial quasi-equilibrium parametrised by the feature density and windowed first moment.

For constant diffusion the stationary profile of the spatial operator is, for
each feature value, a product of two Gaussians with mean ``F / R`` and
variance ``sigma2 / (2 R)``, where ``R`` is the mass inside the feature
window. Slices are restricted to the domain and renormalised to the slice
mass. They are stored in separable form (one factor per spatial axis) so the
three-channel case never materialises the full ``(cells, nx, ny)`` table.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft as sfft
from scipy.special import ndtr

from .core import DOMAIN_HI, DOMAIN_LO, FeatureGrid, ModelParams, SpatialDomain, window_sum
from .errors import ZeroDiffusion

# Cells whose mass falls below this fraction of the total are treated as empty.
EMPTY_CELL_MASS = 1e-14
# Spatial cells whose windowed mass is below this fraction of the total get the global mean.
ALPHA_EMPTY_REL = 1e-12


@dataclass
class QuasiEquilibrium:
    grid: FeatureGrid
    spatial: SpatialDomain
    rho: np.ndarray  # grid shape, density
    F: np.ndarray  # grid shape + (2,), mass form
    R: np.ndarray  # grid shape, windowed mass
    mean: np.ndarray  # grid shape + (2,)
    variance: np.ndarray  # grid shape
    active: np.ndarray  # flat indices of occupied cells
    gx: np.ndarray  # (n_active, nx), unit mass: sum * dx == 1
    gy: np.ndarray  # (n_active, ny)

    def slice_density(self, cell: int | tuple) -> np.ndarray:
        """``f(x, y, c)`` on the spatial grid for one feature cell; integrates to ``rho(c)``."""
        flat = int(np.ravel_multi_index(np.atleast_1d(cell), self.grid.shape)) if not isinstance(cell, (int, np.integer)) else int(cell)
        pos = np.searchsorted(self.active, flat)
        if pos >= self.active.size or self.active[pos] != flat:
            return np.zeros((self.spatial.nx, self.spatial.ny))
        rho_k = self.rho.reshape(-1)[flat]
        return rho_k * np.outer(self.gx[pos], self.gy[pos])

    def slice_table(self) -> np.ndarray:
        """Full ``(cells, nx, ny)`` table; only sensible for one feature channel."""
        out = np.zeros((self.grid.ncells, self.spatial.nx, self.spatial.ny))
        rho = self.rho.reshape(-1)[self.active]
        out[self.active] = rho[:, None, None] * self.gx[:, :, None] * self.gy[:, None, :]
        return out

    def spatial_mass_map(self) -> np.ndarray:
        """``sum_c f(x, c) dc^d`` on the spatial grid."""
        w = self.rho.reshape(-1)[self.active] * self.grid.cell_volume
        return (self.gx * w[:, None]).T @ self.gy

    def marginal_cell_probabilities(self, cell: int, axis: int, edges: np.ndarray) -> np.ndarray:
        """Exact bin probabilities of the truncated Gaussian marginal of one slice (unit mass)."""
        mu = self.mean.reshape(-1, 2)[cell, axis]
        sd = np.sqrt(self.variance.reshape(-1)[cell])
        cdf = ndtr((np.asarray(edges) - mu) / sd)
        lo, hi = ndtr((DOMAIN_LO - mu) / sd), ndtr((DOMAIN_HI - mu) / sd)
        return np.diff(cdf) / (hi - lo)


def _gaussian_factor(centers: np.ndarray, mu: np.ndarray, var: np.ndarray, h: float) -> np.ndarray:
    """Rows ``exp(-(x - mu)^2 / (2 var))`` at cell centers, normalised to unit midpoint mass."""
    logw = -((centers[None, :] - mu[:, None]) ** 2) / (2.0 * var[:, None])
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / (w.sum(axis=1, keepdims=True) * h)


def build_equilibrium(
    rho: np.ndarray,
    F: np.ndarray,
    params: ModelParams,
    grid: FeatureGrid,
    spatial: SpatialDomain,
    R: np.ndarray | None = None,
) -> QuasiEquilibrium:
    if params.sigma2 <= 0:
        raise ZeroDiffusion("sigma2 must be positive for a smooth quasi-equilibrium")
    rho = np.maximum(np.asarray(rho, float), 0.0)
    if R is None:
        R = np.maximum(window_sum(rho, grid, params.delta2), 0.0)
    flat_rho = rho.reshape(-1)
    total = flat_rho.sum()
    active = np.flatnonzero(flat_rho > EMPTY_CELL_MASS * max(total, 1e-300))
    Rf = R.reshape(-1)
    # own cell lies in its own window, so R >= rho * dc^d on occupied cells
    Ra = np.maximum(Rf[active], flat_rho[active] * grid.cell_volume)
    assert np.all(Ra > 0)
    Fa = F.reshape(-1, 2)[active]
    mean = np.zeros((grid.ncells, 2))
    var = np.zeros(grid.ncells)
    # F and rho are advanced separately, so F / R can leave the domain on nearly
    # empty cells; the quasi-equilibrium mean is a position and must lie in it.
    mean[active] = np.clip(Fa / Ra[:, None], DOMAIN_LO, DOMAIN_HI)
    var[active] = params.sigma2 / (2.0 * Ra)
    gx = _gaussian_factor(spatial.x_centers, mean[active, 0], var[active], spatial.dx)
    gy = _gaussian_factor(spatial.y_centers, mean[active, 1], var[active], spatial.dy)
    return QuasiEquilibrium(
        grid,
        spatial,
        rho,
        np.asarray(F, float),
        R,
        mean.reshape(grid.shape + (2,)),
        var.reshape(grid.shape),
        active,
        gx,
        gy,
    )


def disc_kernel(spatial: SpatialDomain, delta1: float) -> np.ndarray:
    """Indicator of ``|dx| < delta1`` on cell-center offsets."""
    rx = min(int(np.ceil(delta1 / spatial.dx)), spatial.nx - 1)
    ry = min(int(np.ceil(delta1 / spatial.dy)), spatial.ny - 1)
    ox = np.arange(-rx, rx + 1) * spatial.dx
    oy = np.arange(-ry, ry + 1) * spatial.dy
    d2 = ox[:, None] ** 2 + oy[None, :] ** 2
    return (d2 < delta1 * delta1).astype(float)


@lru_cache(maxsize=8)
def _disc_kernel_fft(nx: int, ny: int, delta1: float):
    K = disc_kernel(SpatialDomain(nx, ny), delta1)
    rx, ry = K.shape[0] // 2, K.shape[1] // 2
    # only outputs rx..rx+nx-1 are kept, so wrap-around beyond nx + rx is harmless
    size = (sfft.next_fast_len(nx + rx, real=True), sfft.next_fast_len(ny + ry, real=True))
    return sfft.rfft2(K, s=size), size, rx, ry


def _window_average_sums(stack: np.ndarray, spatial: SpatialDomain, delta1: float) -> np.ndarray:
    """Sum each map in ``stack`` (k, nx, ny) over the disc around every spatial cell."""
    kf, size, rx, ry = _disc_kernel_fft(spatial.nx, spatial.ny, float(delta1))
    full = sfft.irfft2(sfft.rfft2(stack, s=size, axes=(1, 2)) * kf, s=size, axes=(1, 2))
    return full[:, rx : rx + spatial.nx, ry : ry + spatial.ny]


@dataclass
class AlphaField:
    values: np.ndarray  # (nx, ny, d)
    empty: np.ndarray  # (nx, ny) bool, cells that fell back to the global mean


def alpha_field(eq: QuasiEquilibrium, delta1: float) -> AlphaField:
    """Window-averaged feature over a disc of radius ``delta1`` around each spatial cell."""
    grid, spatial = eq.grid, eq.spatial
    centers = grid.centers.reshape(-1, grid.d)[eq.active]
    w = eq.rho.reshape(-1)[eq.active] * grid.cell_volume
    gxw = eq.gx * w[:, None]
    mass = gxw.T @ eq.gy
    # mass and the d weighted maps share one batched window sum
    stack = np.empty((grid.d + 1, spatial.nx, spatial.ny))
    stack[0] = mass
    for ch in range(grid.d):
        stack[ch + 1] = (gxw * centers[:, ch][:, None]).T @ eq.gy
    conv = _window_average_sums(stack, spatial, delta1)
    den = conv[0]
    num = np.moveaxis(conv[1:], 0, -1)
    total = w.sum()
    global_mean = (w @ centers) / total if total > 0 else np.full(grid.d, 0.5)
    # FFT roundoff is relative to the total mass, so "empty" is too
    empty = den <= ALPHA_EMPTY_REL * max(total, 1e-300)
    values = np.where(empty[:, :, None], global_mean, num / np.where(empty, 1.0, den)[:, :, None])
    return AlphaField(np.clip(values, 0.0, 1.0), empty)


@dataclass
class DriftFields:
    A: np.ndarray  # grid shape + (d,)
    E: np.ndarray  # grid shape + (d, 2), mass form
    m_inf: np.ndarray  # grid shape + (2,)
    alpha: AlphaField


def drift_fields(eq: QuasiEquilibrium, delta1: float, alpha: AlphaField | None = None) -> DriftFields:
    """Slice averages of the local feature mean (A) and of position times it (E)."""
    grid, spatial = eq.grid, eq.spatial
    alpha = alpha or alpha_field(eq, delta1)
    d = grid.d
    area = spatial.dx * spatial.dy
    centers = grid.centers.reshape(-1, d)
    A = centers.copy()
    E = np.zeros((grid.ncells, d, 2))
    rho_a = eq.rho.reshape(-1)[eq.active]
    xs, ys = spatial.x_centers, spatial.y_centers
    for ch in range(d):
        a = alpha.values[:, :, ch] * area
        ga = eq.gx @ a  # (n_active, ny)
        A[eq.active, ch] = np.einsum("ky,ky->k", ga, eq.gy)
        gxa = (eq.gx * xs[None, :]) @ a
        E[eq.active, ch, 0] = rho_a * np.einsum("ky,ky->k", gxa, eq.gy)
        E[eq.active, ch, 1] = rho_a * np.einsum("ky,ky->k", ga, eq.gy * ys[None, :])
    return DriftFields(
        np.clip(A, 0.0, 1.0).reshape(grid.shape + (d,)),
        E.reshape(grid.shape + (d, 2)),
        eq.mean,
        alpha,
    )


__all__ = [
    "QuasiEquilibrium",
    "build_equilibrium",
    "disc_kernel",
    "AlphaField",
    "alpha_field",
    "DriftFields",
    "drift_fields",
]
