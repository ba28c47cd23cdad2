"""Consistency harnesses: particle collisions against the quasi-equilibrium, and
the split-step particle model against the macroscopic solver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FeatureGrid,
    MacroState,
    ModelParams,
    ParticleEnsemble,
    RngStream,
    SpatialDomain,
    f_cant_from_ensemble,
    rho_from_ensemble,
    rho_m_from_ensemble,
)
from .equilibrium import build_equilibrium
from .macrosolver import MacroRun, l1_loss, run_to_time
from .microsim import nanbu_spatial_step, spatial_pair_round
from .neighbors import local_mean_features_gridded
from .potential import phi

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# collisions only


@dataclass
class CollisionSetup:
    n: int = 20_000
    epsilon: float = 0.01
    t_final: float = 50.0
    dt_ratio: float = 0.5
    delta1: float = 2.0
    delta2: float = 1.0
    sigma2: float = 0.01
    feature_mean: float = 0.5
    feature_var: float = 0.01
    center: tuple[float, float] = (0.4, -0.3)
    half_width: float = 0.4
    nc: int = 30
    n_snapshots: int = 101
    symmetric: bool = False
    seed: int = 0


@dataclass
class CollisionRun:
    setup: CollisionSetup
    times: np.ndarray
    F_series: np.ndarray  # (snapshots, nc, 2)
    final: ParticleEnsemble
    rho0: np.ndarray
    F0: np.ndarray
    grid: FeatureGrid


def collision_initial_ensemble(setup: CollisionSetup, gen: np.random.Generator) -> ParticleEnsemble:
    """Uniform square of particles around ``center`` with Gaussian features clipped to [0, 1]."""
    cx, cy = setup.center
    h = setup.half_width
    pos = np.column_stack(
        [gen.uniform(cx - h, cx + h, setup.n), gen.uniform(cy - h, cy + h, setup.n)]
    )
    c = np.clip(gen.normal(setup.feature_mean, np.sqrt(setup.feature_var), setup.n), 0.0, 1.0)
    return ParticleEnsemble(pos, c[:, None], np.zeros((setup.n, 2), dtype=np.int64))


def run_collisions(setup: CollisionSetup) -> CollisionRun:
    """Spatial collisions only (features frozen), sampling F(c, t) along the way."""
    gen = RngStream(setup.seed).generator()
    grid = FeatureGrid(1, setup.nc)
    ens = collision_initial_ensemble(setup, gen)
    params = ModelParams(setup.delta1, setup.delta2, setup.sigma2, (0.5,))
    dt = setup.dt_ratio * setup.epsilon
    nsteps = int(round(setup.t_final / dt))
    snap_at = np.unique(np.linspace(0, nsteps, setup.n_snapshots).round().astype(int))
    F_series, times = [], []
    rho0 = rho_from_ensemble(ens, grid)
    F0 = f_cant_from_ensemble(ens, grid, setup.delta2)
    k_snap = 0
    for step in range(nsteps + 1):
        if k_snap < snap_at.size and step == snap_at[k_snap]:
            F_series.append(f_cant_from_ensemble(ens, grid, setup.delta2))
            times.append(step * dt)
            k_snap += 1
        if step < nsteps:
            nanbu_spatial_step(ens, params, setup.epsilon, dt, gen, symmetric=setup.symmetric)
    return CollisionRun(setup, np.array(times), np.array(F_series), ens, rho0, F0, grid)


def relative_drift(run: CollisionRun) -> np.ndarray:
    """Per spatial component: max over occupied cells and time of ``|F - <F>_t| / |<F>_t|``."""
    occupied = run.rho0 > 0
    F = run.F_series[:, occupied, :]
    mean = F.mean(axis=0)
    dev = np.abs(F - mean[None]).max(axis=0)
    return (dev / np.abs(mean)).max(axis=0)


def rms_drift(run: CollisionRun) -> float:
    """Root-mean-square deviation of F from its time mean, averaged over cells and components."""
    occupied = run.rho0 > 0
    F = run.F_series[:, occupied, :]
    return float(np.sqrt(((F - F.mean(axis=0)) ** 2).mean()))


def drift_rate(run: CollisionRun) -> float:
    """Mean squared change of F per unit time between snapshots, over occupied cells and components.

    F performs a random walk under the collisions, and this is its diffusivity.
    It is a far less noisy summary than the deviation of one path from its own
    time mean.
    """
    occupied = run.rho0 > 0
    inc = np.diff(run.F_series[:, occupied, :], axis=0)
    dt = np.diff(run.times)[:, None, None]
    return float((inc**2 / dt).mean())


def equilibrium_for_run(run: CollisionRun, spatial: SpatialDomain):
    params = ModelParams(run.setup.delta1, run.setup.delta2, run.setup.sigma2, (0.5,))
    return build_equilibrium(run.rho0, run.F0, params, run.grid, spatial)


def marginal_l1(run: CollisionRun, cells, bins: int = 30) -> np.ndarray:
    """L1 distance between particle histograms and the equilibrium marginals.

    Returns an array of shape ``(len(cells), 2)`` (x and y marginals), each
    entry being the sum over bins of absolute probability differences.
    """
    eq = equilibrium_for_run(run, SpatialDomain(bins, bins))
    edges = np.linspace(-1.0, 1.0, bins + 1)
    kc = run.grid.flat_index(run.final.features)
    out = np.zeros((len(cells), 2))
    for r, cell in enumerate(cells):
        sel = run.final.positions[kc == cell]
        for ax in range(2):
            hist, _ = np.histogram(sel[:, ax], bins=edges)
            p_hat = hist / max(sel.shape[0], 1)
            p = eq.marginal_cell_probabilities(cell, ax, edges)
            out[r, ax] = np.abs(p_hat - p).sum()
    return out


def slice_rows(run: CollisionRun, cells, bins: int = 30) -> list[list]:
    """Rows ``(c, axis, x, p_particles, p_equilibrium)`` for the marginal comparison plot."""
    eq = equilibrium_for_run(run, SpatialDomain(bins, bins))
    edges = np.linspace(-1.0, 1.0, bins + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    kc = run.grid.flat_index(run.final.features)
    rows = []
    for cell in cells:
        sel = run.final.positions[kc == cell]
        for ax in range(2):
            hist, _ = np.histogram(sel[:, ax], bins=edges)
            p_hat = hist / max(sel.shape[0], 1)
            p = eq.marginal_cell_probabilities(cell, ax, edges)
            rows.extend([run.grid.centers_1d[cell], ax, x, a, b] for x, a, b in zip(mids, p_hat, p))
    return rows


def first_moment_rows(run: CollisionRun) -> list[list]:
    """Rows ``(c, rho_m_x, rho_m_y, eq_x, eq_y)`` per feature cell, mass form."""
    eq = equilibrium_for_run(run, SpatialDomain())
    dc = run.grid.dc
    rm = rho_m_from_ensemble(run.final, run.grid) * dc
    rho = rho_from_ensemble(run.final, run.grid) * dc
    rm_eq = rho[:, None] * eq.mean
    return [[run.grid.centers_1d[k], *rm[k], *rm_eq[k]] for k in range(run.grid.ncells)]


def first_moment_discrepancy(run: CollisionRun) -> np.ndarray:
    """Per component: ``sum_c |rho m (particles) - rho m_inf| dc`` divided by total mass."""
    eq = equilibrium_for_run(run, SpatialDomain())
    dc = run.grid.dc
    rm_particles = rho_m_from_ensemble(run.final, run.grid) * dc
    rho = rho_from_ensemble(run.final, run.grid)
    rm_eq = (rho * dc)[:, None] * eq.mean
    return np.abs(rm_particles - rm_eq).sum(axis=0) / (rho.sum() * dc)


# --------------------------------------------------------------------------
# split-step particles versus macroscopic solver


@dataclass
class SplitSetup:
    n: int = 20_000
    tau: float = 1e-3
    t_final: float = 20.0
    dt: float = 0.05
    spatial_strength: float = 0.05
    rounds_cap: int = 50
    delta1: float = 0.2
    delta2: float = 0.5
    sigma2: float = 0.01
    theta_f: float = 1.0
    nc: int = 30
    alpha_bins: int = 100
    seed: int = 0


@dataclass
class SplitRun:
    setup: SplitSetup
    rho_final: np.ndarray
    rounds_per_step: int
    history: list = field(default_factory=list)


def homogeneous_ensemble(n: int, gen: np.random.Generator) -> ParticleEnsemble:
    """Positions uniform on the domain, features uniform on [0, 1], independent."""
    pos = gen.uniform(-1.0, 1.0, (n, 2))
    c = gen.uniform(0.0, 1.0, (n, 1))
    return ParticleEnsemble(pos, c, np.zeros((n, 2), dtype=np.int64))


def run_split_particles(setup: SplitSetup) -> SplitRun:
    """Collisions at rate ``1/tau`` followed by an explicit feature transport step, repeated.

    Per interval ``dt`` the collision stage performs ``dt / (tau * strength)``
    rounds of random pairings (each particle once per round), capped at
    ``rounds_cap``. The transport stage moves each feature toward the local
    spatial average with weight ``theta_f * phi(c) * dt``.
    """
    gen = RngStream(setup.seed).generator()
    ens = homogeneous_ensemble(setup.n, gen)
    params = ModelParams(setup.delta1, setup.delta2, setup.sigma2, (0.5,))
    grid = FeatureGrid(1, setup.nc)
    rounds = int(round(setup.dt / (setup.tau * setup.spatial_strength)))
    if setup.rounds_cap is not None:
        rounds = min(rounds, setup.rounds_cap)
    rounds = max(rounds, 1)
    nsteps = int(round(setup.t_final / setup.dt))
    for _ in range(nsteps):
        for _ in range(rounds):
            spatial_pair_round(ens, params, setup.spatial_strength, gen)
        a = local_mean_features_gridded(ens.positions, ens.features, setup.delta1, setup.alpha_bins)
        c = ens.features
        ens.features[:] = np.clip(c + setup.dt * setup.theta_f * phi(c)[:, None] * (a - c), 0.0, 1.0)
    return SplitRun(setup, rho_from_ensemble(ens, grid), rounds)


def uniform_macro_state(grid: FeatureGrid) -> MacroState:
    """Unit-mass uniform density in c with zero windowed first moment."""
    return MacroState(np.ones(grid.shape), np.zeros(grid.shape + (2,)))


def run_split_macro(setup: SplitSetup, flux: str = "upwind", dt_cap: float | None = 0.05) -> MacroRun:
    params = ModelParams(setup.delta1, setup.delta2, setup.sigma2, (0.5,), theta_f=setup.theta_f, theta_b=0.0)
    grid = FeatureGrid(1, setup.nc)
    run = MacroRun(uniform_macro_state(grid), grid, params, flux=flux, dt_cap=dt_cap)
    run_to_time(run, setup.t_final)
    return run


def split_consistency(setups: list[SplitSetup], flux: str = "upwind") -> dict:
    """L1 distance of each particle run's final density to the macroscopic one."""
    macro = run_split_macro(setups[0], flux=flux)
    out = {"macro_rho": macro.state.rho, "mass_audit": macro.mass_audit}
    for s in setups:
        pr = run_split_particles(s)
        out[s.tau] = {
            "rho": pr.rho_final,
            "l1": l1_loss(pr.rho_final, macro.state.rho, macro.grid.dc),
            "rounds": pr.rounds_per_step,
        }
    return out


__all__ = [
    "CollisionSetup",
    "CollisionRun",
    "run_collisions",
    "relative_drift",
    "rms_drift",
    "drift_rate",
    "marginal_l1",
    "first_moment_discrepancy",
    "slice_rows",
    "first_moment_rows",
    "SplitSetup",
    "run_split_particles",
    "run_split_macro",
    "split_consistency",
    "uniform_macro_state",
]
