"""Particle solvers: Nanbu-type spatial collisions, feature transport and binarization.

Positions live in ``[-1, 1]^2`` and are reflected at the boundary. The
spatial noise ``eta`` has per-component variance 1/2, so that the particle
system relaxes to a Gaussian of variance ``sigma2 / (2 R)`` in each spatial
direction, which is the closed-form quasi-equilibrium used by the
macroscopic model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FeatureGrid,
    ModelParams,
    ParticleEnsemble,
    RngStream,
    f_cant_from_ensemble,
    rho_from_ensemble,
    rho_m_from_ensemble,
)
from .neighbors import local_mean_features
from .potential import PotentialSpec, phi

log = logging.getLogger(__name__)

NOISE_COMPONENT_VAR = 0.5


def reflect(positions: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Fold coordinates back into ``[lo, hi]`` by mirror reflection (any overshoot size)."""
    span = hi - lo
    y = np.mod(positions - lo, 2.0 * span)
    y = np.where(y > span, 2.0 * span - y, y)
    return y + lo


def _gen(rng) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


def feature_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Absolute difference for one channel, Euclidean norm otherwise."""
    if a.shape[-1] == 1:
        return np.abs(a[..., 0] - b[..., 0])
    return np.linalg.norm(a - b, axis=-1)


def _pair_update(ens, i, j, strength, noise_amp, delta2, gen):
    xi, xj = ens.positions[i], ens.positions[j]
    P = (feature_distance(ens.features[i], ens.features[j]) < delta2).astype(float)[:, None]
    scale = noise_amp * np.sqrt(NOISE_COMPONENT_VAR)
    new_i = xi + strength * P * (xj - xi) + scale * gen.standard_normal(xi.shape)
    new_j = xj + strength * P * (xi - xj) + scale * gen.standard_normal(xj.shape)
    ens.positions[i] = reflect(new_i)
    ens.positions[j] = reflect(new_j)


def nanbu_spatial_step(
    ensemble: ParticleEnsemble,
    params: ModelParams,
    epsilon: float,
    dt: float,
    rng,
    symmetric: bool = True,
) -> ParticleEnsemble:
    """One collision step of duration ``dt`` for interaction strength ``epsilon`` (in place).

    ``symmetric=True`` pairs particles through a random permutation and
    updates both members of each selected pair. ``symmetric=False`` is the
    one-sided variant: each selected particle moves toward a random partner
    which itself is left untouched.
    """
    if not dt < epsilon:
        raise ValueError(f"dt={dt} must be smaller than epsilon={epsilon}")
    gen = _gen(rng)
    n = ensemble.n
    p = dt / epsilon
    amp = np.sqrt(2.0 * params.sigma2 * epsilon)
    if symmetric:
        perm = gen.permutation(n)
        npairs = n // 2
        sel = gen.random(npairs) < p
        i = perm[0 : 2 * npairs : 2][sel]
        j = perm[1 : 2 * npairs : 2][sel]
        _pair_update(ensemble, i, j, epsilon, amp, params.delta2, gen)
    else:
        sel = np.flatnonzero(gen.random(n) < p)
        partner = gen.integers(0, n - 1, size=sel.size)
        partner += partner >= sel
        x = ensemble.positions
        P = (feature_distance(ensemble.features[sel], ensemble.features[partner]) < params.delta2)
        noise = amp * np.sqrt(NOISE_COMPONENT_VAR) * gen.standard_normal((sel.size, 2))
        new = x[sel] + epsilon * P[:, None] * (x[partner] - x[sel]) + noise
        x[sel] = reflect(new)
    return ensemble


def spatial_pair_round(ensemble: ParticleEnsemble, params: ModelParams, strength: float, rng) -> None:
    """Every particle (but one when N is odd) interacts once with a random partner."""
    gen = _gen(rng)
    n = ensemble.n
    perm = gen.permutation(n)
    npairs = n // 2
    amp = np.sqrt(2.0 * params.sigma2 * strength)
    _pair_update(ensemble, perm[0 : 2 * npairs : 2], perm[1 : 2 * npairs : 2], strength, amp, params.delta2, gen)


def _phi_column(c: np.ndarray) -> np.ndarray:
    return phi(c)[:, None]


def feature_transport_step(
    ensemble: ParticleEnsemble,
    params: ModelParams,
    epsilon: float,
    alpha: np.ndarray | None = None,
    subset: np.ndarray | None = None,
) -> ParticleEnsemble:
    """``c <- c + epsilon * phi(c) * (alpha(x) - c)``, in place.

    The local average ``alpha`` is computed from the current positions unless
    it is supplied (one row per particle).
    """
    d = ensemble.d
    if epsilon * d / 2.0 > 1.0 + 1e-12:
        raise ValueError(f"epsilon={epsilon} too large: epsilon * d/2 must not exceed 1")
    if alpha is None:
        alpha = local_mean_features(ensemble.positions, ensemble.features, params.delta1)
    idx = slice(None) if subset is None else subset
    c = ensemble.features[idx]
    a = alpha[idx]
    w = epsilon * _phi_column(c)
    ensemble.features[idx] = np.clip((1.0 - w) * c + w * a, 0.0, 1.0)
    return ensemble


def binarization_step(
    ensemble: ParticleEnsemble, spec: PotentialSpec, epsilon: float, subset: np.ndarray | None = None
) -> ParticleEnsemble:
    """Explicit Euler step on ``-grad V``, in place."""
    idx = slice(None) if subset is None else subset
    c = ensemble.features[idx]
    ensemble.features[idx] = np.clip(c - epsilon * spec.gradient(c), 0.0, 1.0)
    return ensemble


def _round_even(x: float) -> int:
    return int(np.rint(x))


@dataclass(frozen=True)
class SplitRates:
    """Time scales of the three mechanisms and the per-substep particle counts they imply."""

    tau1: float
    tau2: float
    n: int
    theta_b: float = 1.0

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("tau1 and tau2 must be positive")

    @property
    def eps_tilde(self) -> float:
        return self.tau1 * self.tau2 / (self.tau1 + self.tau2)

    @property
    def n1(self) -> int:
        v = _round_even(self.eps_tilde / self.tau1 * self.n)
        return v - (v % 2)

    @property
    def n2(self) -> int:
        return _round_even(self.eps_tilde / self.tau2 * self.n)

    @property
    def n3(self) -> int:
        return _round_even(self.eps_tilde * self.n)

    @property
    def n_pairs(self) -> int:
        return self.n1 // 2


@dataclass
class Algorithm1Options:
    """Knobs for the aggregated particle run.

    ``dt`` is the splitting interval in macroscopic time. Within each interval
    the spatial mechanism performs ``dt / (eps_tilde * tau1)`` pair rounds,
    capped at ``spatial_rounds_cap``; transport and binarization apply
    binomially distributed numbers of ``eps_tilde``-sized updates per
    particle with the local average frozen over the interval.
    """

    dt: float = 0.01
    spatial_rounds_cap: int | None = 200
    check_domain: bool = True


@dataclass
class Algorithm1Trace:
    times: list = field(default_factory=list)
    spatial_rounds: list = field(default_factory=list)


def _repeat_map(c: np.ndarray, counts: np.ndarray, step) -> np.ndarray:
    """Apply ``step`` to row i of ``c`` exactly ``counts[i]`` times."""
    c = c.copy()
    kmax = int(counts.max()) if counts.size else 0
    for k in range(kmax):
        active = counts > k
        if not active.any():
            break
        c[active] = step(c[active], active)
    return c


def run_algorithm1(
    ensemble: ParticleEnsemble,
    params: ModelParams,
    rates: SplitRates,
    t_final: float,
    rng,
    options: Algorithm1Options | None = None,
    spec: PotentialSpec | None = None,
) -> tuple[ParticleEnsemble, Algorithm1Trace]:
    """Sequential spatial / transport / binarization splitting up to ``t_final`` (in place).

    Time is measured in the units of the macroscopic system, so spatial,
    transport and binarization drifts act at rates ``1/tau1``, ``1/tau2`` and
    ``theta_b`` respectively with individual update strength ``eps_tilde``.
    """
    opts = options or Algorithm1Options()
    spec = spec or PotentialSpec.from_params(params)
    gen = _gen(rng)
    eps = rates.eps_tilde
    n = ensemble.n
    trace = Algorithm1Trace()
    nsteps = int(np.ceil(t_final / opts.dt - 1e-9)) if t_final > 0 else 0
    substeps = opts.dt / eps**2
    p_transport = min(1.0, eps / rates.tau2)
    p_binar = min(1.0, eps * rates.theta_b)
    rounds_exact = opts.dt / (eps * rates.tau1)
    rounds = int(np.rint(rounds_exact))
    if opts.spatial_rounds_cap is not None:
        rounds = min(rounds, opts.spatial_rounds_cap)
    if params.sigma2 == 0 and params.delta2 == 0:
        rounds = 0
    m = int(np.rint(substeps))
    for step in range(nsteps):
        for _ in range(rounds):
            spatial_pair_round(ensemble, params, eps, gen)

        alpha = local_mean_features(ensemble.positions, ensemble.features, params.delta1)
        k_t = gen.binomial(m, p_transport, size=n)
        ensemble.features[:] = _repeat_map(
            ensemble.features,
            k_t,
            lambda c, act: np.clip(c + eps * _phi_column(c) * (alpha[act] - c), 0.0, 1.0),
        )
        k_b = gen.binomial(m, p_binar, size=n)
        ensemble.features[:] = _repeat_map(
            ensemble.features, k_b, lambda c, act: np.clip(c - eps * spec.gradient(c), 0.0, 1.0)
        )
        if opts.check_domain:
            assert np.all((ensemble.features >= 0) & (ensemble.features <= 1))
            assert np.all(np.abs(ensemble.positions) <= 1.0)
        trace.times.append((step + 1) * opts.dt)
        trace.spatial_rounds.append(rounds)
    return ensemble, trace


def estimate_moments(ensemble: ParticleEnsemble, grid: FeatureGrid, delta2: float):
    """Per feature cell: density, windowed first moment and raw first moment (density form)."""
    return (
        rho_from_ensemble(ensemble, grid),
        f_cant_from_ensemble(ensemble, grid, delta2),
        rho_m_from_ensemble(ensemble, grid),
    )


__all__ = [
    "reflect",
    "nanbu_spatial_step",
    "spatial_pair_round",
    "feature_transport_step",
    "binarization_step",
    "SplitRates",
    "Algorithm1Options",
    "run_algorithm1",
    "estimate_moments",
]
