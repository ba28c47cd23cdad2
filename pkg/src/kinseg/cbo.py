"""Consensus-based optimization over a box of model parameters."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import RngStream
from .errors import AllLossesInfinite, ConfigError, KinsegError

log = logging.getLogger(__name__)

# Parameter vector layout: (delta1, delta2, sigma2, c_max_1, ..., c_max_k)
DEFAULT_LOWER = (1e-3, 1e-3, 1e-4, 0.05)
DEFAULT_UPPER = (2.0, 1.0, 0.5, 0.95)


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError("box bounds must be 1-D sequences of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigError("box bounds must be finite")
        if np.any(lo >= hi):
            raise ConfigError("every lower bound must be strictly below its upper bound")

    @classmethod
    def for_channels(cls, n_cmax: int = 1) -> "Box":
        """Default box with ``n_cmax`` double-well maxima."""
        return cls(
            DEFAULT_LOWER[:3] + (DEFAULT_LOWER[3],) * n_cmax,
            DEFAULT_UPPER[:3] + (DEFAULT_UPPER[3],) * n_cmax,
        )

    @property
    def dim(self) -> int:
        return len(self.lower)

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, np.asarray(self.lower), np.asarray(self.upper))

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return lo + (hi - lo) * gen.random((n, self.dim))


@dataclass
class CboConfig:
    n_particles: int = 64
    n_iterations: int = 640
    lam: float = 1.0
    sigma_cbo: float = float(np.sqrt(0.5))
    alpha_gibbs: float = 12.0
    dt: float = 0.1
    box: Box = field(default_factory=Box.for_channels)
    isotropic: bool = True
    quantum: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1 or self.n_iterations < 0:
            raise ConfigError("need at least one particle and a non-negative iteration count")
        if self.lam <= 0 or self.sigma_cbo < 0 or self.alpha_gibbs <= 0 or self.dt <= 0:
            raise ConfigError("lam, alpha_gibbs and dt must be positive; sigma_cbo non-negative")

    @property
    def rng(self) -> RngStream:
        return RngStream(self.seed, stream=7)


@dataclass
class CboState:
    positions: np.ndarray  # (N_p, dim)
    losses: np.ndarray  # (N_p,)
    consensus: np.ndarray
    best_x: np.ndarray
    best_loss: float
    iteration: int = 0


@dataclass
class HistoryRow:
    iteration: int
    best_loss: float
    consensus: np.ndarray
    min_loss: float


def consensus_point(positions: np.ndarray, losses: np.ndarray, alpha_gibbs: float) -> np.ndarray:
    """Gibbs-weighted mean of ``positions`` with weights ``exp(-alpha * loss)``.

    Non-finite losses get zero weight. Losses are shifted by their minimum
    before exponentiating, which keeps the weights finite for any alpha.
    """
    x = np.asarray(positions, float)
    f = np.asarray(losses, float)
    ok = np.isfinite(f)
    if not ok.any():
        raise AllLossesInfinite("no particle has a finite loss")
    logits = -alpha_gibbs * (f[ok] - f[ok].min())
    w = np.exp(logits - logsumexp(logits))
    c = w @ x[ok]
    # roundoff can push a convex combination a hair outside the hull
    return np.clip(c, x[ok].min(axis=0), x[ok].max(axis=0))


class MemoObjective:
    """Caches objective values on parameter vectors rounded to ``quantum``.

    Exceptions raised by the wrapped callable (library errors, floating point
    failures) become ``+inf`` so that a single bad particle does not abort a run.
    """

    def __init__(self, fn: Callable[[np.ndarray], float], quantum: float = 1e-6):
        self.fn = fn
        self.quantum = quantum
        self.cache: dict[tuple, float] = {}
        self.calls = 0
        self.failures = 0

    def key(self, x: np.ndarray) -> tuple:
        return tuple(np.rint(np.asarray(x) / self.quantum).astype(np.int64).tolist())

    def __call__(self, x: np.ndarray) -> float:
        k = self.key(x)
        hit = self.cache.get(k)
        if hit is not None:
            return hit
        self.calls += 1
        try:
            val = float(self.fn(np.asarray(x, float)))
        except (KinsegError, FloatingPointError, ValueError, ZeroDivisionError) as exc:
            log.debug("objective failed at %s: %s", x, exc)
            self.failures += 1
            val = np.inf
        if not np.isfinite(val):
            val = np.inf
        self.cache[k] = val
        return val

    def evaluate(self, xs: np.ndarray) -> np.ndarray:
        return np.array([self(x) for x in xs])


def init_state(config: CboConfig, objective: MemoObjective, gen: np.random.Generator, x0=None) -> CboState:
    x = config.box.sample(config.n_particles, gen) if x0 is None else config.box.project(np.array(x0, float))
    f = objective.evaluate(x)
    c = consensus_point(x, f, config.alpha_gibbs)
    i = int(np.argmin(f))
    return CboState(x, f, c, x[i].copy(), float(f[i]))


def cbo_step(state: CboState, config: CboConfig, objective, gen: np.random.Generator) -> CboState:
    """One Euler-Maruyama step toward the consensus point, projection, re-evaluation."""
    x = state.positions
    c = consensus_point(x, state.losses, config.alpha_gibbs)
    diff = x - c
    if config.isotropic:
        amp = np.linalg.norm(diff, axis=1, keepdims=True)
    else:
        amp = np.abs(diff)
    xi = gen.standard_normal(x.shape)
    x_new = x - config.lam * config.dt * diff + config.sigma_cbo * np.sqrt(config.dt) * amp * xi
    x_new = config.box.project(x_new)
    f = objective.evaluate(x_new) if isinstance(objective, MemoObjective) else np.array([objective(p) for p in x_new])
    i = int(np.argmin(f))
    best_x, best_loss = state.best_x, state.best_loss
    if f[i] < best_loss:
        best_x, best_loss = x_new[i].copy(), float(f[i])
    state.positions = x_new
    state.losses = f
    state.consensus = consensus_point(x_new, f, config.alpha_gibbs) if np.isfinite(f).any() else c
    state.best_x = best_x
    state.best_loss = best_loss
    state.iteration += 1
    return state


@dataclass
class CboResult:
    x: np.ndarray
    loss: float
    history: list
    state: CboState
    evaluations: int


def optimize(
    objective: Callable[[np.ndarray], float],
    config: CboConfig,
    x0: np.ndarray | None = None,
    callback: Callable[[CboState], None] | None = None,
) -> CboResult:
    """Minimise ``objective`` over ``config.box``; returns the incumbent and a per-iteration trace."""
    memo = objective if isinstance(objective, MemoObjective) else MemoObjective(objective, config.quantum)
    gen = config.rng.generator()
    state = init_state(config, memo, gen, x0)
    history = [HistoryRow(0, state.best_loss, state.consensus.copy(), float(np.min(state.losses)))]
    for _ in range(config.n_iterations):
        cbo_step(state, config, memo, gen)
        history.append(HistoryRow(state.iteration, state.best_loss, state.consensus.copy(), float(np.min(state.losses))))
        if callback is not None:
            callback(state)
        if state.iteration % 10 == 0:
            log.info("cbo iter %d best %.5g evals %d", state.iteration, state.best_loss, memo.calls)
    return CboResult(state.best_x.copy(), state.best_loss, history, state, memo.calls)


def write_history_csv(history: Sequence[HistoryRow], path, names: Sequence[str] | None = None) -> None:
    dim = len(history[0].consensus) if history else 0
    names = list(names) if names is not None else [f"x{i}" for i in range(dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "best_loss", "min_loss"] + [f"consensus_{n}" for n in names])
        for row in history:
            w.writerow([row.iteration, repr(row.best_loss), repr(row.min_loss)] + [repr(float(v)) for v in row.consensus])


def landscape(
    objective: Callable[[np.ndarray], float],
    base: np.ndarray,
    axes: tuple[int, int],
    values: tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    """Loss on a 2-D grid varying two coordinates of ``base``; failures give ``inf``."""
    memo = objective if isinstance(objective, MemoObjective) else MemoObjective(objective)
    a, b = axes
    va, vb = (np.asarray(v, float) for v in values)
    out = np.empty((va.size, vb.size))
    for i, p in enumerate(va):
        for j, q in enumerate(vb):
            x = np.array(base, float)
            x[a], x[b] = p, q
            out[i, j] = memo(x)
    return out


__all__ = [
    "Box",
    "CboConfig",
    "CboState",
    "CboResult",
    "MemoObjective",
    "consensus_point",
    "cbo_step",
    "init_state",
    "optimize",
    "landscape",
    "write_history_csv",
]
