"""Double-well binarization potential and the confidence modulation ``phi``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InadmissibleExponent


def default_alpha(c_max: float) -> float:
    """Smallest-margin admissible exponent used when none is given."""
    return max(1.0, c_max / (1.0 - c_max)) + 1.0


@dataclass(frozen=True)
class PotentialSpec:
    """``V(c) = sum_i A_i c_i^a_i (1 - c_i)^b_i`` with its maximum ``d/4`` at ``c_max``."""

    c_max: np.ndarray
    alpha_exp: np.ndarray
    beta_exp: np.ndarray
    norm_const: np.ndarray

    @property
    def d(self) -> int:
        return int(self.c_max.size)

    @classmethod
    def from_params(cls, params) -> "PotentialSpec":
        return validate_exponents(params.c_max, params.alpha_exp)

    def value(self, c: np.ndarray) -> np.ndarray:
        return potential_value(self, c)

    def gradient(self, c: np.ndarray) -> np.ndarray:
        return potential_gradient(self, c)

    def lipschitz_bound(self, samples: int = 4001) -> float:
        """Numerical bound on ``|V''|`` per axis, for picking a stable binarization step."""
        t = np.linspace(0.0, 1.0, samples)
        worst = 0.0
        for i in range(self.d):
            g = _axis_gradient(t, self.alpha_exp[i], self.beta_exp[i], self.norm_const[i])
            worst = max(worst, float(np.max(np.abs(np.diff(g)) / np.diff(t))))
        return worst


def validate_exponents(c_max, alpha_exp=None) -> PotentialSpec:
    c_max = np.atleast_1d(np.asarray(c_max, dtype=float))
    if np.any((c_max <= 0) | (c_max >= 1)):
        raise InadmissibleExponent(f"c_max must lie in (0, 1), got {c_max.tolist()}")
    if alpha_exp is None:
        alpha = np.array([default_alpha(float(cm)) for cm in c_max])
    else:
        alpha = np.atleast_1d(np.asarray(alpha_exp, dtype=float))
        if alpha.size == 1 and c_max.size > 1:
            alpha = np.repeat(alpha, c_max.size)
        if alpha.size != c_max.size:
            raise InadmissibleExponent("alpha_exp and c_max must have the same length")
    bound = np.maximum(1.0, c_max / (1.0 - c_max))
    bad = np.flatnonzero(alpha <= bound)
    if bad.size:
        i = int(bad[0])
        raise InadmissibleExponent(
            f"channel {i}: alpha={alpha[i]} must exceed max(1, c_max/(1-c_max))={bound[i]:.6g}"
        )
    beta = alpha * (1.0 - c_max) / c_max
    norm = 1.0 / (4.0 * c_max**alpha * (1.0 - c_max) ** beta)
    return PotentialSpec(c_max, alpha, beta, norm)


def _as_points(spec: PotentialSpec, c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if spec.d == 1 and (c.ndim == 0 or c.shape[-1] != 1):
        c = c[..., None]
    return c


def potential_value(spec: PotentialSpec, c) -> np.ndarray:
    c = _as_points(spec, c)
    terms = spec.norm_const * c**spec.alpha_exp * (1.0 - c) ** spec.beta_exp
    return terms.sum(axis=-1)


def _axis_gradient(c, a, b, A):
    return A * c ** (a - 1.0) * (1.0 - c) ** (b - 1.0) * (a * (1.0 - c) - b * c)


def potential_gradient(spec: PotentialSpec, c) -> np.ndarray:
    """Gradient with the same trailing shape as ``c`` (a trailing axis of length d)."""
    c = _as_points(spec, c)
    return _axis_gradient(c, spec.alpha_exp, spec.beta_exp, spec.norm_const)


def phi(c, d: int | None = None) -> np.ndarray:
    """``d/2 - sum_l |c_l - 1/2|``; input has a trailing feature axis unless ``d == 1`` scalars are passed."""
    c = np.asarray(c, dtype=float)
    if d == 1 and (c.ndim == 0 or c.shape[-1] != 1):
        c = c[..., None]
    d = c.shape[-1]
    return d / 2.0 - np.abs(c - 0.5).sum(axis=-1)


__all__ = [
    "PotentialSpec",
    "default_alpha",
    "validate_exponents",
    "potential_value",
    "potential_gradient",
    "phi",
]
