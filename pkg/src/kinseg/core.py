"""Shared domain types, grids, binning and moment estimators.

Everything downstream works on three objects built here: the particle
ensemble (one particle per pixel), the feature grid on ``[0, 1]^d`` and the
macroscopic state ``(rho, F)`` living on that grid.
"""

from __future__ import annotations

import csv
import json
import warnings
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft as sfft

DOMAIN_LO = -1.0
DOMAIN_HI = 1.0


class ConstantChannelWarning(UserWarning):
    """A channel had max == min; it was mapped to 0.5."""


@dataclass(frozen=True)
class RngStream:
    """Seed plus stream id; identical pairs give identical generators."""

    seed: int = 0
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, k: int) -> "RngStream":
        # Distinct streams for independent repetitions of the same run.
        return RngStream(self.seed, self.stream * 1_000_003 + k + 1)


@dataclass(frozen=True)
class ImageField:
    """Pixel intensities with shape ``(height, width, channels)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) image, got shape {v.shape}")
        if v.shape[0] * v.shape[1] < 1:
            raise ValueError("image has no pixels")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class SpatialDomain:
    """Reconstruction grid on the fixed domain ``[-1, 1]^2``."""

    nx: int = 30
    ny: int = 30

    @property
    def dx(self) -> float:
        return (DOMAIN_HI - DOMAIN_LO) / self.nx

    @property
    def dy(self) -> float:
        return (DOMAIN_HI - DOMAIN_LO) / self.ny

    @property
    def x_centers(self) -> np.ndarray:
        return DOMAIN_LO + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y_centers(self) -> np.ndarray:
        return DOMAIN_LO + (np.arange(self.ny) + 0.5) * self.dy


@lru_cache(maxsize=16)
def _grid_centers(d: int, nc: int) -> np.ndarray:
    c1 = (np.arange(nc) + 0.5) / nc
    out = np.stack(np.meshgrid(*([c1] * d), indexing="ij"), axis=-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FeatureGrid:
    """Uniform grid with ``nc`` cells per axis on ``[0, 1]^d``."""

    d: int = 1
    nc: int = 30

    def __post_init__(self):
        if self.d not in (1, 3):
            raise ValueError("feature dimension must be 1 or 3")
        if self.nc < 1:
            raise ValueError("nc must be positive")

    @property
    def dc(self) -> float:
        return 1.0 / self.nc

    @property
    def cell_volume(self) -> float:
        return self.dc**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nc,) * self.d

    @property
    def ncells(self) -> int:
        return self.nc**self.d

    @property
    def centers_1d(self) -> np.ndarray:
        return (np.arange(self.nc) + 0.5) / self.nc

    @property
    def centers(self) -> np.ndarray:
        """Cell centers as an ``(nc,)*d + (d,)`` array (read-only, shared)."""
        return _grid_centers(self.d, self.nc)

    def bin_index(self, features: np.ndarray) -> np.ndarray:
        """Per-axis cell index; intervals are ``[l, r)`` except the last, which is closed."""
        idx = np.floor(np.asarray(features) * self.nc).astype(np.int64)
        return np.clip(idx, 0, self.nc - 1)

    def flat_index(self, features: np.ndarray) -> np.ndarray:
        idx = self.bin_index(np.atleast_2d(features))
        return np.ravel_multi_index(tuple(idx.T), self.shape)


@dataclass
class ParticleEnsemble:
    """Positions in ``[-1, 1]^2``, features in ``[0, 1]^d`` and pixel identity."""

    positions: np.ndarray
    features: np.ndarray
    pixel_index: np.ndarray
    image_shape: tuple[int, int] = (0, 0)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(
            self.positions.copy(), self.features.copy(), self.pixel_index.copy(), self.image_shape
        )


@dataclass
class MacroState:
    """Feature density ``rho`` (grid shape) and windowed first moment ``F`` (grid shape + (2,))."""

    rho: np.ndarray
    F: np.ndarray

    def mass(self, grid: FeatureGrid) -> float:
        return float(self.rho.sum() * grid.cell_volume)

    def copy(self) -> "MacroState":
        return MacroState(self.rho.copy(), self.F.copy())

    def to_json(self, path: str | Path, grid: FeatureGrid) -> None:
        payload = {
            "d": grid.d,
            "nc": grid.nc,
            "rho": self.rho.tolist(),
            "F": self.F.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path: str | Path) -> tuple["MacroState", FeatureGrid]:
        payload = json.loads(Path(path).read_text())
        grid = FeatureGrid(payload["d"], payload["nc"])
        return cls(np.asarray(payload["rho"], float), np.asarray(payload["F"], float)), grid

    def to_csv(self, path: str | Path, grid: FeatureGrid) -> None:
        centers = grid.centers.reshape(-1, grid.d)
        rho = self.rho.reshape(-1)
        F = self.F.reshape(-1, 2)
        cols = ["c"] if grid.d == 1 else [f"c{i}" for i in range(grid.d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + ["rho", "Fx", "Fy"])
            for k in range(grid.ncells):
                w.writerow([*map(float, centers[k]), float(rho[k]), float(F[k, 0]), float(F[k, 1])])


@dataclass
class ModelParams:
    """Optimised model parameters plus exponents and time-scale weights.

    ``c_max`` and ``alpha_exp`` hold one entry per feature channel. When
    ``alpha_exp`` is None the potential module picks the default exponents.
    """

    delta1: float
    delta2: float
    sigma2: float
    c_max: tuple[float, ...] = (0.5,)
    alpha_exp: tuple[float, ...] | None = None
    theta_s: float = 1.0
    theta_f: float = 1.0
    theta_b: float = 1.0

    def __post_init__(self):
        self.c_max = tuple(float(v) for v in np.atleast_1d(self.c_max))
        if self.alpha_exp is not None:
            self.alpha_exp = tuple(float(v) for v in np.atleast_1d(self.alpha_exp))
        if self.delta1 <= 0:
            raise ValueError("delta1 must be positive")
        if not 0.0 <= self.delta2 <= 1.0 + 1e-12:
            raise ValueError("delta2 must lie in [0, 1]")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")

    @property
    def d(self) -> int:
        return len(self.c_max)

    def with_updates(self, **kw) -> "ModelParams":
        data = asdict(self)
        data.update(kw)
        return ModelParams(**data)

    def to_dict(self) -> dict:
        from .potential import PotentialSpec

        spec = PotentialSpec.from_params(self)
        data = asdict(self)
        data["c_max"] = list(self.c_max)
        data["alpha_exp"] = spec.alpha_exp.tolist()
        data["beta_exp"] = spec.beta_exp.tolist()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        data = {k: v for k, v in data.items() if k != "beta_exp"}
        if data.get("alpha_exp") is not None:
            data["alpha_exp"] = tuple(data["alpha_exp"])
        data["c_max"] = tuple(np.atleast_1d(data["c_max"]))
        return cls(**data)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def normalize_features(image: ImageField) -> ImageField:
    """Per-channel affine map of intensities onto [0, 1]."""
    v = image.values
    out = np.empty_like(v)
    for ch in range(v.shape[2]):
        lo, hi = v[:, :, ch].min(), v[:, :, ch].max()
        if hi > lo:
            out[:, :, ch] = (v[:, :, ch] - lo) / (hi - lo)
        else:
            warnings.warn(
                f"channel {ch} is constant ({lo}); mapped to 0.5", ConstantChannelWarning, stacklevel=2
            )
            out[:, :, ch] = 0.5
    return ImageField(np.clip(out, 0.0, 1.0))


def ensemble_from_image(image: ImageField, domain: SpatialDomain | None = None) -> ParticleEnsemble:
    """One particle per pixel: column maps to x, row maps to y, both onto [-1, 1]."""
    h, w = image.height, image.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    x = DOMAIN_LO + (cols + 0.5) * (DOMAIN_HI - DOMAIN_LO) / w
    y = DOMAIN_LO + (rows + 0.5) * (DOMAIN_HI - DOMAIN_LO) / h
    positions = np.column_stack([x, y])
    features = image.values.reshape(h * w, image.channels).copy()
    pixel_index = np.column_stack([rows, cols]).astype(np.int64)
    return ParticleEnsemble(positions, features, pixel_index, (h, w))


def spatial_bin_index(positions: np.ndarray, spatial: SpatialDomain) -> tuple[np.ndarray, np.ndarray]:
    ix = np.floor((positions[:, 0] - DOMAIN_LO) / spatial.dx).astype(np.int64)
    iy = np.floor((positions[:, 1] - DOMAIN_LO) / spatial.dy).astype(np.int64)
    return np.clip(ix, 0, spatial.nx - 1), np.clip(iy, 0, spatial.ny - 1)


def histogram_density(
    ensemble: ParticleEnsemble, grid: FeatureGrid, spatial: SpatialDomain
) -> np.ndarray:
    """Histogram reconstruction of the joint density, shape ``(nx, ny) + grid.shape``.

    Normalised so that the sum times ``dx * dy * dc^d`` equals one.
    """
    ix, iy = spatial_bin_index(ensemble.positions, spatial)
    kc = grid.flat_index(ensemble.features)
    flat = np.ravel_multi_index((ix, iy, kc), (spatial.nx, spatial.ny, grid.ncells))
    counts = np.bincount(flat, minlength=spatial.nx * spatial.ny * grid.ncells).astype(float)
    vol = spatial.dx * spatial.dy * grid.cell_volume
    return (counts / (ensemble.n * vol)).reshape((spatial.nx, spatial.ny) + grid.shape)


def rho_from_ensemble(ensemble: ParticleEnsemble, grid: FeatureGrid) -> np.ndarray:
    """Feature-marginal histogram as a density on the grid."""
    kc = grid.flat_index(ensemble.features)
    counts = np.bincount(kc, minlength=grid.ncells).astype(float)
    return (counts / (ensemble.n * grid.cell_volume)).reshape(grid.shape)


def rho_m_from_ensemble(ensemble: ParticleEnsemble, grid: FeatureGrid) -> np.ndarray:
    """Raw first spatial moment per feature cell, as a density (grid shape + (2,))."""
    kc = grid.flat_index(ensemble.features)
    out = np.empty((grid.ncells, 2))
    for s in range(2):
        out[:, s] = np.bincount(kc, weights=ensemble.positions[:, s], minlength=grid.ncells)
    return (out / (ensemble.n * grid.cell_volume)).reshape(grid.shape + (2,))


def _window_kernel(grid: FeatureGrid, delta2: float) -> np.ndarray:
    r = int(np.ceil(delta2 * grid.nc))
    offs = np.arange(-r, r + 1)
    mesh = np.meshgrid(*([offs] * grid.d), indexing="ij")
    dist2 = sum(m.astype(float) ** 2 for m in mesh)
    # strict inequality |c - c*| < delta2, compared in cell units
    return (dist2 < (delta2 * grid.nc) ** 2 * (1 - 1e-12)).astype(float)


def window_matrix(grid: FeatureGrid, delta2: float) -> np.ndarray:
    """Dense ``chi(|c_k - c_j| < delta2)`` matrix (d = 1 only)."""
    c = grid.centers_1d
    diff = np.abs(np.arange(grid.nc)[:, None] - np.arange(grid.nc)[None, :]).astype(float)
    del c
    return (diff < delta2 * grid.nc * (1 - 1e-12)).astype(float)


@lru_cache(maxsize=32)
def _window_kernel_fft(d: int, nc: int, delta2: float):
    """Real FFT of the window kernel on the padded grid used for linear convolution."""
    K = _window_kernel(FeatureGrid(d, nc), delta2)
    r = K.shape[0] // 2
    size = tuple(sfft.next_fast_len(nc + 2 * r, real=True) for _ in range(d))
    return sfft.rfftn(K, s=size), size, r


def window_sum(field_: np.ndarray, grid: FeatureGrid, delta2: float) -> np.ndarray:
    """``sum_j chi(|c_k - c_j| < delta2) field_j dc^d`` for a grid field with optional trailing axes.

    Euclidean distance between cell centers for d = 3, absolute value for d = 1.
    """
    extra = field_.shape[grid.d:]
    if grid.d == 1:
        W = window_matrix(grid, delta2)
        out = np.tensordot(W, field_, axes=(1, 0))
    else:
        kf, size, r = _window_kernel_fft(grid.d, grid.nc, float(delta2))
        flat = np.moveaxis(field_.reshape(grid.shape + (-1,)), -1, 0)
        axes = tuple(range(1, grid.d + 1))
        full = sfft.irfftn(sfft.rfftn(flat, s=size, axes=axes) * kf, s=size, axes=axes)
        sl = (slice(None),) + (slice(r, r + grid.nc),) * grid.d
        out = np.moveaxis(full[sl], 0, -1).reshape(grid.shape + extra)
    return out * grid.cell_volume


def f_cant_from_ensemble(ensemble: ParticleEnsemble, grid: FeatureGrid, delta2: float) -> np.ndarray:
    """Windowed first moment ``F(c) = int chi(|c - c*| < delta2) rho m dc*`` per feature cell."""
    return window_sum(rho_m_from_ensemble(ensemble, grid), grid, delta2)


def macro_state_from_ensemble(
    ensemble: ParticleEnsemble, grid: FeatureGrid, delta2: float
) -> MacroState:
    return MacroState(rho_from_ensemble(ensemble, grid), f_cant_from_ensemble(ensemble, grid, delta2))


def ensemble_hash(ensemble: ParticleEnsemble) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ensemble.positions).tobytes())
    h.update(np.ascontiguousarray(ensemble.features).tobytes())
    return h.hexdigest()


def as_channel_tuple(value: float | Sequence[float], d: int) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.repeat(arr, d)
    if arr.size != d:
        raise ValueError(f"expected {d} per-channel values, got {arr.size}")
    return tuple(float(v) for v in arr)


__all__ = [
    "ConstantChannelWarning",
    "RngStream",
    "ImageField",
    "SpatialDomain",
    "FeatureGrid",
    "ParticleEnsemble",
    "MacroState",
    "ModelParams",
    "normalize_features",
    "ensemble_from_image",
    "histogram_density",
    "rho_from_ensemble",
    "rho_m_from_ensemble",
    "f_cant_from_ensemble",
    "window_sum",
    "window_matrix",
    "macro_state_from_ensemble",
    "ensemble_hash",
    "as_channel_tuple",
    "field",
]
