"""Additive and multiplicative noise models with separate shape/background intensities."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ImageField, RngStream
from .errors import NonPositivePoissonScale


class NoiseFamily(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    SPECKLE = "speckle"
    POISSON = "poisson"


@dataclass(frozen=True)
class NoiseSpec:
    """Noise family plus per-channel intensities inside and outside the shape.

    Gaussian and speckle intensities are variances, uniform intensities are
    half-widths and Poisson intensities are scale factors.
    """

    family: NoiseFamily
    intensity_shape: tuple[float, ...]
    intensity_background: tuple[float, ...]
    region_mask: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", NoiseFamily(self.family))
        shp = tuple(float(v) for v in np.atleast_1d(self.intensity_shape))
        bkg = tuple(float(v) for v in np.atleast_1d(self.intensity_background))
        object.__setattr__(self, "intensity_shape", shp)
        object.__setattr__(self, "intensity_background", bkg)
        if self.family is NoiseFamily.POISSON:
            if min(shp + bkg) <= 0:
                raise NonPositivePoissonScale(f"Poisson scale must be positive, got {shp}, {bkg}")
        elif min(shp + bkg) < 0:
            raise ValueError("noise intensities must be non-negative")

    def per_pixel_intensity(self, shape: tuple[int, int], channels: int) -> np.ndarray:
        """Intensity map of shape ``(H, W, channels)`` selected by the region mask."""
        fg = np.broadcast_to(np.asarray(self.intensity_shape), (channels,))
        bg = np.broadcast_to(np.asarray(self.intensity_background), (channels,))
        if self.region_mask is None:
            region = np.zeros(shape, dtype=bool)
        else:
            region = np.asarray(self.region_mask, dtype=bool)
            if region.shape != shape:
                raise ValueError(f"region mask shape {region.shape} != image shape {shape}")
        return np.where(region[:, :, None], fg, bg)


def apply_noise(image: ImageField, spec: NoiseSpec, rng: RngStream | np.random.Generator) -> ImageField:
    """Corrupt raw intensities; no clipping is applied afterwards."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    I = image.values
    level = spec.per_pixel_intensity(I.shape[:2], I.shape[2])
    fam = spec.family
    if fam is NoiseFamily.GAUSSIAN:
        out = I + np.sqrt(level) * gen.standard_normal(I.shape)
    elif fam is NoiseFamily.UNIFORM:
        out = I + level * gen.uniform(-1.0, 1.0, I.shape)
    elif fam is NoiseFamily.SPECKLE:
        out = I * (1.0 + np.sqrt(level) * gen.standard_normal(I.shape))
    else:
        if np.any(I < 0):
            raise ValueError("Poisson noise needs non-negative intensities")
        out = level * gen.poisson(I / level).astype(float)
    return ImageField(out)


__all__ = ["NoiseFamily", "NoiseSpec", "apply_noise"]
