"""End-to-end segmentation: image synthesis, noise, macroscopic fitting, particle masks."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .cbo import Box, CboConfig, MemoObjective, optimize
from .config import SHAPES, RunConfig
from .core import (
    FeatureGrid,
    ImageField,
    MacroState,
    ModelParams,
    ParticleEnsemble,
    RngStream,
    SpatialDomain,
    ensemble_from_image,
    macro_state_from_ensemble,
    normalize_features,
    rho_from_ensemble,
)
from .errors import KinsegError, MissingArtifact, ShapeTooLarge
from .macrosolver import MacroRun, l1_loss, marginals, rho_gtsm_from_mask, run_to_time
from .microsim import Algorithm1Options, SplitRates, run_algorithm1
from .noise import NoiseSpec, apply_noise

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# synthetic images


def shape_mask(shape: str, dims: tuple[int, int] = (40, 40), size: int = 20) -> np.ndarray:
    """Boolean indicator of a centred shape whose bounding box is ``size`` pixels.

    Square: side ``size``. Circle: diameter ``size``. Triangle: isosceles,
    apex up, base and height ``size``. Rhombus: both diagonals ``size``.
    """
    h, w = dims
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    if size > min(h, w):
        raise ShapeTooLarge(f"shape of size {size} does not fit in {h}x{w}")
    y, x = np.mgrid[0:h, 0:w].astype(float)
    y = y + 0.5 - h / 2.0
    x = x + 0.5 - w / 2.0
    r = size / 2.0
    if shape == "square":
        return (np.abs(x) < r) & (np.abs(y) < r)
    if shape == "circle":
        return x * x + y * y < r * r
    if shape == "rhombus":
        return np.abs(x) + np.abs(y) < r
    # triangle: rows grow from the apex at y=-r to the base at y=+r
    return (y > -r) & (y < r) & (np.abs(x) < 0.5 * (y + r))


def generate_shape_image(
    shape: str,
    dims: tuple[int, int] = (40, 40),
    size: int = 20,
    fg: float | Sequence[float] = 200.0,
    bg: float | Sequence[float] = 50.0,
    channels: int = 1,
) -> tuple[ImageField, np.ndarray]:
    """Filled shape at ``fg`` on a ``bg`` background; returns the image and its (H, W) mask."""
    mask = shape_mask(shape, dims, size)
    fgv = np.broadcast_to(np.atleast_1d(np.asarray(fg, float)), (channels,))
    bgv = np.broadcast_to(np.atleast_1d(np.asarray(bg, float)), (channels,))
    img = np.where(mask[:, :, None], fgv, bgv)
    return ImageField(img), mask


def load_image(path: str | Path) -> ImageField:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=float)
    return ImageField(arr)


def load_mask(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(mask, bool) * 255).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# metrics


def dice(mask: np.ndarray, gtsm: np.ndarray) -> float:
    a = np.asarray(mask, bool)
    b = np.asarray(gtsm, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


# --------------------------------------------------------------------------
# problem setup


@dataclass
class SegmentationProblem:
    """Everything the objective and the particle stage need, derived from one noisy image."""

    noisy: ImageField
    features: ImageField  # normalised
    gtsm: np.ndarray | None  # (H, W, d) feature-space mask in {0, 1}
    grid: FeatureGrid
    spatial: SpatialDomain
    ensemble: ParticleEnsemble
    rho_init: np.ndarray

    @property
    def d(self) -> int:
        return self.grid.d

    def target(self) -> np.ndarray:
        if self.gtsm is None:
            raise MissingArtifact("no ground-truth mask available for this image")
        return rho_gtsm_from_mask(self.gtsm, self.grid)

    def initial_state(self, delta2: float) -> MacroState:
        return macro_state_from_ensemble(self.ensemble, self.grid, delta2)


def gtsm_features(mask: np.ndarray, channels: int, fg_color: Sequence[float] | None = None) -> np.ndarray:
    """Expand an (H, W) shape mask to binary per-channel features.

    Inside the shape each channel takes the foreground colour bit (1 by
    default); outside it takes the complement.
    """
    m = np.asarray(mask, bool)
    color = np.ones(channels, bool) if fg_color is None else np.asarray(fg_color, bool)
    return np.where(m[:, :, None], color, ~color).astype(float)


def build_problem(
    noisy: ImageField,
    gtsm: np.ndarray | None,
    nc: int = 30,
    spatial: SpatialDomain | None = None,
) -> SegmentationProblem:
    feats = normalize_features(noisy)
    grid = FeatureGrid(feats.channels, nc)
    spatial = spatial or SpatialDomain()
    ens = ensemble_from_image(feats, spatial)
    g = None
    if gtsm is not None:
        g = np.asarray(gtsm, float)
        if g.ndim == 2:
            g = gtsm_features(g, feats.channels)
    return SegmentationProblem(noisy, feats, g, grid, spatial, ens, rho_from_ensemble(ens, grid))


# --------------------------------------------------------------------------
# macroscopic objective


def params_to_vector(p: ModelParams) -> np.ndarray:
    return np.array([p.delta1, p.delta2, p.sigma2, *p.c_max], float)


def vector_to_params(x: np.ndarray, template: ModelParams) -> ModelParams:
    """Rebuild parameters from ``(delta1, delta2, sigma2, c_max...)``; one c_max is broadcast to all channels."""
    x = np.asarray(x, float)
    cm = x[3:]
    if cm.size == 1 and template.d > 1:
        cm = np.repeat(cm, template.d)
    return template.with_updates(delta1=float(x[0]), delta2=float(x[1]), sigma2=float(x[2]), c_max=tuple(cm), alpha_exp=None)


def solve_macro(
    problem: SegmentationProblem,
    params: ModelParams,
    t_final: float,
    flux: str = "upwind",
    steady_tol: float | None = None,
    callback=None,
    refresh_dt: float = 0.0,
) -> MacroRun:
    run = MacroRun(
        problem.initial_state(params.delta2), problem.grid, params, problem.spatial, flux=flux, refresh_dt=refresh_dt
    )
    run_to_time(run, t_final, steady_tol=steady_tol, callback=callback)
    return run


def macro_loss(
    problem: SegmentationProblem,
    params: ModelParams,
    t_final: float,
    flux: str = "upwind",
    steady_tol: float | None = None,
    refresh_dt: float = 0.0,
) -> float:
    run = solve_macro(problem, params, t_final, flux, steady_tol, refresh_dt=refresh_dt)
    return l1_loss(run.state.rho, problem.target(), problem.grid.cell_volume)


def make_objective(
    problem: SegmentationProblem,
    template: ModelParams,
    t_final: float,
    flux: str = "upwind",
    steady_tol: float | None = None,
    refresh_dt: float = 0.0,
) -> Callable[[np.ndarray], float]:
    def objective(x: np.ndarray) -> float:
        return macro_loss(problem, vector_to_params(x, template), t_final, flux, steady_tol, refresh_dt)

    return objective


# --------------------------------------------------------------------------
# particle masks


@dataclass
class MaskRuns:
    channel_votes: np.ndarray  # (H, W, d) fraction of runs in which the channel ended above 0.5
    channel_masks: np.ndarray  # (H, W, d) bool, votes thresholded at 0.5
    final_features: list = field(default_factory=list)


def particle_masks(
    problem: SegmentationProblem,
    params: ModelParams,
    t_final: float,
    n_runs: int = 1,
    seed: int = 0,
    tau1: float = 1e-3,
    tau2: float | None = None,
    options: Algorithm1Options | None = None,
) -> MaskRuns:
    """Run the particle scheme ``n_runs`` times and average the binarised features per pixel.

    Each particle keeps its pixel of origin, so the mask is written at
    ``pixel_index`` using the particle's final feature.
    """
    h, w, d = problem.features.values.shape
    tau2 = 1.0 / params.theta_f if not tau2 else tau2
    rates = SplitRates(tau1, tau2, problem.ensemble.n, theta_b=params.theta_b)
    votes = np.zeros((h, w, d))
    finals = []
    root = RngStream(seed, stream=11)
    for k in range(n_runs):
        ens = problem.ensemble.copy()
        run_algorithm1(ens, params, rates, t_final, root.substream(k).generator(), options)
        r, c = ens.pixel_index[:, 0], ens.pixel_index[:, 1]
        votes[r, c, :] += ens.features > 0.5
        finals.append(ens.features.copy())
    votes /= n_runs
    return MaskRuns(votes, votes > 0.5, finals)


def combine_channels(channel_masks: np.ndarray, fg_color: Sequence[bool] | None = None, mode: str = "exact") -> np.ndarray:
    """Collapse per-channel masks to one (H, W) mask.

    ``exact``: foreground iff the channel vector equals ``fg_color`` (all ones
    by default). ``any``: foreground iff any channel is set.
    """
    m = np.asarray(channel_masks, bool)
    if m.ndim == 2:
        return m
    if mode == "any":
        return m.any(axis=2)
    if mode != "exact":
        raise ValueError("mode must be 'exact' or 'any'")
    color = np.ones(m.shape[2], bool) if fg_color is None else np.asarray(fg_color, bool)
    return np.all(m == color, axis=2)


# --------------------------------------------------------------------------
# orchestration


@dataclass
class SegmentationResult:
    mask: np.ndarray
    channel_masks: np.ndarray
    loss: float
    dice: float | None
    params: ModelParams
    runtime: dict
    rho_init: np.ndarray
    rho_final: np.ndarray
    rho_gtsm: np.ndarray | None
    grid: FeatureGrid
    cbo_history: list | None = None
    error: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "loss": self.loss,
            "dice": self.dice,
            "params": self.params.to_dict(),
            "runtime": self.runtime,
            "mask_shape": list(self.mask.shape),
            "foreground_pixels": int(np.asarray(self.mask).sum()),
            "error": self.error,
        }


def prepare_image(cfg: RunConfig, gen: np.random.Generator) -> tuple[ImageField, ImageField, np.ndarray | None]:
    """Return (clean image, noisy image, (H, W) shape mask or None)."""
    im = cfg.image
    if im.path:
        clean = load_image(im.path)
        mask = load_mask(im.gtsm_path) if im.gtsm_path else None
    else:
        clean, mask = generate_shape_image(im.shape, (im.height, im.width), im.size, im.fg, im.bg, im.channels)
    if cfg.noise.scale == "unit":
        clean = normalize_features(clean)
    if not cfg.noise.enabled:
        return clean, clean, mask
    spec = NoiseSpec(cfg.noise.family, tuple(cfg.noise.shape_intensity), tuple(cfg.noise.background_intensity), mask)
    return clean, apply_noise(clean, spec, gen), mask


def params_from_config(cfg: RunConfig, d: int) -> ModelParams:
    m = cfg.model
    cm = m.c_max if len(m.c_max) == d else list(m.c_max[:1]) * d
    return ModelParams(m.delta1, m.delta2, m.sigma2, tuple(cm), theta_f=m.theta_f, theta_b=m.theta_b)


def cbo_from_config(cfg: RunConfig, n_cmax: int) -> CboConfig:
    c = cfg.cbo
    return CboConfig(
        n_particles=c.n_particles,
        n_iterations=c.n_iterations,
        lam=c.lam,
        sigma_cbo=c.sigma_cbo,
        alpha_gibbs=c.alpha_gibbs,
        dt=c.dt,
        box=Box.for_channels(n_cmax),
        isotropic=c.isotropic,
        seed=cfg.run.seed,
    )


def segment(cfg: RunConfig, out_dir: str | Path | None = None) -> SegmentationResult:
    """Full pipeline; when ``out_dir`` is given, partial results are written there on failure."""
    cfg.validate()
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    gen = RngStream(cfg.run.seed, stream=3).generator()
    _, noisy, mask = prepare_image(cfg, gen)
    problem = build_problem(noisy, mask, cfg.grid.nc, SpatialDomain(cfg.grid.nx, cfg.grid.ny))
    params = params_from_config(cfg, problem.d)
    steady = cfg.time.steady_tol or None
    partial: dict = {"params": params.to_dict()}
    history = None
    try:
        if cfg.cbo.enabled:
            if problem.gtsm is None:
                raise MissingArtifact("parameter optimisation needs a ground-truth mask")
            n_cmax = problem.d if len(cfg.model.c_max) == problem.d and problem.d > 1 else 1
            ccfg = cbo_from_config(cfg, n_cmax)
            obj = make_objective(problem, params, cfg.time.t_macro, cfg.model.flux, steady)
            x0 = None
            res = optimize(MemoObjective(obj, ccfg.quantum), ccfg, x0)
            params = vector_to_params(res.x, params)
            history = res.history
            timings["cbo_evaluations"] = res.evaluations
            partial["params"] = params.to_dict()
        timings["optimize_s"] = time.perf_counter() - t0
        t1 = time.perf_counter()
        run = solve_macro(problem, params, cfg.time.t_macro, cfg.model.flux, steady)
        loss = l1_loss(run.state.rho, problem.target(), problem.grid.cell_volume) if problem.gtsm is not None else float("nan")
        partial["loss"] = loss
        timings["macro_s"] = time.perf_counter() - t1
        t2 = time.perf_counter()
        opts = Algorithm1Options(dt=cfg.time.micro_dt, spatial_rounds_cap=cfg.time.spatial_rounds_cap)
        mr = particle_masks(
            problem, params, cfg.time.t_micro, cfg.run.n_mask_runs, cfg.run.seed, cfg.time.tau1, cfg.time.tau2 or None, opts
        )
        timings["particles_s"] = time.perf_counter() - t2
    except KinsegError as exc:
        if out_dir is not None:
            write_partial(out_dir, partial, exc)
        raise
    fg_color = None
    combined = combine_channels(mr.channel_masks, fg_color, cfg.run.combine)
    dsc = dice(combined, mask) if mask is not None else None
    timings["total_s"] = time.perf_counter() - t0
    return SegmentationResult(
        combined,
        mr.channel_masks,
        loss,
        dsc,
        params,
        timings,
        problem.rho_init,
        run.state.rho,
        problem.target() if problem.gtsm is not None else None,
        problem.grid,
        history,
    )


def write_partial(out_dir: str | Path, partial: dict, exc: Exception) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = dict(partial)
    data["error"] = f"{type(exc).__name__}: {exc}"
    p = out / "result.json"
    p.write_text(json.dumps(data, indent=2, default=float))
    return p


def write_result(result: SegmentationResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"mask": out / "mask.png", "result": out / "result.json"}
    save_mask_png(result.mask, paths["mask"])
    paths["result"].write_text(json.dumps(result.to_json_dict(), indent=2, default=float))
    return paths


# --------------------------------------------------------------------------
# figure data


@dataclass
class FigureTable:
    """One figure's data: column names plus equally long columns."""

    columns: list[str]
    rows: list[Sequence]
    description: str = ""


def densities_table(result: SegmentationResult) -> FigureTable:
    return marginal_densities_table(result.grid, result.rho_init, result.rho_final, result.rho_gtsm)


def marginal_densities_table(grid: FeatureGrid, rho_init, rho_final, rho_gtsm=None) -> FigureTable:
    """Per-axis marginals of the initial, final and target feature densities."""
    ini = marginals(rho_init, grid)
    fin = marginals(rho_final, grid)
    tgt = marginals(rho_gtsm, grid) if rho_gtsm is not None else [np.full(grid.nc, np.nan)] * grid.d
    rows = []
    for ax in range(grid.d):
        for k, c in enumerate(grid.centers_1d):
            rows.append([ax, c, ini[ax][k], fin[ax][k], tgt[ax][k]])
    columns = ["axis", "c", "rho_init", "rho_final", "rho_gtsm"]
    if grid.d == 1:
        # a single channel needs no axis column
        columns, rows = columns[1:], [r[1:] for r in rows]
    return FigureTable(columns, rows, "feature densities")


def cbo_history_table(history) -> FigureTable:
    dim = len(history[0].consensus)
    names = ["delta1", "delta2", "sigma2"] + [f"c_max_{i}" for i in range(dim - 3)]
    rows = [[h.iteration, h.best_loss, h.min_loss, *h.consensus] for h in history]
    return FigureTable(["iteration", "best_loss", "min_loss"] + [f"consensus_{n}" for n in names], rows, "optimizer trace")


def export_figures(
    tables: Mapping[str, FigureTable | None],
    out_dir: str | Path,
    required: Sequence[str] = (),
) -> Path:
    """Write one CSV per figure and a ``manifest.json`` mapping figure name to file.

    Raises ``MissingArtifact`` when a name in ``required`` has no table.
    """
    missing = [n for n in required if tables.get(n) is None]
    if missing:
        raise MissingArtifact(f"no data for figure(s): {', '.join(missing)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, table in tables.items():
        if table is None:
            continue
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(table.columns)
            for row in table.rows:
                w.writerow([_fmt(v) for v in row])
        manifest[name] = {"file": path.name, "columns": table.columns, "description": table.description}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2))
    return mpath


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


__all__ = [
    "shape_mask",
    "generate_shape_image",
    "dice",
    "build_problem",
    "SegmentationProblem",
    "solve_macro",
    "macro_loss",
    "make_objective",
    "particle_masks",
    "combine_channels",
    "segment",
    "SegmentationResult",
    "FigureTable",
    "densities_table",
    "marginal_densities_table",
    "cbo_history_table",
    "export_figures",
    "write_result",
    "params_to_vector",
    "vector_to_params",
]
