"""Command-line entry point: ``kinseg {generate,segment,consistency,sweep,export}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, add_override_flags, apply_overrides, dump_toml, load_config
from .errors import ConfigError, KinsegError, MissingArtifact, NumericalError

log = logging.getLogger("kinseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

PARAM_NAMES = ("delta1", "delta2", "sigma2", "c_max")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    apply_overrides(cfg, args)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.run.out = args.out
    return cfg.validate()


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _image_png(values: np.ndarray, path: Path) -> None:
    from PIL import Image

    v = np.asarray(values, float)
    lo, hi = v.min(), v.max()
    u8 = np.zeros(v.shape, np.uint8) if hi <= lo else np.round(255 * (v - lo) / (hi - lo)).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Image.fromarray(u8).save(path)


# --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .core import RngStream
    from .pipeline import prepare_image, save_mask_png

    cfg = _config(args)
    out = _outdir(cfg)
    clean, noisy, mask = prepare_image(cfg, RngStream(cfg.run.seed, stream=3).generator())
    np.save(out / "noisy.npy", noisy.values)
    _image_png(clean.values, out / "clean.png")
    _image_png(noisy.values, out / "noisy.png")
    if mask is not None:
        save_mask_png(mask, out / "gtsm.png")
    (out / "config.toml").write_text(dump_toml(cfg))
    print(out / "noisy.png")
    return EXIT_OK


def cmd_segment(args) -> int:
    from . import plotting
    from .pipeline import cbo_history_table, densities_table, export_figures, segment, write_result

    cfg = _config(args)
    out = _outdir(cfg)
    (out / "config.toml").write_text(dump_toml(cfg))
    result = segment(cfg, out_dir=out)
    write_result(result, out)
    save_artifacts(result, cfg, out)
    if cfg.run.figures:
        tables = {"densities": densities_table(result)}
        if result.cbo_history:
            tables["cbo_history"] = cbo_history_table(result.cbo_history)
        export_figures(tables, out / "figures")
        _render_result(result, cfg, out / "figures", plotting)
    print(json.dumps(result.to_json_dict(), default=float))
    return EXIT_OK


def save_artifacts(result, cfg: RunConfig, out: Path) -> Path:
    hist = result.cbo_history or []
    data = {
        "rho_init": result.rho_init,
        "rho_final": result.rho_final,
        "mask": result.mask,
        "channel_masks": result.channel_masks,
        "nc": np.array(result.grid.nc),
        "d": np.array(result.grid.d),
    }
    if result.rho_gtsm is not None:
        data["rho_gtsm"] = result.rho_gtsm
    if hist:
        data["hist_iteration"] = np.array([h.iteration for h in hist])
        data["hist_best"] = np.array([h.best_loss for h in hist])
        data["hist_min"] = np.array([h.min_loss for h in hist])
        data["hist_consensus"] = np.array([h.consensus for h in hist])
    path = out / "artifacts.npz"
    np.savez_compressed(path, **data)
    return path


def _render_result(result, cfg, fig_dir: Path, plotting) -> None:
    from .macrosolver import marginals

    grid = result.grid
    c = grid.centers_1d
    ini = np.array(marginals(result.rho_init, grid))
    fin = np.array(marginals(result.rho_final, grid))
    tgt = None if result.rho_gtsm is None else np.array(marginals(result.rho_gtsm, grid))
    plotting.plot_densities(c, ini, fin, tgt, fig_dir / "densities.png")
    if result.cbo_history:
        h = result.cbo_history
        plotting.plot_history([r.iteration for r in h], [r.best_loss for r in h], fig_dir / "cbo_history.png")


def cmd_export(args) -> int:
    from . import plotting
    from .core import FeatureGrid
    from .pipeline import FigureTable, export_figures, marginal_densities_table

    run_dir = Path(args.run)
    path = run_dir / "artifacts.npz"
    if not path.is_file():
        raise MissingArtifact(f"no artifacts.npz in {run_dir}; run 'kinseg segment' first")
    z = np.load(path)
    grid = FeatureGrid(int(z["d"]), int(z["nc"]))
    from .macrosolver import marginals

    tables: dict = {}
    tables["densities"] = marginal_densities_table(grid, z["rho_init"], z["rho_final"], z["rho_gtsm"] if "rho_gtsm" in z else None)
    if "hist_iteration" in z:
        cons = z["hist_consensus"]
        names = ["delta1", "delta2", "sigma2"] + [f"c_max_{i}" for i in range(cons.shape[1] - 3)]
        rows = [[int(i), b, m, *cv] for i, b, m, cv in zip(z["hist_iteration"], z["hist_best"], z["hist_min"], cons)]
        tables["cbo_history"] = FigureTable(["iteration", "best_loss", "min_loss"] + [f"consensus_{n}" for n in names], rows, "optimizer trace")
    else:
        tables["cbo_history"] = None
    wanted = [s for s in (args.figures or "").split(",") if s]
    selected = {k: v for k, v in tables.items() if not wanted or k in wanted}
    out = Path(args.out) if args.out else run_dir / "figures"
    manifest = export_figures(selected, out, required=wanted)
    tgt = np.array(marginals(z["rho_gtsm"], grid)) if "rho_gtsm" in z else None
    plotting.plot_densities(
        grid.centers_1d, np.array(marginals(z["rho_init"], grid)), np.array(marginals(z["rho_final"], grid)), tgt, out / "densities.png"
    )
    print(manifest)
    return EXIT_OK


def cmd_consistency(args) -> int:
    from . import experiments as ex
    from . import plotting
    from .pipeline import FigureTable, export_figures

    out = Path(args.out or "kinseg-consistency")
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    tables: dict = {}
    summary: dict = {"test": args.test}
    if args.test == "collisions":
        eps_list = [float(e) for e in args.epsilon.split(",")]
        f_rows, s_rows, m_rows = [], [], []
        series = {}
        for eps in eps_list:
            per_seed = []
            for seed in seeds:
                setup = ex.CollisionSetup(n=args.n, epsilon=eps, t_final=args.t_final, seed=seed, symmetric=args.symmetric)
                run = ex.run_collisions(setup)
                cells = [int(run.grid.bin_index(np.array([[v]]))[0, 0]) for v in (0.4, 0.5, 0.6)]
                l1 = ex.marginal_l1(run, cells)
                per_seed.append(
                    {
                        "seed": seed,
                        "relative_drift": ex.relative_drift(run).tolist(),
                        "rms_drift": ex.rms_drift(run),
                        "drift_rate": ex.drift_rate(run),
                        "marginal_l1": l1.tolist(),
                        "first_moment": ex.first_moment_discrepancy(run).tolist(),
                    }
                )
                if seed == seeds[0]:
                    occ = np.flatnonzero(run.rho0 > 0)
                    k = occ[np.argmax(run.rho0[occ])]
                    for ti, t in enumerate(run.times):
                        for cc in occ:
                            f_rows.append([eps, t, run.grid.centers_1d[cc], *run.F_series[ti, cc]])
                    series[f"eps={eps} Fx"] = run.F_series[:, k, 0]
                    series[f"eps={eps} Fy"] = run.F_series[:, k, 1]
                    s_rows.extend([eps, *r] for r in ex.slice_rows(run, cells))
                    m_rows.extend([eps, *r] for r in ex.first_moment_rows(run))
            summary[str(eps)] = per_seed
        tables["Fcant"] = FigureTable(["epsilon", "t", "c", "Fx", "Fy"], f_rows, "windowed first moment over time")
        tables["slices"] = FigureTable(["epsilon", "c", "axis", "x", "p_particles", "p_equilibrium"], s_rows, "spatial marginals per feature slice")
        tables["rhom"] = FigureTable(["epsilon", "c", "rho_m_x", "rho_m_y", "eq_x", "eq_y"], m_rows, "first spatial moment per feature cell")
        plotting.plot_moment_series(run.times, series, out / "Fcant.png")
    else:
        taus = [float(t) for t in args.tau.split(",")]
        setups = [ex.SplitSetup(n=args.n, tau=tau, t_final=args.t_final, seed=seeds[0]) for tau in taus]
        res = ex.split_consistency(setups)
        c = np.linspace(0.5 / 30, 1 - 0.5 / 30, 30)
        cols = ["c", "rho_macro"] + [f"rho_tau_{t:g}" for t in taus]
        rows = [[c[i], res["macro_rho"][i], *[res[t]["rho"][i] for t in taus]] for i in range(c.size)]
        tables["macro"] = FigureTable(cols, rows, "long-time feature density, particles vs macroscopic")
        summary.update({f"l1_tau_{t:g}": res[t]["l1"] for t in taus})
        plotting.plot_profiles(c, {k: np.array([r[j] for r in rows]) for j, k in enumerate(cols) if j > 0}, out / "macro.png")
    export_figures(tables, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    print(json.dumps(summary, default=float)[:2000])
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import plotting
    from .cbo import MemoObjective, landscape
    from .core import RngStream, SpatialDomain
    from .pipeline import FigureTable, build_problem, export_figures, make_objective, params_from_config, params_to_vector, prepare_image

    cfg = _config(args)
    out = _outdir(cfg)
    names = {n: i for i, n in enumerate(PARAM_NAMES)}
    if args.x not in names or args.y not in names or args.x == args.y:
        raise ConfigError(f"--x and --y must be two different names from {PARAM_NAMES}")
    xr = [float(v) for v in args.x_range.split(",")]
    yr = [float(v) for v in args.y_range.split(",")]
    if len(xr) != 2 or len(yr) != 2:
        raise ConfigError("ranges take two comma-separated numbers")
    xv = np.linspace(*xr, args.points)
    yv = np.linspace(*yr, args.points)
    _, noisy, mask = prepare_image(cfg, RngStream(cfg.run.seed, stream=3).generator())
    if mask is None:
        raise MissingArtifact("a loss landscape needs a ground-truth mask")
    problem = build_problem(noisy, mask, cfg.grid.nc, SpatialDomain(cfg.grid.nx, cfg.grid.ny))
    params = params_from_config(cfg, problem.d)
    base = params_to_vector(params)[:4]
    obj = MemoObjective(make_objective(problem, params, cfg.time.t_macro, cfg.model.flux, cfg.time.steady_tol or None))
    t0 = time.perf_counter()
    z = landscape(obj, base, (names[args.x], names[args.y]), (xv, yv))
    rows = [[x, y, z[i, j]] for i, x in enumerate(xv) for j, y in enumerate(yv)]
    export_figures({"cbo_tuning": FigureTable([args.x, args.y, "loss"], rows, "loss landscape")}, out)
    plotting.plot_landscape(xv, yv, z, args.x, args.y, out / "cbo_tuning.png")
    log.info("sweep of %d points took %.1fs", z.size, time.perf_counter() - t0)
    print(out / "cbo_tuning.csv")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kinseg", description="Kinetic consensus segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="shorthand for --run-seed")
        sp.add_argument("--out", default=None, help="shorthand for --run-out")
        add_override_flags(sp)
        return sp

    with_config(sub.add_parser("generate", help="draw a shape image and corrupt it with noise")).set_defaults(func=cmd_generate)
    with_config(sub.add_parser("segment", help="run the full segmentation pipeline")).set_defaults(func=cmd_segment)

    sw = with_config(sub.add_parser("sweep", help="loss landscape over two parameters"))
    sw.add_argument("--x", default="delta1", choices=PARAM_NAMES)
    sw.add_argument("--y", default="sigma2", choices=PARAM_NAMES)
    sw.add_argument("--x-range", default="0.05,1.0")
    sw.add_argument("--y-range", default="0.005,0.3")
    sw.add_argument("--points", type=int, default=8)
    sw.set_defaults(func=cmd_sweep)

    cs = sub.add_parser("consistency", help="particle versus closed-form or macroscopic checks")
    cs.add_argument("--test", choices=("collisions", "split"), default="collisions")
    cs.add_argument("--epsilon", default="0.01,0.5", help="collision strengths (collisions test)")
    cs.add_argument("--tau", default="0.001,1", help="spatial time scales (split test)")
    cs.add_argument("--seeds", default="0")
    cs.add_argument("--n", type=int, default=20000)
    cs.add_argument("--t-final", type=float, default=None)
    cs.add_argument("--symmetric", action="store_true", help="pairwise symmetric collisions instead of one-sided")
    cs.add_argument("--out", default=None)
    cs.set_defaults(func=cmd_consistency)

    ex = sub.add_parser("export", help="write figure CSVs and a manifest from a segment run")
    ex.add_argument("--run", required=True, help="output directory of a previous segment run")
    ex.add_argument("--figures", default="", help="comma-separated subset (densities, cbo_history)")
    ex.add_argument("--out", default=None)
    ex.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "consistency" and args.t_final is None:
        args.t_final = 50.0 if args.test == "collisions" else 20.0
    try:
        return args.func(args)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, MissingArtifact, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except KinsegError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
