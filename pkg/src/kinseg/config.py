"""Run configuration: TOML file sections mapped onto dataclasses.

Every field can be overridden from the command line with a flag named
``--<section>-<field>`` (underscores become dashes), e.g. ``--model-delta1 0.3``.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SHAPES = ("square", "circle", "triangle", "rhombus")


@dataclass
class ImageSection:
    path: str = ""  # load a PNG instead of drawing a shape when set
    gtsm_path: str = ""  # optional ground-truth mask PNG for a loaded image
    shape: str = "square"
    height: int = 40
    width: int = 40
    size: int = 20
    fg: list = field(default_factory=lambda: [200.0])
    bg: list = field(default_factory=lambda: [50.0])
    channels: int = 1


@dataclass
class NoiseSection:
    family: str = "gaussian"
    shape_intensity: list = field(default_factory=lambda: [5.0])
    background_intensity: list = field(default_factory=lambda: [10.0])
    enabled: bool = True
    scale: str = "raw"  # raw: intensities as given; unit: rescale the clean image to [0, 1] first


@dataclass
class GridSection:
    nx: int = 30
    ny: int = 30
    nc: int = 30


@dataclass
class ModelSection:
    delta1: float = 0.2903
    delta2: float = 0.4685
    sigma2: float = 0.1549
    c_max: list = field(default_factory=lambda: [0.4778])
    theta_f: float = 1.0
    theta_b: float = 1.0
    flux: str = "upwind"


@dataclass
class TimeSection:
    t_macro: float = 20.0
    t_micro: float = 20.0
    tau1: float = 1e-3
    tau2: float = 0.0  # 0 means 1 / theta_f
    micro_dt: float = 0.02
    spatial_rounds_cap: int = 50
    steady_tol: float = 0.0  # 0 disables early stopping of the macro solve


@dataclass
class CboSection:
    enabled: bool = False
    n_particles: int = 64
    n_iterations: int = 100
    lam: float = 1.0
    sigma_cbo: float = 0.7071067811865476
    alpha_gibbs: float = 12.0
    dt: float = 0.1
    isotropic: bool = True


@dataclass
class RunSection:
    seed: int = 0
    out: str = "kinseg-out"
    n_mask_runs: int = 1
    combine: str = "exact"  # exact | any
    figures: bool = True


@dataclass
class RunConfig:
    image: ImageSection = field(default_factory=ImageSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    grid: GridSection = field(default_factory=GridSection)
    model: ModelSection = field(default_factory=ModelSection)
    time: TimeSection = field(default_factory=TimeSection)
    cbo: CboSection = field(default_factory=CboSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        im = self.image
        if im.path:
            if not Path(im.path).is_file():
                raise ConfigError(f"input image not found: {im.path}")
            if im.gtsm_path and not Path(im.gtsm_path).is_file():
                raise ConfigError(f"ground-truth mask not found: {im.gtsm_path}")
        elif im.shape not in SHAPES:
            raise ConfigError(f"unknown shape {im.shape!r}; choose from {SHAPES}")
        if min(im.height, im.width, im.size, im.channels) < 1:
            raise ConfigError("image dimensions, size and channels must be positive")
        if self.noise.family not in ("gaussian", "uniform", "speckle", "poisson"):
            raise ConfigError(f"unknown noise family {self.noise.family!r}")
        if self.noise.scale not in ("raw", "unit"):
            raise ConfigError("noise.scale must be 'raw' or 'unit'")
        if self.model.flux not in ("upwind", "rusanov"):
            raise ConfigError("model.flux must be 'upwind' or 'rusanov'")
        if self.run.combine not in ("exact", "any"):
            raise ConfigError("run.combine must be 'exact' or 'any'")
        if self.run.n_mask_runs < 1:
            raise ConfigError("run.n_mask_runs must be at least 1")
        if min(self.grid.nx, self.grid.ny, self.grid.nc) < 2:
            raise ConfigError("grid sizes must be at least 2")
        if self.time.t_macro < 0 or self.time.t_micro < 0 or self.time.micro_dt <= 0:
            raise ConfigError("horizons must be non-negative and micro_dt positive")
        if self.time.tau1 <= 0 or self.time.tau2 < 0:
            raise ConfigError("tau1 must be positive and tau2 non-negative")
        return self


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _section_types(section_cls) -> dict[str, Any]:
    hints = get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(section_cls)}


def _coerce(value: Any, typ: Any, where: str) -> Any:
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if typ is list:
            if isinstance(value, str):
                return [float(v) for v in value.split(",") if v.strip()]
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return [float(value)]
            return [float(v) for v in value]
        if typ is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: cannot interpret {value!r} as {getattr(typ, '__name__', typ)}") from exc
    raise ConfigError(f"{where}: unsupported field type {typ}")


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for sec_name, body in data.items():
        if sec_name not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec_name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{sec_name}] must be a table")
        sec = getattr(cfg, sec_name)
        types = _section_types(type(sec))
        for key, value in body.items():
            if key not in types:
                raise ConfigError(f"unknown key {sec_name}.{key}")
            setattr(sec, key, _coerce(value, types[key], f"{sec_name}.{key}"))
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return config_from_dict(data)


def flag_name(section: str, key: str) -> str:
    return f"--{section}-{key}".replace("_", "-")


def add_override_flags(parser) -> None:
    """Register one optional flag per config field; defaults are ``None`` (no override)."""
    cfg = RunConfig()
    for sec_name in SECTIONS:
        group = parser.add_argument_group(f"[{sec_name}] overrides")
        types = _section_types(type(getattr(cfg, sec_name)))
        for key, typ in types.items():
            hint = "comma-separated numbers" if typ is list else getattr(typ, "__name__", str(typ))
            group.add_argument(
                flag_name(sec_name, key),
                dest=f"ovr__{sec_name}__{key}",
                default=None,
                metavar=hint.upper().split()[0] if typ is not list else "LIST",
                help=f"{sec_name}.{key} ({hint})",
            )


def apply_overrides(cfg: RunConfig, namespace) -> RunConfig:
    for dest, value in vars(namespace).items():
        if not dest.startswith("ovr__") or value is None:
            continue
        _, sec_name, key = dest.split("__")
        sec = getattr(cfg, sec_name)
        typ = _section_types(type(sec))[key]
        setattr(sec, key, _coerce(value, typ, f"{sec_name}.{key}"))
    return cfg


def dump_toml(cfg: RunConfig) -> str:
    """Serialise to TOML text (flat tables, scalar and numeric-list values only)."""
    lines = []
    for sec_name, body in cfg.to_dict().items():
        lines.append(f"[{sec_name}]")
        for key, value in body.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


__all__ = [
    "RunConfig",
    "load_config",
    "config_from_dict",
    "add_override_flags",
    "apply_overrides",
    "dump_toml",
    "SHAPES",
]
