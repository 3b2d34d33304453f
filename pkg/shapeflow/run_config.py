"""
Run configuration for shapeflow commands.

A RunConfig is read from an INI file (one section per nested model), then
environment overrides from the process or a project ``.env`` are applied, then
command-line overrides. Unknown sections or keys are rejected.
"""

import os
import configparser
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError

ENV_OVERRIDES = {
    "SHAPEFLOW_SEED": ("run", "seed"),
    "SHAPEFLOW_OUT_DIR": ("run", "out_dir"),
    "SHAPEFLOW_DIMENSION": ("run", "dimension"),
    "SHAPEFLOW_CACHE_DIR": ("run", "cache_dir"),
}


# Pydantic Models
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunSection(_Section):
    dimension: int = Field(default=2, ge=1, le=3, description="Spatial dimension d")
    seed: int = Field(default=0, ge=0, description="Seed for every random choice")
    out_dir: str = Field(default="output", description="Directory for artifact bundles")
    cache_dir: Optional[str] = Field(default=None, description="Droplet geodesic cache; defaults to <out_dir>/cache")
    reproducible: bool = Field(default=False, description="Omit timestamps from written JSON")


class GridSection(_Section):
    cell_size: float = Field(default=0.05, gt=0, le=1.0, description="Raster cell size h")
    padding: int = Field(default=2, ge=1, le=64, description="Empty cells around rasterized shapes")
    supersample: int = Field(default=4, ge=1, le=8, description="Sub-cell samples per axis")
    max_cells: int = Field(default=65536, ge=16, le=16_777_216, description="Largest grid accepted")


class TransportSection(_Section):
    method: Literal["auto", "exact", "entropic"] = Field(default="auto", description="OT solver selection")
    n_samples: int = Field(default=1000, ge=2, le=20000, description="Equal-weight samples per shape")
    k_neighbors: Optional[int] = Field(default=None, ge=2, le=512, description="Neighbors in the local map and Jacobian fits")
    cross_validate: int = Field(default=400, ge=0, le=5000, description="Subsample size for entropic cross-checks")


class SpraySection(_Section):
    epsilon: float = Field(default=0.1, gt=0, le=1.0, description="Spray accuracy ε")
    delta: float = Field(default=0.05, gt=0, lt=1.0, description="Uncovered source mass fraction δ")
    safety_factor: float = Field(default=1.1, ge=1.0, le=4.0, description="Margin on the admissible radius bounds")
    max_balls: Optional[int] = Field(default=None, ge=1, description="Cap on the number of Vitali balls")
    max_levels: int = Field(default=2, ge=1, le=8, description="Quantization levels for general densities")


class DropletSection(_Section):
    n_times: int = Field(default=33, ge=3, le=4097, description="Time samples stored per geodesic")
    tol: float = Field(default=1e-10, gt=0, le=1e-3, description="Endpoint tolerance of the BVP solve")
    n_radial: int = Field(default=8, ge=1, le=64, description="Radial shells in ball quadratures")


class VerifySection(_Section):
    time_samples: int = Field(default=17, ge=2, le=257, description="Times checked for injectivity")
    bank_size: int = Field(default=20, ge=1, le=200, description="Test functions in the weak-form bank")
    probes: int = Field(default=100, ge=0, le=10000, description="Relaxed-action minimality probes")
    amplitude: float = Field(default=0.1, gt=0, le=1.0, description="Relative probe amplitude")
    subsample: int = Field(default=1000, ge=10, le=20000, description="Samples used by action audits")
    action_rtol: float = Field(default=1e-4, gt=0, le=1.0, description="Relative tolerance of the relaxed action against half the transport cost")


class RenderSection(_Section):
    times: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0], description="Snapshot times")

    @field_validator("times", mode="before")
    @classmethod
    def split_times(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [float(v) for v in value.replace(";", ",").split(",") if v.strip()]
        return value

    @field_validator("times")
    @classmethod
    def times_in_unit_interval(cls, value: List[float]) -> List[float]:
        if not value or any(t < 0 or t > 1 for t in value):
            raise ValueError("snapshot times must be a nonempty list in [0, 1]")
        return value


class RunConfig(_Section):
    run: RunSection = Field(default_factory=RunSection)
    grid: GridSection = Field(default_factory=GridSection)
    transport: TransportSection = Field(default_factory=TransportSection)
    spray: SpraySection = Field(default_factory=SpraySection)
    droplet: DropletSection = Field(default_factory=DropletSection)
    verify: VerifySection = Field(default_factory=VerifySection)
    render: RenderSection = Field(default_factory=RenderSection)

    @property
    def cache_dir(self) -> str:
        return self.run.cache_dir or os.path.join(self.run.out_dir, "cache")


# =======================
# Loading
# =======================

def _read_ini(path: str) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}", {"path": path})
    except configparser.Error as e:
        raise ConfigError(f"Malformed config file {path}: {e}", {"path": path})
    sections = {}
    for name in parser.sections():
        if name not in RunConfig.model_fields:
            raise ConfigError(f"Unknown config section [{name}]", {"path": path, "section": name})
        sections[name] = dict(parser.items(name))
    return sections


def _merge(data: Dict[str, Dict[str, Any]], section: str, key: str, value: Any):
    data.setdefault(section, {})[key] = value


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
    env_path: Optional[str] = None,
) -> RunConfig:
    """
    Build a RunConfig from file, environment and explicit overrides (in that order).

    Args:
        path: INI file, or None for defaults
        overrides: {section: {key: value}} applied last; None values are skipped
        env_path: Optional .env file loaded before reading overrides

    Raises:
        ConfigError: On unreadable files, unknown keys or out-of-range values
    """
    if env_path:
        load_dotenv(env_path)
    data: Dict[str, Dict[str, Any]] = _read_ini(path) if path else {}
    for var, (section, key) in ENV_OVERRIDES.items():
        value = os.getenv(var)
        if value:
            _merge(data, section, key, value)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            if value is not None:
                _merge(data, section, key, value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        errors = [
            {"loc": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
            for err in e.errors()
        ]
        raise ConfigError(f"Invalid configuration: {errors[0]['loc']}: {errors[0]['message']}", {"errors": errors})


def to_ini(config: RunConfig) -> str:
    """Serialize a RunConfig back to INI text; None values are left out."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in config.model_dump().items():
        parser.add_section(section)
        for key, value in values.items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ", ".join(repr(float(v)) for v in value)
            parser.set(section, key, str(value))
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser.items(section))
        lines.append("")
    return "\n".join(lines)
