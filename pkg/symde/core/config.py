import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError, SymdeError
from .expr import parse_operators
from .sr import LossRegime, SrConfig
from .support import DEFAULT_RELATIVE_TAU, DEFAULT_SHRINK

# symde/core/config.py -> symde/core -> symde
env_path = Path(__file__).resolve().parent.parent / ".env"
load_dotenv(dotenv_path=env_path)


class Settings:
    PROJECT_NAME: str = "symde"
    LOG_LEVEL: str = os.getenv("SYMDE_LOG_LEVEL", "INFO")
    THREADS: int = int(os.getenv("SYMDE_THREADS", "1"))
    OUTPUT_ROOT: str = os.getenv("SYMDE_OUTPUT_ROOT", "runs")


settings = Settings()
logger = logging.getLogger(__name__)

Box = List[Tuple[float, float]]


@dataclass
class ClusteringConfig:
    enabled: bool = False
    eps: float = 0.5
    min_pts: int = 10


@dataclass
class StructureConfig:
    enabled: bool = False
    alpha: float = 0.05
    max_cond: Optional[int] = None


@dataclass
class DensityConfig:
    bandwidth: Union[str, float] = "cv"
    folds: int = 5
    candidates: Optional[List[float]] = None
    grid_count: int = 128
    padding: Optional[float] = None  # None: four bandwidths
    reflect: Dict[int, Tuple[Optional[float], Optional[float]]] = field(default_factory=dict)


@dataclass
class SupportConfig:
    method: str = "levelset"
    tau: float = DEFAULT_RELATIVE_TAU
    shrink: Optional[float] = None  # None: DEFAULT_SHRINK for hulls, 1 for level sets
    resolution: int = 64

    @property
    def shrink_factor(self) -> float:
        if self.shrink is not None:
            return self.shrink
        return DEFAULT_SHRINK if self.method == "hull" else 1.0


@dataclass
class ValidationConfig:
    regions: Dict[str, Box] = field(default_factory=dict)
    resolution: int = 128
    clip_threshold: float = 1e-12


@dataclass
class PipelineConfig:
    input: str = "gaussian_mixture"
    n_samples: int = 10_000
    seed: int = 0
    threads: int = settings.THREADS
    output_dir: str = ""
    test_fraction: float = 0.2
    scale_minmax: bool = False
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    structure: StructureConfig = field(default_factory=StructureConfig)
    density: DensityConfig = field(default_factory=DensityConfig)
    support: SupportConfig = field(default_factory=SupportConfig)
    sr: SrConfig = field(default_factory=SrConfig)
    sr_loss: Optional[str] = None
    refine_iterations: int = 0
    validation: ValidationConfig = field(default_factory=ValidationConfig)

    def __post_init__(self):
        if not self.output_dir:
            self.output_dir = str(Path(settings.OUTPUT_ROOT) / "run")

    def validate(self, d: Optional[int] = None) -> "PipelineConfig":
        """Check option ranges and cross-stage consistency; ``d`` enables dimension checks."""
        if self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")
        if self.refine_iterations < 0:
            raise ConfigError("refine.iterations must be non-negative")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        if self.clustering.enabled and self.structure.enabled:
            raise ConfigError("clustering and structure learning cannot both be enabled")
        if self.clustering.eps <= 0 or self.clustering.min_pts < 1:
            raise ConfigError("clustering.eps must be positive and clustering.min_pts at least 1")
        if not 0 < self.structure.alpha < 1:
            raise ConfigError("structure.alpha must lie in (0, 1)")
        bandwidth = self.density.bandwidth
        if bandwidth != "cv" and not (isinstance(bandwidth, (int, float)) and bandwidth > 0):
            raise ConfigError(f"density.bandwidth must be 'cv' or a positive number, got {bandwidth!r}")
        if self.density.grid_count < 2 or self.density.folds < 2:
            raise ConfigError("density.grid_count and density.folds must be at least 2")
        if self.support.method not in ("levelset", "hull"):
            raise ConfigError(f"support.method must be 'levelset' or 'hull', got {self.support.method!r}")
        if not 0 <= self.support.tau < 1:
            raise ConfigError("support.tau is relative to the grid maximum and must lie in [0, 1)")
        if not 0 < self.support.shrink_factor <= 1:
            raise ConfigError("support.shrink must lie in (0, 1]")
        # one boundary correction per axis
        if self.density.reflect and self.support.method == "hull" and self.support.shrink_factor < 1:
            axes = ",".join(f"x{axis}" for axis in sorted(self.density.reflect))
            raise ConfigError(
                f"density.reflect on {axes} and a hull shrunk by {self.support.shrink_factor} both correct "
                "the boundary; set support.shrink = 1 or drop the reflection"
            )
        if self.support.resolution < 2 or self.validation.resolution < 2:
            raise ConfigError("resolutions must be at least 2")
        if self.sr_loss is not None and self.sr_loss not in {r.value for r in LossRegime}:
            raise ConfigError(f"unknown loss regime {self.sr_loss!r}")
        try:
            self.sr.validate()
        except SymdeError as e:
            raise ConfigError(f"sr: {e}") from e
        if d is not None:
            if self.support.method == "hull" and d != 2 and not self.structure.enabled:
                raise ConfigError("hull support needs 2-dimensional parts")
            for name, box in self.validation.regions.items():
                if len(box) != d:
                    raise ConfigError(f"validation region {name} has {len(box)} axes, data has {d}")
            for axis in self.density.reflect:
                if not 1 <= axis <= d:
                    raise ConfigError(f"density.reflect.x{axis} is out of range for d={d}")
        return self

    def to_dict(self) -> dict:
        data = asdict(replace(self, sr=SrConfig()))
        data["sr"] = self.sr.to_dict()
        data["density"]["reflect"] = {f"x{k}": list(v) for k, v in self.density.reflect.items()}
        return data


# --------------------------------------------------------------------------- text format

def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _optional_float(value: str) -> Optional[float]:
    value = value.strip()
    return float(value) if value else None


def _floats(value: str) -> List[float]:
    return [float(v) for v in value.split(",") if v.strip()]


def _box(value: str) -> Box:
    bounds = _floats(value)
    if len(bounds) < 2 or len(bounds) % 2:
        raise ValueError("a box needs lo,hi pairs")
    return [(bounds[i], bounds[i + 1]) for i in range(0, len(bounds), 2)]


def _bound(value: str) -> Tuple[Optional[float], Optional[float]]:
    parts = value.split(",")
    if len(parts) != 2:
        raise ValueError("reflection bounds are written lo,hi with either side optional")
    return _optional_float(parts[0]), _optional_float(parts[1])


_TOP_LEVEL = {
    "input": ("input", str),
    "n_samples": ("n_samples", int),
    "seed": ("seed", int),
    "threads": ("threads", int),
    "output_dir": ("output_dir", str),
    "test_fraction": ("test_fraction", float),
    "scale.minmax": ("scale_minmax", _bool),
    "refine.iterations": ("refine_iterations", int),
}

_SECTIONS = {
    "clustering": {"enabled": _bool, "eps": float, "min_pts": int},
    "structure": {"enabled": _bool, "alpha": float, "max_cond": int},
    "density": {
        "bandwidth": lambda v: v.strip() if v.strip() == "cv" else float(v),
        "folds": int,
        "candidates": _floats,
        "grid_count": int,
        "padding": float,
    },
    "support": {"method": lambda v: v.strip(), "tau": float, "shrink": float, "resolution": int},
    "validation": {"resolution": int, "clip_threshold": float},
}

_SR_FIELDS = {f.name for f in fields(SrConfig)}


def _sr_value(name: str, value: str):
    if name == "operators":
        return parse_operators(value)
    if name in ("loss_weights", "mutation_weights"):
        return tuple(_floats(value))
    default = getattr(SrConfig(), name)
    return int(value) if isinstance(default, int) else float(value)


def parse_config(values: Mapping[str, Optional[str]]) -> PipelineConfig:
    """Build a PipelineConfig from flat dotted keys."""
    config = PipelineConfig()
    sections = {name: {} for name in _SECTIONS}
    sr_options = {}
    reflect = {}
    regions = {}
    for key, raw in values.items():
        key = key.strip()
        if raw is None:
            raise ConfigError(f"{key}: missing value")
        try:
            if key in _TOP_LEVEL:
                attr, convert = _TOP_LEVEL[key]
                setattr(config, attr, convert(raw))
            elif key == "sr.loss":
                config.sr_loss = raw.strip()
            elif key.startswith("sr.") and key[3:] in _SR_FIELDS:
                sr_options[key[3:]] = _sr_value(key[3:], raw)
            elif key.startswith("density.reflect.x"):
                reflect[int(key[len("density.reflect.x"):])] = _bound(raw)
            elif key.startswith("validation.region."):
                regions[key[len("validation.region."):]] = _box(raw)
            else:
                section, _, option = key.partition(".")
                if section not in _SECTIONS or option not in _SECTIONS[section]:
                    raise ConfigError(f"unknown configuration key {key!r}")
                sections[section][option] = _SECTIONS[section][option](raw)
        except SymdeError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{key}: {e}") from e
        except ValueError as e:
            raise ConfigError(f"{key}: cannot parse {raw!r}: {e}") from e

    config.clustering = ClusteringConfig(**sections["clustering"])
    config.structure = StructureConfig(**sections["structure"])
    config.density = DensityConfig(**sections["density"], reflect=reflect)
    config.support = SupportConfig(**sections["support"])
    config.validation = ValidationConfig(regions=regions, **sections["validation"])
    config.sr = replace(SrConfig(), **{"seed": config.seed, "threads": config.threads, **sr_options})
    return config


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file {path} does not exist")
    values = dict(dotenv_values(path, interpolate=False))
    values.update(overrides or {})
    config = parse_config(values)
    logger.info("loaded configuration from %s", path)
    return config.validate()
