"""Quantitative checks for fitted densities."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .density import GridSpec
from .errors import ConfigError, EmptySampleSet, NonPositiveVolume, NumericalError
from .expr import Expression, evaluate_batch
from .support import SupportRegion

logger = logging.getLogger(__name__)

Box = Sequence[Tuple[float, float]]
Evaluable = Union[Expression, Callable[[np.ndarray], np.ndarray]]

DEFAULT_CLIP = 1e-12
CHUNK_POINTS = 1 << 18


def as_callable(f: Evaluable) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(f, Expression):
        return lambda points: evaluate_batch(f, points)
    return f


def _as_rows(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    return samples.reshape(-1, 1) if samples.ndim == 1 else samples


def _resolution(resolution, d: int) -> List[int]:
    if isinstance(resolution, (int, np.integer)):
        resolution = [int(resolution)] * d
    resolution = [int(r) for r in resolution]
    if len(resolution) != d or any(r < 1 for r in resolution):
        raise ConfigError(f"resolution {resolution} is invalid for a {d}-dimensional box")
    return resolution


def cell_centers(box: Box, resolution) -> Tuple[np.ndarray, float]:
    """Midpoints of a regular partition of the box, plus the cell volume."""
    box = [(float(lo), float(hi)) for lo, hi in box]
    if any(not hi > lo for lo, hi in box):
        raise ConfigError(f"degenerate integration box {box}")
    counts = _resolution(resolution, len(box))
    axes = []
    volume = 1.0
    for (lo, hi), n in zip(box, counts):
        step = (hi - lo) / n
        axes.append(lo + step * (np.arange(n) + 0.5))
        volume *= step
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), volume


def _chunked_sum(f: Callable, points: np.ndarray) -> float:
    total = 0.0
    for start in range(0, points.shape[0], CHUNK_POINTS):
        total += float(np.sum(f(points[start:start + CHUNK_POINTS])))
    return total


def integrate_grid(f: Evaluable, box: Box, resolution) -> float:
    """Midpoint-rule integral of f over an axis-aligned box."""
    points, volume = cell_centers(box, resolution)
    return _chunked_sum(as_callable(f), points) * volume


def integrate_with_error(f: Evaluable, box: Box, resolution) -> Tuple[float, float]:
    """Integral at twice the resolution, and its change from the base resolution."""
    counts = _resolution(resolution, len(box))
    coarse = integrate_grid(f, box, counts)
    fine = integrate_grid(f, box, [2 * r for r in counts])
    return fine, abs(fine - coarse)


def empirical_mass(samples, box: Box) -> float:
    """Fraction of samples inside the closed box."""
    samples = _as_rows(samples)
    if samples.size == 0 or samples.shape[0] == 0:
        raise EmptySampleSet("no samples to count")
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    inside = np.all((samples >= lo) & (samples <= hi), axis=1)
    return float(np.mean(inside))


@dataclass
class MassReport:
    regions: List[str]
    empirical: Dict[str, float]
    estimates: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_table(self) -> pd.DataFrame:
        """Rows: Empirical, then one per model; columns: regions."""
        rows = {"Empirical": [self.empirical[r] for r in self.regions]}
        for model, values in self.estimates.items():
            rows[model] = [values[r] for r in self.regions]
        table = pd.DataFrame.from_dict(rows, orient="index", columns=self.regions)
        table.index.name = "source"
        return table


def local_mass_report(
    samples, models: Mapping[str, Evaluable], regions: Mapping[str, Box], resolution=64
) -> MassReport:
    names = list(regions)
    report = MassReport(names, {name: empirical_mass(samples, regions[name]) for name in names})
    for model, f in models.items():
        estimates = {}
        for name in names:
            mass = integrate_grid(f, regions[name], resolution)
            if not np.isfinite(mass):
                raise NumericalError(f"{model} mass over region {name} is {mass}")
            estimates[name] = max(0.0, mass)
        report.estimates[model] = estimates
    logger.info("local mass report over %d region(s) for %d model(s)", len(names), len(models))
    return report


@dataclass(frozen=True)
class NormalizedDensity:
    """``expression / (peak * mass)``, divided in two steps so huge expressions stay finite."""

    expression: Expression
    peak: float
    mass: float

    @property
    def scale(self) -> float:
        return self.peak * self.mass

    def __call__(self, points) -> np.ndarray:
        return evaluate_batch(self.expression, points) / self.peak / self.mass


def normalize_expression(e: Expression, support: SupportRegion, resolution) -> Tuple[float, NormalizedDensity]:
    """Integrate e over the support (midpoint rule on its bounding box) and divide it out.

    The largest magnitude on the grid is factored out before summing.
    """
    points, volume = cell_centers(support.bounding_box, resolution)
    inside = support.contains(points)
    values = evaluate_batch(e, points[inside]) if inside.any() else np.zeros(0)
    if not np.all(np.isfinite(values)):
        raise NonPositiveVolume(f"{e} is not finite on the support")
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if peak == 0:
        raise NonPositiveVolume(f"{e} integrates to 0 over the support")
    mass = float(np.sum(values / peak)) * volume
    z = peak * mass
    if not np.isfinite(z) or z <= 0:
        raise NonPositiveVolume(f"{e} integrates to {z} over the support")
    return z, NormalizedDensity(e, peak, mass)


def mean_log_likelihood(f: Evaluable, samples, clip_threshold: float = DEFAULT_CLIP) -> Tuple[float, int]:
    """Mean of log(max(f, clip)) over the samples and the number of clipped samples."""
    if not clip_threshold > 0:
        raise ConfigError(f"clip threshold must be positive, got {clip_threshold}")
    samples = _as_rows(samples)
    values = np.asarray(as_callable(f)(samples), dtype=float)
    values = np.where(np.isnan(values), -np.inf, values)
    clipped = values < clip_threshold
    score = float(np.mean(np.log(np.maximum(values, clip_threshold))))
    return score, int(np.sum(clipped))


def residual_grid(e: Evaluable, reference: Evaluable, grid: GridSpec) -> Tuple[np.ndarray, float, float]:
    points = grid.points()
    prediction = as_callable(e)(points)
    residual = (prediction - as_callable(reference)(points)).reshape(grid.shape)
    return residual, float(np.max(np.abs(residual))), float(np.max(prediction))
