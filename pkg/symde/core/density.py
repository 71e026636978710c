"""Nonparametric surrogate densities.

Gaussian KDE with an isotropic bandwidth, cross-validated bandwidth selection,
FFT evaluation on regular grids and boundary reflection.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import interpolate, signal
from sklearn.model_selection import KFold
from sklearn.neighbors import KernelDensity

from .errors import (
    DimensionMismatch,
    EmptyCandidates,
    GridTooCoarse,
    NonFiniteInput,
    NonPositiveBandwidth,
    TooFewSamples,
)

logger = logging.getLogger(__name__)

MAX_GRID_DIMS = 4
LOG_DENSITY_FLOOR = math.log(1e-300)
KERNEL_RADIUS = 6.0  # in bandwidths
FFT_OVERSAMPLE = 8

AxisBounds = Optional[Tuple[Optional[float], Optional[float]]]


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: one (min, max, count) triple per axis, nodes include both ends."""

    axes: Tuple[Tuple[float, float, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple((float(lo), float(hi), int(n)) for lo, hi, n in self.axes))
        if not 1 <= len(self.axes) <= MAX_GRID_DIMS:
            raise DimensionMismatch(f"grids support 1 to {MAX_GRID_DIMS} dimensions, got {len(self.axes)}")
        for lo, hi, n in self.axes:
            if n < 2 or not lo < hi:
                raise ValueError(f"invalid grid axis ({lo}, {hi}, {n})")

    @classmethod
    def covering(cls, samples: np.ndarray, count: int, padding: float) -> "GridSpec":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        lo = samples.min(axis=0) - padding
        hi = samples.max(axis=0) + padding
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(tuple((float(a), float(b), int(count)) for a, b in zip(lo, hi)))

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(n for _, _, n in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (n - 1) for lo, hi, n in self.axes])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def coordinates(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in self.axes]

    def points(self) -> np.ndarray:
        """All nodes as an (N, d) matrix in row-major order."""
        mesh = np.meshgrid(*self.coordinates(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def refined(self, factor: int) -> "GridSpec":
        return GridSpec(tuple((lo, hi, (n - 1) * factor + 1) for lo, hi, n in self.axes))

    def to_dict(self) -> dict:
        return {"axes": [list(axis) for axis in self.axes]}

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        return cls(tuple(tuple(axis) for axis in data["axes"]))


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Fitted Gaussian KDE.

    ``scale`` and ``bounds`` are set when the samples were augmented by reflection:
    the estimate is multiplied by ``scale`` inside ``bounds`` and is zero outside.
    """

    samples: np.ndarray
    bandwidth: float
    kernel: str = "gaussian"
    scale: float = 1.0
    bounds: Optional[Tuple[AxisBounds, ...]] = None
    _estimator: KernelDensity = field(default=None, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def __call__(self, points) -> np.ndarray:
        return kde_evaluate(self, points)

    def inside(self, points: np.ndarray) -> np.ndarray:
        mask = np.ones(points.shape[0], dtype=bool)
        if self.bounds is None:
            return mask
        for axis, bound in enumerate(self.bounds):
            if bound is None:
                continue
            lo, hi = bound
            if lo is not None:
                mask &= points[:, axis] >= lo
            if hi is not None:
                mask &= points[:, axis] <= hi
        return mask


def _as_samples(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise TooFewSamples("need at least one sample")
    if not np.all(np.isfinite(samples)):
        raise NonFiniteInput("samples contain NaN or infinite entries")
    return samples


def kde_fit(samples, h: float, scale: float = 1.0, bounds=None) -> KdeModel:
    """Store the samples and bandwidth; sklearn's tree is built once here."""
    samples = _as_samples(samples).copy()
    if not (np.isfinite(h) and h > 0):
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {h}")
    estimator = KernelDensity(bandwidth=float(h), kernel="gaussian", rtol=0.0, atol=0.0)
    estimator.fit(samples)
    samples.setflags(write=False)
    return KdeModel(samples, float(h), "gaussian", float(scale), bounds, estimator)


def kde_evaluate(model: KdeModel, points) -> np.ndarray:
    """f(x) = 1/(n h^d (2 pi)^(d/2)) sum_i exp(-|x - X_i|^2 / (2 h^2))."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :] if model.d > 1 else points[:, None]
    if points.shape[1] != model.d:
        raise DimensionMismatch(f"model has d={model.d}, points have {points.shape[1]} columns")
    values = np.exp(model._estimator.score_samples(points))
    if model.bounds is not None:
        values = np.where(model.inside(points), values * model.scale, 0.0)
    return values


def silverman_bandwidth(samples) -> float:
    samples = _as_samples(samples)
    n, d = samples.shape
    sigma = float(np.mean(np.std(samples, axis=0, ddof=1)))
    return (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0)) * sigma


def default_candidates(samples, count: int = 30) -> np.ndarray:
    """Log-spaced candidates from 1% to 100% of the largest column spread."""
    samples = _as_samples(samples)
    spread = float(np.max(np.std(samples, axis=0)))
    spread = spread if spread > 0 else 1.0
    return np.logspace(-2.0, 0.0, count) * spread


def cv_bandwidth(samples, candidates: Sequence[float], folds: int = 5, seed: int = 0) -> float:
    """Pick the candidate with the best mean held-out log-likelihood over k folds."""
    samples = _as_samples(samples)
    candidates = [float(h) for h in candidates]
    if not candidates:
        raise EmptyCandidates("no bandwidth candidates given")
    if folds < 2 or samples.shape[0] < folds:
        raise TooFewSamples(f"{samples.shape[0]} samples cannot be split into {folds} folds")
    if any(not (h > 0) for h in candidates):
        raise NonPositiveBandwidth("bandwidth candidates must be positive")
    if len(candidates) == 1:
        return candidates[0]

    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    splits = list(splitter.split(samples))
    scores = np.zeros(len(candidates))
    for train, test in splits:
        for i, h in enumerate(candidates):
            estimator = KernelDensity(bandwidth=h, kernel="gaussian").fit(samples[train])
            log_density = np.maximum(estimator.score_samples(samples[test]), LOG_DENSITY_FLOOR)
            scores[i] += np.mean(log_density)
    scores /= len(splits)
    best = int(np.argmax(scores))
    logger.info("cross-validated bandwidth %.6g (mean held-out log-likelihood %.6g)", candidates[best], scores[best])
    return candidates[best]


def _linear_binning(samples: np.ndarray, grid: GridSpec) -> np.ndarray:
    binned = np.zeros(grid.shape)
    lows = np.array([lo for lo, _, _ in grid.axes])
    counts = np.array(grid.shape)
    position = (samples - lows) / grid.spacing
    inside = np.all((position >= 0) & (position <= counts - 1), axis=1)
    if not np.all(inside):
        logger.warning("%d samples fall outside the grid and are dropped", int(np.sum(~inside)))
        position = position[inside]
    base = np.clip(np.floor(position).astype(int), 0, counts - 2)
    frac = position - base
    for corner in range(2 ** grid.d):
        bits = np.array([(corner >> axis) & 1 for axis in range(grid.d)])
        weights = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=1)
        index = tuple((base + bits).T)
        np.add.at(binned, index, weights)
    return binned


def _sampled_kernel(spacing: np.ndarray, h: float) -> np.ndarray:
    kernel = np.ones(())
    for step in spacing:
        half = int(math.ceil(KERNEL_RADIUS * h / step))
        offsets = np.arange(-half, half + 1) * step
        axis_kernel = np.exp(-0.5 * (offsets / h) ** 2) / (h * math.sqrt(2.0 * math.pi))
        kernel = np.multiply.outer(kernel, axis_kernel)
    return kernel


def fft_kde_grid(samples, grid: GridSpec, h: float, oversample: int = FFT_OVERSAMPLE) -> np.ndarray:
    """KDE on grid nodes: linear binning, then FFT convolution with a sampled Gaussian.

    Binning happens on a grid ``oversample`` times finer per axis whose nodes include
    the requested ones; the result is read back at the requested nodes.
    """
    samples = _as_samples(samples)
    if samples.shape[1] != grid.d:
        raise DimensionMismatch(f"grid has d={grid.d}, samples have {samples.shape[1]} columns")
    if not (h > 0):
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {h}")
    if np.any(grid.spacing > h):
        raise GridTooCoarse(f"grid spacing {grid.spacing.max():.4g} exceeds bandwidth {h:.4g}")
    lows = np.array([lo for lo, _, _ in grid.axes])
    highs = np.array([hi for _, hi, _ in grid.axes])
    padding = np.concatenate([samples.min(axis=0) - lows, highs - samples.max(axis=0)])
    short = (padding < 4 * h) & ~np.isclose(padding, 4 * h, rtol=1e-9, atol=0.0)
    if np.any(short):
        logger.warning("grid leaves less than 4 bandwidths of padding around the samples")

    fine = grid.refined(max(1, int(oversample)))
    binned = _linear_binning(samples, fine)
    kernel = _sampled_kernel(fine.spacing, h)
    density = signal.fftconvolve(binned, kernel, mode="same") / samples.shape[0]
    step = max(1, int(oversample))
    density = density[tuple(slice(None, None, step) for _ in range(grid.d))]
    return np.maximum(density, 0.0)


def density_grid(model: KdeModel, grid: GridSpec) -> np.ndarray:
    """Model density on the grid nodes; FFT when the grid resolves the kernel."""
    if np.all(grid.spacing <= model.bandwidth):
        # fine binning grids are affordable up to 2D only
        oversample = FFT_OVERSAMPLE if grid.d <= 2 else 1
        values = fft_kde_grid(model.samples, grid, model.bandwidth, oversample)
        if model.bounds is not None:
            inside = model.inside(grid.points()).reshape(grid.shape)
            values = np.where(inside, values * model.scale, 0.0)
        return values
    logger.info("grid spacing exceeds bandwidth; evaluating the KDE directly on %d nodes", int(np.prod(grid.shape)))
    return kde_evaluate(model, grid.points()).reshape(grid.shape)


def reflect_samples(samples, axis_bounds: Sequence[AxisBounds]) -> np.ndarray:
    """Mirror the samples across every finite bound.

    Axes are processed in order and each reflection applies to the already augmented
    set, so corners of a bounded box receive their double reflections.
    """
    augmented = _as_samples(samples)
    for axis, bound in enumerate(axis_bounds):
        if bound is None:
            continue
        lo, hi = bound
        parts = [augmented]
        for edge in (lo, hi):
            if edge is None:
                continue
            if not np.isfinite(edge):
                raise NonFiniteInput(f"reflection bound on axis {axis + 1} is not finite")
            mirrored = augmented.copy()
            mirrored[:, axis] = 2.0 * edge - mirrored[:, axis]
            parts.append(mirrored)
        augmented = np.concatenate(parts, axis=0)
    return augmented


def kde_fit_reflected(samples, h: float, axis_bounds: Sequence[AxisBounds]) -> KdeModel:
    samples = _as_samples(samples)
    augmented = reflect_samples(samples, axis_bounds)
    ratio = augmented.shape[0] / samples.shape[0]
    bounds = tuple(axis_bounds) + (None,) * (samples.shape[1] - len(axis_bounds))
    return kde_fit(augmented, h, scale=ratio, bounds=bounds)


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Density tabulated on grid nodes, linearly interpolated in between (zero outside)."""

    grid: GridSpec
    values: np.ndarray
    interpolator: interpolate.RegularGridInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "interpolator", interpolate.RegularGridInterpolator(
            self.grid.coordinates(), self.values, method="linear", bounds_error=False, fill_value=0.0
        ))

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.shape[1] != self.grid.d:
            raise DimensionMismatch(f"grid has d={self.grid.d}, points have {points.shape[1]} columns")
        return self.interpolator(points)
