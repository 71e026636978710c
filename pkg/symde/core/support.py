"""Support estimation and support-restricted training grids."""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .density import GridSpec
from .errors import DegenerateInput, EmptySupport

logger = logging.getLogger(__name__)

DEFAULT_RELATIVE_TAU = 1e-3
DEFAULT_SHRINK = 0.95
_EDGE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class GridMask:
    grid: GridSpec
    mask: np.ndarray

    def __post_init__(self):
        if self.mask.shape != self.grid.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match grid {self.grid.shape}")

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def bounding_box(self) -> List[Tuple[float, float]]:
        return [(lo, hi) for lo, hi, _ in self.grid.axes]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Nearest-node membership; points outside the grid are outside."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        lows = np.array([lo for lo, _, _ in self.grid.axes])
        position = (points - lows) / self.grid.spacing
        index = np.rint(position).astype(int)
        within = np.all((index >= 0) & (index < np.array(self.grid.shape)), axis=1)
        result = np.zeros(points.shape[0], dtype=bool)
        if np.any(within):
            result[within] = self.mask[tuple(index[within].T)]
        return result

    def to_dict(self) -> dict:
        return {
            "variant": "grid_mask",
            "grid": self.grid.to_dict(),
            "mask": np.flatnonzero(self.mask.ravel()).tolist(),
        }


@dataclass(frozen=True, eq=False)
class Polygon2D:
    """Convex polygon, vertices counter-clockwise without repetition."""

    vertices: np.ndarray

    @property
    def d(self) -> int:
        return 2

    @property
    def bounding_box(self) -> List[Tuple[float, float]]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return [(float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1]))]

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    @property
    def centroid(self) -> np.ndarray:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        area = 0.5 * cross.sum()
        return np.array([np.sum((x + xn) * cross), np.sum((y + yn) * cross)]) / (6.0 * area)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inside or on an edge."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        start = self.vertices
        edge = np.roll(self.vertices, -1, axis=0) - start
        scale = max(1.0, float(np.abs(self.vertices).max()))
        result = np.ones(points.shape[0], dtype=bool)
        for a, e in zip(start, edge):
            cross = e[0] * (points[:, 1] - a[1]) - e[1] * (points[:, 0] - a[0])
            result &= cross >= -_EDGE_TOLERANCE * scale * scale
        return result

    def to_dict(self) -> dict:
        return {"variant": "polygon", "vertices": self.vertices.tolist()}


SupportRegion = Union[GridMask, Polygon2D]


def region_from_dict(data: dict) -> SupportRegion:
    if data["variant"] == "polygon":
        return Polygon2D(np.asarray(data["vertices"], dtype=float))
    grid = GridSpec.from_dict(data["grid"])
    mask = np.zeros(int(np.prod(grid.shape)), dtype=bool)
    mask[np.asarray(data["mask"], dtype=int)] = True
    return GridMask(grid, mask.reshape(grid.shape))


def level_set_support(grid_density: np.ndarray, grid: GridSpec, tau: float) -> GridMask:
    """{x : f(x) >= tau} on the grid nodes."""
    grid_density = np.asarray(grid_density, dtype=float)
    if not np.all(np.isfinite(grid_density)):
        raise ValueError("grid density contains non-finite values")
    mask = grid_density >= tau
    if not mask.any():
        logger.warning("level-set threshold %.4g exceeds the grid maximum; support is empty", tau)
    return GridMask(grid, mask)


def mask_components(region: GridMask) -> int:
    """Number of face-connected blobs in the mask."""
    _, count = ndimage.label(region.mask)
    return int(count)


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def convex_hull(samples) -> Polygon2D:
    """Andrew's monotone chain; collinear boundary points are dropped."""
    points = np.asarray(samples, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 3:
        raise DegenerateInput("convex hull needs at least three 2D points")
    points = np.unique(points, axis=0)  # sorted by x, then y
    if points.shape[0] < 3:
        raise DegenerateInput("convex hull needs at least three distinct points")

    lower: List[np.ndarray] = []
    for p in points:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: List[np.ndarray] = []
    for p in points[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if hull.shape[0] < 3:
        raise DegenerateInput("all points are collinear")
    return Polygon2D(hull)


def shrink_region(region: SupportRegion, factor: float) -> SupportRegion:
    if not 0 < factor <= 1:
        raise ValueError(f"shrink factor must lie in (0, 1], got {factor}")
    if factor == 1:
        return region
    if isinstance(region, Polygon2D):
        center = region.centroid
        return Polygon2D(center + factor * (region.vertices - center))
    cells = int(math.ceil((1.0 - factor) * min(region.grid.shape) / 2.0))
    if cells == 0:
        return region
    eroded = ndimage.binary_erosion(region.mask, iterations=cells, border_value=0)
    return GridMask(region.grid, eroded)


def bounding_grid(region: SupportRegion, resolution: Sequence[int]) -> GridSpec:
    box = region.bounding_box
    if isinstance(resolution, int):
        resolution = [resolution] * len(box)
    if len(resolution) != len(box):
        raise ValueError(f"resolution needs {len(box)} entries")
    if any(int(r) < 2 for r in resolution):
        raise ValueError("resolution must be at least 2 per axis")
    return GridSpec(tuple((lo, hi, int(r)) for (lo, hi), r in zip(box, resolution)))


def grid_in_support(region: SupportRegion, resolution) -> np.ndarray:
    """Nodes of a regular grid over the region's bounding box that lie in the region."""
    grid = bounding_grid(region, resolution)
    points = grid.points()
    inside = region.contains(points)
    if not inside.any():
        raise EmptySupport("no grid node lies inside the support")
    logger.debug("%d of %d grid nodes lie in the support", int(inside.sum()), points.shape[0])
    return points[inside]
