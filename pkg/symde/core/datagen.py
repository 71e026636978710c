"""Ground-truth densities and samplers for the builtin datasets."""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import numpy as np
from scipy import linalg

from .errors import (
    ConfigError,
    DimensionMismatch,
    EnvelopeTooSmall,
    NonPdCovariance,
    NumericalError,
    PoleHit,
    WeightMismatch,
)

logger = logging.getLogger(__name__)

Box = Sequence[Tuple[float, float]]

ENVELOPE_CHECK_RESOLUTION = 256
POLE_TOLERANCE = 1e-9
MAX_REJECTION_ROUNDS = 10_000


def _as_points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != d:
        raise DimensionMismatch(f"expected points with {d} columns, got {x.shape[1]}")
    return x


def _check_count(n: int) -> int:
    if int(n) < 1:
        raise ConfigError(f"sample count must be at least 1, got {n}")
    return int(n)


# --------------------------------------------------------------------------- gaussian mixture

@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Gaussian mixture sharing one covariance across components."""

    means: np.ndarray
    cov: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        d = means.shape[1]
        if cov.shape != (d, d):
            raise DimensionMismatch(f"covariance must be {d}x{d}, got {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise NonPdCovariance("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as e:
            raise NonPdCovariance(f"covariance is not positive definite: {e}") from e
        if weights.shape != (means.shape[0],) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise WeightMismatch(f"weights {weights.tolist()} must be a simplex vector over {means.shape[0]} means")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_chol", chol)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def cholesky(self) -> np.ndarray:
        return self._chol


BIMODAL_MEANS = ((-4.0, 4.0), (4.0, -4.0))
BIMODAL_COV = ((1.0, 0.8), (0.8, 1.0))
BIMODAL_SPEC = GaussianSpec(np.array(BIMODAL_MEANS), np.array(BIMODAL_COV), np.array([0.5, 0.5]))


def _normal_pdf(points: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    z = linalg.solve_triangular(chol, (points - mean).T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return np.exp(-0.5 * np.sum(z * z, axis=0) - 0.5 * (d * math.log(2.0 * math.pi) + log_det))


def gaussian_mixture_density(spec: GaussianSpec, x) -> np.ndarray:
    points = _as_points(x, spec.d)
    total = np.zeros(points.shape[0])
    for w, mean in zip(spec.weights, spec.means):
        total += w * _normal_pdf(points, mean, spec.cholesky)
    return total


def sample_gaussian_mixture(spec: GaussianSpec, n: int, seed: int) -> np.ndarray:
    n = _check_count(n)
    rng = np.random.default_rng(seed)
    component = rng.choice(len(spec.weights), size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.d))
    return spec.means[component] + z @ spec.cholesky.T


# --------------------------------------------------------------------------- 4D product gaussian

_PAIR_FIRST = GaussianSpec(np.array([BIMODAL_MEANS[0]]), np.array(BIMODAL_COV), np.array([1.0]))
_PAIR_SECOND = GaussianSpec(np.array([BIMODAL_MEANS[1]]), np.array(BIMODAL_COV), np.array([1.0]))


def gaussian4d_density(x) -> np.ndarray:
    """N((x1, x2) | mu1, S) * N((x3, x4) | mu2, S)."""
    points = _as_points(x, 4)
    return gaussian_mixture_density(_PAIR_FIRST, points[:, :2]) * gaussian_mixture_density(_PAIR_SECOND, points[:, 2:])


def sample_gaussian4d(n: int, seed: int) -> np.ndarray:
    n = _check_count(n)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 4))
    chol = _PAIR_FIRST.cholesky
    first = _PAIR_FIRST.means[0] + z[:, :2] @ chol.T
    second = _PAIR_SECOND.means[0] + z[:, 2:] @ chol.T
    return np.hstack([first, second])


# --------------------------------------------------------------------------- rastrigin

RASTRIGIN_BOX = ((-2.0, 2.0), (-2.0, 2.0))
RASTRIGIN_NORMALIZER = 586.67


def rastrigin_density(x) -> np.ndarray:
    """Biased Rastrigin surface on [-2, 2]^2, zero outside."""
    points = _as_points(x, 2)
    terms = 10.0 * points ** 2 - 5.0 * np.cos(3.0 * np.pi * points - 6.1)
    values = (10.0 + terms.sum(axis=1)) / RASTRIGIN_NORMALIZER
    inside = np.all((points >= -2.0) & (points <= 2.0), axis=1)
    return np.where(inside, values, 0.0)


# --------------------------------------------------------------------------- muon decay

@dataclass(frozen=True)
class MuonMasses:
    """Masses in GeV."""

    m_mu: float = 78.0
    m_e: float = 70.0
    m_W: float = 80.4

    def __post_init__(self):
        if min(self.m_mu, self.m_e, self.m_W) <= 0:
            raise ConfigError("masses must be positive")

    @property
    def box(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        """(m13^2, m23^2) sampling box in physical units."""
        return ((0.0, (self.m_mu - self.m_e) ** 2), (self.m_e ** 2, self.m_mu ** 2))


def muon_decay_density(m13sq, m23sq, masses: MuonMasses = MuonMasses()) -> np.ndarray:
    """Unnormalized squared matrix element in invariant-mass coordinates."""
    m13sq = np.asarray(m13sq, dtype=float)
    m23sq = np.asarray(m23sq, dtype=float)
    mu2, e2, w2 = masses.m_mu ** 2, masses.m_e ** 2, masses.m_W ** 2
    denominator = (m13sq + m23sq - e2 - mu2 + w2) ** 2
    if np.any(np.abs(denominator) < POLE_TOLERANCE):
        raise PoleHit("muon decay density evaluated at its pole")
    return (m23sq - mu2) * (m23sq - e2) / denominator


def muon_decay_scaled(u, masses: MuonMasses = MuonMasses()) -> np.ndarray:
    """|density| on the min-max scaled unit square; unnormalized."""
    points = _as_points(u, 2)
    (a0, a1), (b0, b1) = masses.box
    m13sq = a0 + points[:, 0] * (a1 - a0)
    m23sq = b0 + points[:, 1] * (b1 - b0)
    inside = np.all((points >= 0.0) & (points <= 1.0), axis=1)
    return np.where(inside, np.abs(muon_decay_density(m13sq, m23sq, masses)), 0.0)


# --------------------------------------------------------------------------- heavy-tailed stand-in

@dataclass(frozen=True)
class HeavyTail:
    """(x1 + a)^-2 * exp(-b x2) on the unit square, normalized."""

    a: float = 0.05
    b: float = 3.0

    @property
    def _c1(self) -> float:
        return 1.0 / self.a - 1.0 / (1.0 + self.a)

    @property
    def _c2(self) -> float:
        return (1.0 - math.exp(-self.b)) / self.b

    def density(self, x) -> np.ndarray:
        points = _as_points(x, 2)
        values = (points[:, 0] + self.a) ** -2.0 * np.exp(-self.b * points[:, 1]) / (self._c1 * self._c2)
        inside = np.all((points >= 0.0) & (points <= 1.0), axis=1)
        return np.where(inside, values, 0.0)

    def sample(self, n: int, seed: int) -> np.ndarray:
        """Inverse-CDF sampling per coordinate."""
        n = _check_count(n)
        u = np.random.default_rng(seed).uniform(size=(n, 2))
        x1 = 1.0 / (1.0 / self.a - u[:, 0] * self._c1) - self.a
        x2 = -np.log1p(-u[:, 1] * (1.0 - math.exp(-self.b))) / self.b
        return np.column_stack([x1, x2])


HEAVY_TAIL = HeavyTail()


# --------------------------------------------------------------------------- rejection sampling

@dataclass(frozen=True, eq=False)
class RejectionDraw:
    samples: np.ndarray
    acceptance_rate: float


def _check_envelope(density: Callable, box: Box, envelope: float, resolution: int) -> float:
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    values = density(np.stack([m.ravel() for m in mesh], axis=1))
    peak = float(np.max(values))
    if peak > envelope:
        raise EnvelopeTooSmall(f"density reaches {peak:.6g} on the check grid, above the envelope {envelope:.6g}")
    return peak


def envelope_for(density: Callable, box: Box, margin: float = 1.05, resolution: int = ENVELOPE_CHECK_RESOLUTION) -> float:
    """A constant envelope: the check-grid maximum times a safety margin."""
    return margin * _check_envelope(density, box, np.inf, resolution)


def rejection_sample(
    density: Callable, box: Box, n: int, seed: int, envelope: float,
    check_resolution: int = ENVELOPE_CHECK_RESOLUTION,
) -> RejectionDraw:
    """Uniform proposals on the box, accepted when u * M < density."""
    n = _check_count(n)
    box = [(float(lo), float(hi)) for lo, hi in box]
    if not envelope > 0:
        raise ConfigError(f"envelope must be positive, got {envelope}")
    _check_envelope(density, box, envelope, check_resolution)

    rng = np.random.default_rng(seed)
    lows = np.array([lo for lo, _ in box])
    widths = np.array([hi - lo for lo, hi in box])
    accepted = []
    n_accepted = 0
    n_proposed = 0
    rate = 1.0
    for _ in range(MAX_REJECTION_ROUNDS):
        if n_accepted >= n:
            break
        k = max(1024, int(math.ceil(1.1 * (n - n_accepted) / rate)))
        proposals = lows + widths * rng.uniform(size=(k, len(box)))
        u = rng.uniform(size=k)
        keep = u * envelope < density(proposals)
        accepted.append(proposals[keep])
        n_accepted += int(keep.sum())
        n_proposed += k
        rate = max(n_accepted / n_proposed, 1e-6)
    else:
        if n_accepted < n:
            raise NumericalError(f"rejection sampling accepted only {n_accepted} of {n} samples")
    samples = np.concatenate(accepted, axis=0)[:n]
    acceptance = n_accepted / n_proposed
    logger.info("rejection sampling: %d samples, acceptance rate %.4f", n, acceptance)
    return RejectionDraw(samples, acceptance)


# --------------------------------------------------------------------------- seeds

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One step of the splitmix64 output function."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def shard_seed(seed: int, shard: int) -> int:
    """Seed for shard ``shard`` of a parallel generation run."""
    return splitmix64((int(seed) & _MASK64) ^ splitmix64(int(shard) & _MASK64))


# --------------------------------------------------------------------------- builtin registry

BUILTIN_DATASETS = ("gaussian_mixture", "gaussian4d", "rastrigin", "muon_decay", "heavy_tail")


def builtin_density(name: str) -> Callable[[np.ndarray], np.ndarray]:
    """Ground truth for a builtin dataset, in the coordinates its sampler emits."""
    densities: Dict[str, Callable] = {
        "gaussian_mixture": lambda x: gaussian_mixture_density(BIMODAL_SPEC, x),
        "gaussian4d": gaussian4d_density,
        "rastrigin": rastrigin_density,
        "heavy_tail": HEAVY_TAIL.density,
    }
    if name not in densities:
        raise ConfigError(f"no closed-form ground truth for dataset {name!r}")
    return densities[name]


def generate(name: str, n: int, seed: int) -> np.ndarray:
    if name == "gaussian_mixture":
        return sample_gaussian_mixture(BIMODAL_SPEC, n, seed)
    if name == "gaussian4d":
        return sample_gaussian4d(n, seed)
    if name == "rastrigin":
        return rejection_sample(rastrigin_density, RASTRIGIN_BOX, n, seed, envelope_for(rastrigin_density, RASTRIGIN_BOX)).samples
    if name == "muon_decay":
        box = ((0.0, 1.0), (0.0, 1.0))
        return rejection_sample(muon_decay_scaled, box, n, seed, envelope_for(muon_decay_scaled, box)).samples
    if name == "heavy_tail":
        return HEAVY_TAIL.sample(n, seed)
    raise ConfigError(f"unknown builtin dataset {name!r}; choose from {', '.join(BUILTIN_DATASETS)}")
