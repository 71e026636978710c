"""Pipeline stage handlers.

Every stage reads the artifacts of the stages before it from the output directory
and writes its own, so the stages compose through files and a full run is just the
stages called in order. Failures are re-raised as StageError carrying the stage name.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core import datagen
from .core.config import PipelineConfig
from .core.decompose import (
    ClusterLabels,
    assign_to_clusters,
    dbscan,
    pc_skeleton,
    recombine_additive,
    recombine_multiplicative,
    renormalize_weights,
)
from .core.density import (
    GridDensity,
    GridSpec,
    cv_bandwidth,
    default_candidates,
    density_grid,
    kde_fit,
    kde_fit_reflected,
)
from .core.errors import ConfigError, DataError, NonPositiveVolume, NumericalError, StageError, SymdeError
from .core.expr import Expression, evaluate_batch, parse, to_string
from .core.sr import ParetoFront, SrConfig, build_training_set, evolve, loss, warm_start
from .core.support import convex_hull, level_set_support, region_from_dict, shrink_region
from .core.utils import (
    FeatureScaler,
    read_json,
    read_samples,
    sample_header,
    write_frame,
    write_json,
    write_samples,
)
from .core.validate import local_mass_report, mean_log_likelihood, normalize_expression, residual_grid

logger = logging.getLogger(__name__)

SAMPLES_TRAIN = "samples_train.csv"
SAMPLES_TEST = "samples_test.csv"
DATASET = "dataset.json"
LABELS = "labels.csv"
COMPONENTS = "components.json"
DENSITY_GRID = "density_grid.csv"
SUPPORT = "support.json"
PARETO_JSON = "pareto.json"
PARETO_CSV = "pareto.csv"
MASS_REPORT = "mass_report.csv"
RESIDUAL_GRID = "residual_grid.csv"
VALIDATION = "validation.json"
MANIFEST = "run_manifest.json"

MAX_GRID_NODES = 200_000
MAX_TRAINING_NODES = 40_000
# A part expression may exceed its density peak by at most this factor on the validation grid.
BLOWUP_FACTOR = 10.0
REFINED_PART = "refined"


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("stage %s started", name)
    try:
        yield
    except StageError:
        raise
    except SymdeError as e:
        raise StageError(name, e) from e
    except Exception as e:
        logger.exception("stage %s hit an unexpected error", name)
        raise StageError(name, e) from e
    logger.info("stage %s finished", name)


def per_axis(count: int, d: int, budget: int) -> int:
    """Per-axis node count, capped so the whole grid stays within ``budget`` nodes."""
    return max(2, min(int(count), int(budget ** (1.0 / d))))


# --------------------------------------------------------------------------- artifacts

@dataclass
class Part:
    part: str
    variables: Tuple[int, ...]
    weight: float
    train: np.ndarray
    test: np.ndarray

    @property
    def d(self) -> int:
        return len(self.variables)


@dataclass
class Decomposition:
    mode: str  # "none" | "clusters" | "blocks"
    d: int
    parts: List[Part]
    bandwidths: Dict[str, float]
    grids: Dict[str, GridSpec]


def _load_samples(out: Path) -> Tuple[np.ndarray, np.ndarray]:
    train = read_samples(out / SAMPLES_TRAIN)
    if read_json(out / DATASET)["n_test"] == 0:
        return train, np.zeros((0, train.shape[1]))
    return train, read_samples(out / SAMPLES_TEST)


def _write_test_samples(path: Path, test: np.ndarray, d: int) -> None:
    if test.shape[0]:
        write_samples(path, test)
    else:
        write_frame(path, pd.DataFrame(columns=sample_header(d)))


def load_decomposition(out: Path) -> Decomposition:
    components = read_json(out / COMPONENTS)
    train, test = _load_samples(out)
    labels = pd.read_csv(out / LABELS)["cluster"].to_numpy(dtype=int)
    mode = components["mode"]
    if mode == "clusters":
        k = len(components["parts"])
        clusters = ClusterLabels(labels, k, np.zeros(k))
        test_labels = assign_to_clusters(train, clusters, test)
    parts = []
    for entry in components["parts"]:
        columns = [v - 1 for v in entry["variables"]]
        if mode == "clusters":
            cluster = int(entry["part"])
            part_train = train[labels == cluster]
            part_test = test[test_labels == cluster]
        else:
            part_train = train[:, columns]
            part_test = test[:, columns]
        parts.append(Part(entry["part"], tuple(entry["variables"]), float(entry["weight"]), part_train, part_test))
    return Decomposition(
        mode,
        int(components["d"]),
        parts,
        {e["part"]: float(e["bandwidth"]) for e in components["parts"]},
        {e["part"]: GridSpec.from_dict(e["grid"]) for e in components["parts"]},
    )


def load_density_grids(out: Path, decomposition: Decomposition) -> Dict[str, GridDensity]:
    frame = pd.read_csv(out / DENSITY_GRID, dtype={"part": str}, float_precision="round_trip")
    densities = {}
    for part in decomposition.parts:
        grid = decomposition.grids[part.part]
        values = frame.loc[frame["part"] == part.part, "density"].to_numpy(dtype=float)
        if values.size != int(np.prod(grid.shape)):
            raise DataError(f"{DENSITY_GRID}: part {part.part} has {values.size} nodes, expected {int(np.prod(grid.shape))}")
        densities[part.part] = GridDensity(grid, values.reshape(grid.shape))
    return densities


def read_pareto_csv(path: Path) -> pd.DataFrame:
    """pareto.csv with part ids and expressions kept as text ("5" is an expression, not a number)."""
    return pd.read_csv(path, dtype={"part": str, "expression": str}, float_precision="round_trip")


def load_supports(out: Path) -> Dict[str, object]:
    return {entry["part"]: region_from_dict(entry["region"]) for entry in read_json(out / SUPPORT)["parts"]}


# --------------------------------------------------------------------------- ingest + decomposition + density

def gen_data(name: str, n: int, seed: int, path: Path) -> Path:
    with stage("gen-data"):
        samples = datagen.generate(name, n, seed)
        write_samples(path, samples)
        logger.info("wrote %d %s samples to %s", samples.shape[0], name, path)
        return path


def ingest(config: PipelineConfig, out: Path, samples_path: Optional[Path] = None) -> np.ndarray:
    with stage("ingest"):
        builtin = samples_path is None and config.input in datagen.BUILTIN_DATASETS
        if builtin:
            samples = datagen.generate(config.input, config.n_samples, config.seed)
        else:
            samples = read_samples(samples_path or config.input)
        config.validate(samples.shape[1])

        scaler_bounds = None
        if config.scale_minmax:
            scaler = FeatureScaler()
            samples = scaler.fit_transform(samples)
            scaler_bounds = scaler.bounds()

        n, d = samples.shape
        order = np.random.default_rng(config.seed).permutation(n)
        n_test = int(round(config.test_fraction * n))
        test = samples[np.sort(order[:n_test])]
        train = samples[np.sort(order[n_test:])]
        write_samples(out / SAMPLES_TRAIN, train)
        _write_test_samples(out / SAMPLES_TEST, test, d)
        write_json(out / DATASET, {
            "input": config.input if samples_path is None else str(samples_path),
            "builtin": builtin,
            "n": n,
            "d": d,
            "n_train": train.shape[0],
            "n_test": test.shape[0],
            "scaler": scaler_bounds,
        })
        logger.info("ingested %d samples in %d dimension(s), %d held out", n, d, n_test)
        return train


def fit_density(config: PipelineConfig, out: Path, samples_path: Optional[Path] = None) -> Decomposition:
    """Ingest, decompose and estimate one density grid per part."""
    out.mkdir(parents=True, exist_ok=True)
    train = ingest(config, out, samples_path)
    n, d = train.shape

    with stage("decompose"):
        labels = np.zeros(n, dtype=int)
        graph = None
        noise = 0
        if config.clustering.enabled:
            clusters = dbscan(train, config.clustering.eps, config.clustering.min_pts)
            if clusters.k == 0:
                raise DataError("DBSCAN found no clusters; every sample is noise")
            labels = clusters.labels
            noise = clusters.noise_count
            weights = renormalize_weights(clusters.weights)
            mode = "clusters"
            layout = [(str(c), tuple(range(1, d + 1)), weights[c]) for c in range(clusters.k)]
        elif config.structure.enabled:
            dependency = pc_skeleton(train, config.structure.alpha, config.structure.max_cond)
            graph = dependency.to_dict()
            mode = "blocks" if len(dependency.components) > 1 else "none"
            layout = [(str(i), block, 1.0) for i, block in enumerate(dependency.components)]
        else:
            mode = "none"
            layout = [("0", tuple(range(1, d + 1)), 1.0)]
        write_frame(out / LABELS, pd.DataFrame({"cluster": labels}))

    with stage("fit-density"):
        entries = []
        frames = []
        for part, variables, weight in layout:
            columns = [v - 1 for v in variables]
            samples = train[labels == int(part)] if mode == "clusters" else train[:, columns]
            h = _bandwidth(config, samples)
            reflect = [config.density.reflect.get(v) for v in variables]
            if any(bound is not None for bound in reflect):
                model = kde_fit_reflected(samples, h, reflect)
            else:
                model = kde_fit(samples, h)
            count = per_axis(config.density.grid_count, len(variables), MAX_GRID_NODES)
            padding = config.density.padding if config.density.padding is not None else 4.0 * h
            grid = GridSpec.covering(samples, count, padding)
            values = density_grid(model, grid)
            logger.info("part %s: %d samples, bandwidth %.6g, grid %s", part, samples.shape[0], h, grid.shape)

            frame = pd.DataFrame(grid.points(), columns=sample_header(len(variables)))
            frame.insert(0, "part", part)
            frame["density"] = values.ravel()
            frames.append(frame)
            entries.append({
                "part": part,
                "variables": list(variables),
                "weight": weight,
                "n_train": samples.shape[0],
                "bandwidth": h,
                "grid": grid.to_dict(),
            })
        columns = ["part"] + sample_header(max(len(v) for _, v, _ in layout)) + ["density"]
        write_frame(out / DENSITY_GRID, pd.concat(frames, ignore_index=True).reindex(columns=columns))
        write_json(out / COMPONENTS, {"mode": mode, "d": d, "noise": noise, "graph": graph, "parts": entries})
    return load_decomposition(out)


def _bandwidth(config: PipelineConfig, samples: np.ndarray) -> float:
    if config.density.bandwidth != "cv":
        return float(config.density.bandwidth)
    candidates = config.density.candidates or default_candidates(samples)
    return cv_bandwidth(samples, candidates, config.density.folds, config.seed)


# --------------------------------------------------------------------------- support

def find_support(config: PipelineConfig, out: Path) -> Dict[str, object]:
    with stage("find-support"):
        decomposition = load_decomposition(out)
        densities = load_density_grids(out, decomposition)
        entries = []
        for part in decomposition.parts:
            density = densities[part.part]
            threshold = None
            if config.support.method == "hull":
                if part.d != 2:
                    raise ConfigError(f"hull support needs 2-dimensional parts, part {part.part} has d={part.d}")
                region = convex_hull(part.train)
            else:
                threshold = config.support.tau * float(np.max(density.values))
                region = level_set_support(density.values, density.grid, threshold)
            region = shrink_region(region, config.support.shrink_factor)
            size = float(region.area) if config.support.method == "hull" else int(region.mask.sum())
            logger.info("part %s: %s support of size %s", part.part, config.support.method, size)
            entries.append({
                "part": part.part,
                "method": config.support.method,
                "threshold": threshold,
                "size": size,
                "region": region.to_dict(),
            })
        write_json(out / SUPPORT, {"parts": entries})
    return load_supports(out)


# --------------------------------------------------------------------------- symbolic regression

def _part_config(config: PipelineConfig, index: int, labels: np.ndarray) -> SrConfig:
    c = replace(config.sr, seed=datagen.shard_seed(config.sr.seed, index), threads=config.threads)
    if config.sr_loss is not None:
        c = c.with_regime(config.sr_loss, labels)
    return c


def _entry_rows(part: str, front: ParetoFront, t, region, held_out: np.ndarray, config: PipelineConfig) -> List[dict]:
    """Per front entry: negative-prediction flag and normalized held-out log-likelihood."""
    resolution = per_axis(config.validation.resolution, t.d, MAX_GRID_NODES)
    rows = []
    for complexity, value, e in front.sorted_entries():
        predictions = [evaluate_batch(e, t.grid_points)]
        if held_out.shape[0]:
            predictions.append(evaluate_batch(e, held_out))
        negative = bool(np.any(np.concatenate(predictions) < 0))
        score, clipped = float("nan"), 0
        try:
            _, normalized = normalize_expression(e, region, resolution)
            if held_out.shape[0]:
                score, clipped = mean_log_likelihood(normalized, held_out, config.validation.clip_threshold)
        except NonPositiveVolume as err:
            logger.debug("part %s, complexity %d: %s", part, complexity, err)
        rows.append({
            "part": part,
            "complexity": complexity,
            "loss": value,
            "expression": to_string(e),
            "negative": negative,
            "mean_log_likelihood": score,
            "clipped": clipped,
        })
    return rows


def select_expression(part: str, front: ParetoFront, points: np.ndarray, peak: float) -> Expression:
    """Lowest-loss front entry that stays finite and within BLOWUP_FACTOR * peak on the points.

    A part is fitted on its own support only, but the combined model is validated on a grid
    covering every sample, where complex entries can blow up. Without a bounded entry the
    lowest-loss finite one is used; likelihood-only losses do not bound the scale.
    """
    bound = BLOWUP_FACTOR * peak
    finite = []
    for complexity, _, e in sorted(front.sorted_entries(), key=lambda entry: (entry[1], entry[0])):
        prediction = evaluate_batch(e, points)
        if not np.all(np.isfinite(prediction)):
            logger.info("part %s: complexity %d is not finite on the validation grid, skipped", part, complexity)
            continue
        if float(np.max(np.abs(prediction))) <= bound:
            return e
        finite.append(e)
    if not finite:
        raise NumericalError(f"part {part}: no pareto entry stays finite on the validation grid")
    logger.warning("part %s: every finite entry exceeds %g times the density peak", part, BLOWUP_FACTOR)
    return finite[0]


def _validation_points(config: PipelineConfig, samples: np.ndarray, variables: Sequence[int]) -> np.ndarray:
    columns = samples[:, [v - 1 for v in variables]]
    return GridSpec.covering(columns, per_axis(config.density.grid_count, len(variables), MAX_GRID_NODES), 0.0).points()


def _combined(decomposition: Decomposition, best: Dict[str, Expression]) -> Expression:
    parts = decomposition.parts
    if decomposition.mode == "clusters":
        return recombine_additive([(p.weight, best[p.part]) for p in parts]).expression
    if decomposition.mode == "blocks":
        return recombine_multiplicative([(p.variables, best[p.part]) for p in parts]).expression
    return best[parts[0].part]


def combined_surrogate(decomposition: Decomposition, densities: Dict[str, GridDensity]) -> Callable:
    """Decomposed surrogate densities recombined like their expressions."""
    parts = decomposition.parts

    def evaluate(points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if decomposition.mode == "clusters":
            return sum(p.weight * densities[p.part](points) for p in parts)
        total = np.ones(points.shape[0])
        for p in parts:
            total = total * densities[p.part](points[:, [v - 1 for v in p.variables]])
        return total

    return evaluate


def run_sr(config: PipelineConfig, out: Path) -> Expression:
    with stage("run-sr"):
        decomposition = load_decomposition(out)
        densities = load_density_grids(out, decomposition)
        supports = load_supports(out)
        samples = np.concatenate(_load_samples(out), axis=0)
        rows = []
        fronts = []
        best = {}
        for index, part in enumerate(decomposition.parts):
            resolution = per_axis(config.support.resolution, part.d, MAX_TRAINING_NODES)
            t = build_training_set(densities[part.part], supports[part.part], resolution, part.train)
            c = _part_config(config, index, t.labels)
            front = evolve(t, c)
            if not len(front):
                raise DataError(f"part {part.part}: no expression reached a finite loss")
            points = _validation_points(config, samples, part.variables)
            best[part.part] = select_expression(part.part, front, points, float(np.max(densities[part.part].values)))
            held_out = part.test if part.test.shape[0] else part.train
            rows.extend(_entry_rows(part.part, front, t, supports[part.part], held_out, config))
            fronts.append({"part": part.part, "variables": list(part.variables), "weight": part.weight,
                           "front": front.to_dict()})
            logger.info("part %s: %d pareto entries, best %s", part.part, len(front), to_string(best[part.part]))

        combined = _combined(decomposition, best)
        source = "parts"
        if config.refine_iterations > 0 and len(decomposition.parts) > 1:
            combined, refined_rows, refined_front = _refine(config, out, decomposition, densities, combined)
            rows.extend(refined_rows)
            fronts.append({"part": REFINED_PART, "variables": list(range(1, decomposition.d + 1)), "weight": 1.0,
                           "front": refined_front.to_dict()})
            source = REFINED_PART

        write_json(out / PARETO_JSON, {
            "loss_regime": config.sr_loss,
            "loss_weights": list(config.sr.loss_weights),
            "parts": fronts,
            "combined": {"expression": to_string(combined), "var_count": combined.var_count, "source": source},
        })
        write_frame(out / PARETO_CSV, pd.DataFrame(rows, columns=[
            "part", "complexity", "loss", "expression", "negative", "mean_log_likelihood", "clipped",
        ]))
        logger.info("combined model: %s", to_string(combined))
        return combined


def _refine(config, out, decomposition, densities, seed_expression):
    """Warm-started SR on the full problem, seeded with the recombined expression."""
    train, test = _load_samples(out)
    d = decomposition.d
    surrogate = combined_surrogate(decomposition, densities)
    grid = GridSpec.covering(train, per_axis(config.density.grid_count, d, MAX_GRID_NODES), 0.0)
    values = surrogate(grid.points()).reshape(grid.shape)
    region = level_set_support(values, grid, config.support.tau * float(np.max(values)))
    t = build_training_set(surrogate, region, per_axis(config.support.resolution, d, MAX_TRAINING_NODES), train)
    c = _part_config(config, len(decomposition.parts), t.labels)
    c = replace(c, niterations=config.refine_iterations, maxsize=max(c.maxsize, seed_expression.complexity))
    seed_front = ParetoFront()
    seed_front.entries[seed_expression.complexity] = (loss(seed_expression, t, c), seed_expression)
    populations = warm_start(seed_front, c, d, np.random.default_rng(c.seed))
    front = evolve(t, c, populations)
    rows = _entry_rows(REFINED_PART, front, t, region, test if test.shape[0] else train, config)
    points = _validation_points(config, np.concatenate([train, test], axis=0), range(1, d + 1))
    return select_expression(REFINED_PART, front, points, float(np.max(values))), rows, front


# --------------------------------------------------------------------------- validation

def ground_truth(out: Path) -> Optional[Callable]:
    """Builtin ground truth in working coordinates (min-max scaling adds its Jacobian)."""
    dataset = read_json(out / DATASET)
    if not dataset["builtin"]:
        return None
    try:
        truth = datagen.builtin_density(dataset["input"])
    except ConfigError:
        return None
    scaler = dataset.get("scaler")
    if not scaler:
        return truth
    lo = np.asarray(scaler["min"], dtype=float)
    span = np.asarray(scaler["max"], dtype=float) - lo
    jacobian = float(np.prod(span))
    return lambda u: truth(lo + np.asarray(u, dtype=float) * span) * jacobian


def validate_run(config: PipelineConfig, out: Path) -> dict:
    with stage("validate"):
        decomposition = load_decomposition(out)
        densities = load_density_grids(out, decomposition)
        pareto = read_json(out / PARETO_JSON)
        combined = parse(pareto["combined"]["expression"], pareto["combined"]["var_count"])
        surrogate = combined_surrogate(decomposition, densities)
        train, test = _load_samples(out)
        samples = np.concatenate([train, test], axis=0)

        regions = dict(config.validation.regions)
        resolution = per_axis(config.validation.resolution, decomposition.d, MAX_GRID_NODES)
        report = local_mass_report(samples, {"KDE": surrogate, "SR": combined}, regions, resolution)
        write_frame(out / MASS_REPORT, report.to_table(), index=True)

        truth = ground_truth(out)
        reference = truth if truth is not None else surrogate
        grid = GridSpec.covering(samples, per_axis(config.density.grid_count, decomposition.d, MAX_GRID_NODES), 0.0)
        residual, max_abs, max_pred = residual_grid(combined, reference, grid)
        if not np.all(np.isfinite(residual)) or not np.isfinite(max_pred):
            bad = int(np.sum(~np.isfinite(residual)))
            raise NumericalError(f"combined model is not finite at {bad} of {residual.size} validation grid nodes")
        grid_mse = float(np.mean(residual ** 2))
        if not np.isfinite(grid_mse):
            raise NumericalError("grid MSE of the combined model overflows")
        frame = pd.DataFrame(grid.points(), columns=sample_header(decomposition.d))
        frame["prediction"] = evaluate_batch(combined, grid.points())
        frame["reference"] = frame["prediction"] - residual.ravel()
        frame["residual"] = residual.ravel()
        write_frame(out / RESIDUAL_GRID, frame)

        summary = {
            "combined_expression": to_string(combined),
            "reference": "ground_truth" if truth is not None else "surrogate",
            "grid_mse": grid_mse,
            "max_abs_residual": max_abs,
            "max_prediction": max_pred,
            "mass_report": report.to_table().to_dict(orient="index"),
        }
        write_json(out / VALIDATION, summary)
        logger.info("combined model grid MSE vs %s: %.6g", summary["reference"], summary["grid_mse"])
        return summary


# --------------------------------------------------------------------------- report

def loss_regime_report(run_dirs: Sequence[Path], path: Path) -> pd.DataFrame:
    """Complexity vs normalized held-out log-likelihood per loss regime, across runs."""
    with stage("report"):
        frames = []
        for run in run_dirs:
            run = Path(run)
            pareto = read_json(run / PARETO_JSON)
            regime = pareto.get("loss_regime") or ",".join(str(w) for w in pareto["loss_weights"])
            frame = read_pareto_csv(run / PARETO_CSV)
            frame.insert(0, "run", run.name)
            frame.insert(0, "loss_regime", regime)
            frames.append(frame[["loss_regime", "run", "part", "complexity", "mean_log_likelihood", "negative"]])
        if not frames:
            raise ConfigError("report needs at least one run directory")
        table = pd.concat(frames, ignore_index=True)
        write_frame(path, table)
        for regime, group in table.groupby("loss_regime", sort=False):
            logger.info("%s: best mean log-likelihood %.6g", regime, group["mean_log_likelihood"].max())
        return table


def best_by_regime(table: pd.DataFrame) -> Dict[str, float]:
    return {str(k): float(v) for k, v in table.groupby("loss_regime", sort=False)["mean_log_likelihood"].max().items()}
