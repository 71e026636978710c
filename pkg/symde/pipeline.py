import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from .core.config import PipelineConfig
from .core.utils import package_versions, read_json, write_json
from . import stages

logger = logging.getLogger(__name__)

ARTIFACTS = (
    stages.SAMPLES_TRAIN,
    stages.SAMPLES_TEST,
    stages.DATASET,
    stages.LABELS,
    stages.COMPONENTS,
    stages.DENSITY_GRID,
    stages.SUPPORT,
    stages.PARETO_JSON,
    stages.PARETO_CSV,
    stages.MASS_REPORT,
    stages.RESIDUAL_GRID,
    stages.VALIDATION,
)


@dataclass
class FitResult:
    part: str
    variables: List[int]
    weight: float
    bandwidth: float
    support_size: float
    front_size: int
    best_expression: str

    def to_dict(self) -> dict:
        return {
            "part": self.part,
            "variables": self.variables,
            "weight": self.weight,
            "bandwidth": self.bandwidth,
            "support_size": self.support_size,
            "front_size": self.front_size,
            "best_expression": self.best_expression,
        }


def fit_results(out: Path) -> List[FitResult]:
    """Collect the per-part summary from the stage artifacts in ``out``."""
    components = read_json(out / stages.COMPONENTS)
    support = {entry["part"]: entry for entry in read_json(out / stages.SUPPORT)["parts"]}
    fronts = {entry["part"]: entry for entry in read_json(out / stages.PARETO_JSON)["parts"]}
    results = []
    for entry in components["parts"]:
        front = fronts[entry["part"]]["front"]["entries"]
        best = min(front, key=lambda e: (e["loss"], e["complexity"]))
        results.append(FitResult(
            part=entry["part"],
            variables=entry["variables"],
            weight=entry["weight"],
            bandwidth=entry["bandwidth"],
            support_size=support[entry["part"]]["size"],
            front_size=len(front),
            best_expression=best["expression"],
        ))
    return results


def write_manifest(config: PipelineConfig, out: Path) -> dict:
    dataset = read_json(out / stages.DATASET)
    validation = read_json(out / stages.VALIDATION)
    pareto = read_json(out / stages.PARETO_JSON)
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "sr_seed": config.sr.seed,
        "threads": config.threads,
        "versions": package_versions(),
        "dataset": dataset,
        "parts": [result.to_dict() for result in fit_results(out)],
        "combined": {
            "expression": pareto["combined"]["expression"],
            "source": pareto["combined"]["source"],
            "reference": validation["reference"],
            "grid_mse": validation["grid_mse"],
        },
        "artifacts": [name for name in ARTIFACTS if (out / name).exists()],
    }
    write_json(out / stages.MANIFEST, manifest)
    return manifest


def run_pipeline(config: PipelineConfig, samples_path: Optional[Path] = None) -> dict:
    """
    Run every stage in order against ``config.output_dir``.

    Each stage reads what the previous one wrote, so this is exactly the
    sequence of standalone subcommands.
    """
    out = Path(config.output_dir)
    logger.info("pipeline run into %s (seed %d, %d thread(s))", out, config.seed, config.threads)
    stages.fit_density(config, out, samples_path)
    stages.find_support(config, out)
    stages.run_sr(config, out)
    stages.validate_run(config, out)
    manifest = write_manifest(config, out)
    logger.info("pipeline finished: %s", manifest["combined"]["expression"])
    return manifest
