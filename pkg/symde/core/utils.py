import json
import math
import platform
import re
from enum import Enum
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler

from .errors import CsvFormatError, DataError, NonFiniteInput

FLOAT_FORMAT = "%.17g"
TRACKED_PACKAGES = ("numpy", "scipy", "scikit-learn", "pandas", "networkx", "python-dotenv")

PathLike = Union[str, Path]


def convert_numpy_to_python(obj: Any) -> Any:
    """
    Recursively convert NumPy types to standard Python types for JSON serialization.
    Non-finite floats become None.
    """
    if isinstance(obj, dict):
        return {str(k): convert_numpy_to_python(v) for k, v in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_numpy_to_python(i) for i in obj]
    elif isinstance(obj, Enum):
        return obj.value
    elif isinstance(obj, Path):
        return str(obj)
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    elif isinstance(obj, np.ndarray):
        return [convert_numpy_to_python(i) for i in obj.tolist()]
    else:
        return obj


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(convert_numpy_to_python(data), indent=2) + "\n")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"{path} does not exist") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e


def write_frame(path: PathLike, frame: pd.DataFrame, index: bool = False) -> Path:
    """CSV with floats at 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


# --------------------------------------------------------------------------- sample sets

def sample_header(d: int) -> List[str]:
    return [f"x{i}" for i in range(1, d + 1)]


def write_samples(path: PathLike, samples: np.ndarray) -> Path:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    return write_frame(path, pd.DataFrame(samples, columns=sample_header(samples.shape[1])))


_PARSER_LINE = re.compile(r"line (\d+)")


def read_samples(path: PathLike) -> np.ndarray:
    """Read a sample CSV with header x1..xd; any malformed row names its line."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"sample file {path} does not exist")
    try:
        frame = pd.read_csv(path, dtype=str, skip_blank_lines=False, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise CsvFormatError(str(path), 1, "file is empty") from e
    except pd.errors.ParserError as e:
        match = _PARSER_LINE.search(str(e))
        raise CsvFormatError(str(path), int(match.group(1)) if match else 0, str(e)) from e

    columns = [c.strip() for c in frame.columns]
    if columns != sample_header(len(columns)):
        raise CsvFormatError(str(path), 1, f"header must be x1..x{len(columns)}, got {','.join(columns)}")
    if frame.empty:
        raise CsvFormatError(str(path), 2, "no samples")
    stripped = frame.apply(lambda column: column.str.strip())
    coerced = stripped.apply(pd.to_numeric, errors="coerce")
    bad = ~np.isfinite(coerced.to_numpy(dtype=float)).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise CsvFormatError(str(path), row + 2, f"expected {len(columns)} finite numbers")
    # to_numeric is not correctly rounded; astype parses each cell exactly
    return stripped.astype(float).to_numpy()


# --------------------------------------------------------------------------- scaling

class FeatureScaler:
    """
    Min-max scaling of every column to [0, 1] before density estimation.
    The bounds go into the run manifest so expressions can be read in raw units.
    """

    def __init__(self):
        self.scaler = MinMaxScaler()

    def fit_transform(self, samples: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(samples)):
            raise NonFiniteInput("cannot scale non-finite samples")
        return self.scaler.fit_transform(samples)

    def transform(self, samples: np.ndarray) -> np.ndarray:
        return self.scaler.transform(samples)

    def inverse_transform(self, samples: np.ndarray) -> np.ndarray:
        return self.scaler.inverse_transform(samples)

    def bounds(self) -> Dict[str, List[float]]:
        return {"min": self.scaler.data_min_.tolist(), "max": self.scaler.data_max_.tolist()}


# --------------------------------------------------------------------------- provenance

def package_versions() -> Dict[str, Optional[str]]:
    versions: Dict[str, Optional[str]] = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    try:
        versions["symde"] = metadata.version("symde")
    except metadata.PackageNotFoundError:
        versions["symde"] = None
    return versions
