"""Dataset Loaders

Reads binary-classification datasets from dense CSV (label first, then features)
or libsvm sparse text (label then 1-based index:value pairs). Paths may also be
http(s) URLs, fetched with httpx. Also hosts the atomic CSV writer used for every
file the harness emits.
"""

import csv
import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import httpx
import numpy as np

logger = logging.getLogger(__name__)

FETCH_TIMEOUT = 10.0


class DatasetError(Exception):
    """Raised when a dataset is malformed or cannot be read"""
    pass


class DatasetFetchError(DatasetError):
    """Raised when a remote dataset download fails"""
    pass


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix (N x d) with labels in {-1, +1}."""
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=float)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DatasetError(f"Features {features.shape} and labels {labels.shape} do not line up")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(labels))):
            raise DatasetError("Dataset contains non-finite entries")
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise DatasetError("Labels must be -1 or +1")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_bias(self) -> "Dataset":
        return Dataset(np.hstack([self.features, np.ones((self.size, 1))]), self.labels)


def _normalize_labels(raw: np.ndarray, source: str) -> np.ndarray:
    """
    Map {-1, +1}, {0, 1} or other two-valued (e.g. 1/2) labels onto {-1, +1}.

    0 always means the negative class, also when a split holds only one class.
    """
    values = np.unique(raw)
    if np.all(np.isin(values, (-1.0, 1.0))):
        return raw
    if np.all(np.isin(values, (0.0, 1.0))):
        return np.where(raw == 1.0, 1.0, -1.0)
    if values.size == 1:
        raise DatasetError(f"{source}: a single label value {values[0]:g} does not say which class it is")
    if values.size == 2:
        logger.warning(f"{source}: mapping labels {values.tolist()} onto -1/+1")
        return np.where(raw == values.max(), 1.0, -1.0)
    raise DatasetError(f"{source}: expected binary labels, found {values.size} distinct values")


def read_text(path: str) -> str:
    """Read a local file or download an http(s) URL."""
    if path.startswith(("http://", "https://")):
        return fetch_text(path)
    try:
        return Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"Cannot read dataset '{path}': {e}")


def fetch_text(url: str) -> str:
    """
    Download a dataset file.

    Raises:
        DatasetFetchError: on timeouts, HTTP errors and transport failures
    """
    logger.info(f"Fetching dataset from {url}")
    try:
        with httpx.Client(timeout=FETCH_TIMEOUT, follow_redirects=True) as client:
            response = client.get(url)
            response.raise_for_status()
            return response.text
    except httpx.TimeoutException:
        raise DatasetFetchError(f"Download of {url} timed out")
    except httpx.HTTPStatusError as e:
        raise DatasetFetchError(f"Download of {url} failed with status {e.response.status_code}")
    except httpx.HTTPError as e:
        raise DatasetFetchError(f"Download of {url} failed: {e}")


def parse_csv(text: str, source: str = "<csv>") -> Dataset:
    """Dense CSV: first column label, remaining columns features. A non-numeric first row is a header."""
    rows = [row for row in csv.reader(io.StringIO(text)) if row]
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise DatasetError(f"{source}: no data rows")
    try:
        table = np.array([[float(value) for value in row] for row in rows])
    except ValueError as e:
        raise DatasetError(f"{source}: {e}")
    if table.ndim != 2 or table.shape[1] < 2:
        raise DatasetError(f"{source}: rows must have a label and at least one feature")
    return Dataset(table[:, 1:], _normalize_labels(table[:, 0], source))


def parse_libsvm(text: str, source: str = "<libsvm>", dim: Optional[int] = None) -> Dataset:
    """libsvm sparse rows `label idx:value ...` with 1-based indices."""
    labels, entries = [], []
    width = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        try:
            labels.append(float(tokens[0]))
            pairs = [(int(k), float(v)) for k, v in (token.split(":", 1) for token in tokens[1:])]
        except ValueError:
            raise DatasetError(f"{source}:{lineno}: malformed libsvm row")
        if any(k < 1 for k, _ in pairs):
            raise DatasetError(f"{source}:{lineno}: libsvm indices are 1-based")
        width = max([width] + [k for k, _ in pairs])
        entries.append(pairs)
    if not labels:
        raise DatasetError(f"{source}: no data rows")
    if dim is not None:
        if dim < width:
            raise DatasetError(f"{source}: feature index {width} exceeds declared dimension {dim}")
        width = dim
    features = np.zeros((len(labels), width))
    for row, pairs in enumerate(entries):
        for k, value in pairs:
            features[row, k - 1] = value
    return Dataset(features, _normalize_labels(np.array(labels), source))


def load_dataset(path: str, fmt: str = "csv", add_bias: bool = False, dim: Optional[int] = None) -> Dataset:
    """Load a dataset in `csv` or `libsvm` format, optionally appending a constant bias feature."""
    text = read_text(path)
    if fmt == "csv":
        dataset = parse_csv(text, source=path)
    elif fmt == "libsvm":
        dataset = parse_libsvm(text, source=path, dim=dim)
    else:
        raise DatasetError(f"Unknown dataset format '{fmt}'")
    logger.info(f"Loaded {dataset.size} rows x {dataset.dim} features from {path}")
    return dataset.with_bias() if add_bias else dataset


def format_float(value: float) -> str:
    return repr(float(value))


def write_csv_atomic(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a CSV through a temp file and rename, with '\\n' line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_dataset_csv(path: Path, dataset: Dataset) -> Path:
    header = ["label"] + [f"x{j + 1}" for j in range(dataset.dim)]
    rows = ([int(label)] + [format_float(v) for v in features]
            for label, features in zip(dataset.labels, dataset.features))
    return write_csv_atomic(path, header, rows)
