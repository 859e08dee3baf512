"""Synthetic Logistic Data

Generates a desk-scale binary-classification task: true weights w ~ N(0, I),
features x ~ N(0, I), labels y = +1 with probability sigmoid(w.x).
The rows are split 80/20 into train.csv and test.csv.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from tools.datasets import Dataset, DatasetError, write_dataset_csv

logger = logging.getLogger(__name__)

SYNTH_KINDS = ("logistic",)
TRAIN_FRACTION = 0.8
MIN_ROWS = 10


class SynthError(DatasetError):
    """Raised when synthetic data cannot be generated with the requested sizes"""
    pass


@dataclass(frozen=True)
class SyntheticTask:
    train: Dataset
    test: Dataset
    weights: np.ndarray


def make_logistic_task(n: int, d: int, seed: int) -> SyntheticTask:
    """Draw the task for (n, d, seed); the same arguments give the same arrays."""
    if n < MIN_ROWS:
        raise SynthError(f"Need at least {MIN_ROWS} rows, got n={n}")
    if d < 1:
        raise SynthError(f"Need at least one feature, got d={d}")
    if seed < 0:
        raise SynthError(f"Seed must be nonnegative, got {seed}")
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(d)
    features = rng.standard_normal((n, d))
    labels = np.where(rng.uniform(size=n) < expit(features @ weights), 1.0, -1.0)
    if n >= 20 and np.unique(labels).size < 2:
        raise SynthError(f"Seed {seed} produced a single label class")

    order = rng.permutation(n)
    cut = int(round(TRAIN_FRACTION * n))
    train, test = order[:cut], order[cut:]
    return SyntheticTask(
        train=Dataset(features[train], labels[train]),
        test=Dataset(features[test], labels[test]),
        weights=weights,
    )


def write_task(task: SyntheticTask, out: Path) -> Tuple[Path, Path]:
    out = Path(out)
    train_path = write_dataset_csv(out / "train.csv", task.train)
    test_path = write_dataset_csv(out / "test.csv", task.test)
    logger.info(f"Wrote {task.train.size} training and {task.test.size} test rows to {out}")
    return train_path, test_path


def cmd_synth(kind: str, n: int, d: int, seed: int, out: Path) -> Tuple[Path, Path]:
    if kind not in SYNTH_KINDS:
        raise SynthError(f"Unknown synthetic task '{kind}', expected one of {', '.join(SYNTH_KINDS)}")
    return write_task(make_logistic_task(n, d, seed), out)


def map_fit(train: Dataset, prior_precision: float = 0.01) -> np.ndarray:
    """MAP weights of the logistic posterior (L-BFGS on the potential energy)."""

    def potential(w):
        margins = train.labels * (train.features @ w)
        value = -np.sum(log_expit(margins)) + 0.5 * prior_precision * w @ w
        grad = -train.features.T @ (train.labels * expit(-margins)) + prior_precision * w
        return value, grad

    result = minimize(potential, np.zeros(train.dim), jac=True, method="L-BFGS-B")
    if not result.success:
        logger.warning(f"MAP fit stopped early: {result.message}")
    return result.x


def accuracy(weights: np.ndarray, data: Dataset) -> float:
    return float(np.mean(data.labels * (data.features @ weights) > 0))
