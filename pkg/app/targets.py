"""Target Posteriors

Unnormalized log-densities with full-data and minibatch gradient access.
A target is described by its potential energy U(theta) = -log p(X|theta) - log p(theta);
the normalizing constant is never computed.

Shipped targets and the constants they drop from U:
- GaussianTarget: U = 0.5 * sum((theta - mean)^2 / variance), Gaussian normalizer dropped.
- GaussianMixtureTarget: U = -log(0.5 * exp(-|theta - s|^2 / 2) + 0.5 * exp(-|theta + s|^2 / 2)),
  component normalizers dropped.
- DoubleWellTarget: U = sum((theta^2 - 1)^2 / 4), nothing else to drop.
- LogisticRegressionTarget: U = sum_i softplus(-y_i theta.x_i) + alpha/2 |theta|^2,
  prior normalizer dropped.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import log_expit, logsumexp

from tools.datasets import Dataset

logger = logging.getLogger(__name__)

DEFAULT_PRIOR_PRECISION = 0.01


class ContractViolation(ValueError):
    """Raised when an argument breaks an operation's preconditions"""
    pass


class NumericOverflowError(ArithmeticError):
    """Raised when a gradient evaluates to a non-finite value"""
    pass


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic Gaussian prior N(mean, variance * I), used to draw initial particles."""
    mean: np.ndarray
    variance: float

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((count, self.mean.shape[0]))


class TargetModel:
    """
    Differentiable unnormalized log-density.

    Subclasses implement `_log_density` and `_score` on particle matrices of
    shape (M, r). `batch=None` means the full dataset. Evaluation is read-only
    after construction.
    """

    name = "target"

    def __init__(self, dim: int, dataset_size: int = 0):
        if dim < 1:
            raise ContractViolation(f"Target dimension must be positive, got {dim}")
        self.dim = dim
        self.dataset_size = dataset_size

    @property
    def prior(self) -> Optional[GaussianPrior]:
        return None

    @property
    def true_moments(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """(mean, covariance) when known in closed form."""
        return None

    def _log_density(self, thetas: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _score(self, thetas: np.ndarray, batch: Optional[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def check_particles(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        if thetas.ndim != 2 or thetas.shape[1] != self.dim:
            raise ContractViolation(
                f"{self.name}: expected particles of shape (M, {self.dim}), got {thetas.shape}"
            )
        return thetas

    def log_unnorm_density(self, theta: np.ndarray) -> float:
        return float(self._log_density(self._as_row(theta))[0])

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        return self._checked(self._score(self._as_row(theta), None))[0]

    def stochastic_grad(self, theta: np.ndarray, batch: Optional[np.ndarray]) -> np.ndarray:
        return self._checked(self._score(self._as_row(theta), self._check_batch(batch)))[0]

    def score(self, thetas: np.ndarray, batch: Optional[np.ndarray] = None) -> np.ndarray:
        """Row-wise gradient of log p(theta|X) (minibatch estimate when `batch` is given)."""
        return self._checked(self.raw_score(thetas, batch))

    def raw_score(self, thetas: np.ndarray, batch: Optional[np.ndarray] = None) -> np.ndarray:
        """Like `score` but leaves non-finite rows in place for the caller to report."""
        with np.errstate(over="ignore", invalid="ignore"):
            return self._score(self.check_particles(thetas), self._check_batch(batch))

    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        return self._log_density(self.check_particles(thetas))

    def _as_row(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ContractViolation(f"{self.name}: expected a vector of length {self.dim}, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ContractViolation(f"{self.name}: theta must be finite")
        return theta[None, :]

    def _check_batch(self, batch: Optional[np.ndarray]) -> Optional[np.ndarray]:
        # Analytic targets carry no data term, the batch is ignored
        if self.dataset_size == 0 or batch is None:
            return None
        batch = np.asarray(batch, dtype=np.intp)
        if batch.size == 0:
            raise ContractViolation(f"{self.name}: minibatch must be nonempty")
        if batch.min() < 0 or batch.max() >= self.dataset_size:
            raise ContractViolation(f"{self.name}: minibatch indices outside [0, {self.dataset_size})")
        return batch

    @staticmethod
    def _checked(grads: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(grads)):
            raise NumericOverflowError("Gradient is not finite; reduce the stepsize")
        return grads


class GaussianTarget(TargetModel):
    """Axis-aligned Gaussian N(mean, diag(variance))."""

    name = "gaussian"

    def __init__(self, dim: int = 1, mean=0.0, variance=1.0):
        super().__init__(dim)
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()
        self.variance = np.broadcast_to(np.asarray(variance, dtype=float), (dim,)).copy()
        if np.any(self.variance <= 0):
            raise ContractViolation("Gaussian variance must be positive")

    @property
    def true_moments(self):
        return self.mean.copy(), np.diag(self.variance)

    def _log_density(self, thetas):
        return -0.5 * np.sum((thetas - self.mean) ** 2 / self.variance, axis=1)

    def _score(self, thetas, batch):
        return -(thetas - self.mean) / self.variance


class GaussianMixtureTarget(TargetModel):
    """Equal-weight mixture of N(+s, I) and N(-s, I) with s = separation * ones(dim)."""

    name = "mixture"

    def __init__(self, dim: int = 1, separation: float = 2.0):
        super().__init__(dim)
        self.offset = np.full(dim, float(separation))

    @property
    def true_moments(self):
        return np.zeros(self.dim), np.eye(self.dim) + np.outer(self.offset, self.offset)

    def _component_logits(self, thetas):
        return np.stack([
            -0.5 * np.sum((thetas - self.offset) ** 2, axis=1),
            -0.5 * np.sum((thetas + self.offset) ** 2, axis=1),
        ], axis=1)

    def _log_density(self, thetas):
        return logsumexp(self._component_logits(thetas), axis=1) - np.log(2.0)

    def _score(self, thetas, batch):
        logits = self._component_logits(thetas)
        weights = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        return -(weights[:, :1] * (thetas - self.offset) + weights[:, 1:] * (thetas + self.offset))


class DoubleWellTarget(TargetModel):
    """Separable double well U = sum((theta^2 - 1)^2 / 4), modes at +-1 per coordinate."""

    name = "double_well"

    def _log_density(self, thetas):
        return -0.25 * np.sum((thetas ** 2 - 1.0) ** 2, axis=1)

    def _score(self, thetas, batch):
        return -(thetas ** 3 - thetas)


class LogisticRegressionTarget(TargetModel):
    """
    Bayesian logistic regression with labels in {-1, +1}.

    Likelihood sigmoid(y * theta.x) per point, prior N(0, alpha^-1 I).
    Log-sigmoid goes through scipy's log_expit so |theta.x| > 30 does not overflow.
    """

    name = "logistic"

    def __init__(self, train: Dataset, prior_precision: float = DEFAULT_PRIOR_PRECISION):
        super().__init__(train.dim, dataset_size=train.size)
        if prior_precision <= 0:
            raise ContractViolation(f"Prior precision must be positive, got {prior_precision}")
        self.features = train.features
        self.labels = train.labels
        self.prior_precision = float(prior_precision)

    @property
    def prior(self):
        return GaussianPrior(np.zeros(self.dim), 1.0 / self.prior_precision)

    def _log_density(self, thetas):
        margins = self.labels[:, None] * (self.features @ thetas.T)
        log_lik = np.sum(log_expit(margins), axis=0)
        return log_lik - 0.5 * self.prior_precision * np.sum(thetas ** 2, axis=1)

    def _score(self, thetas, batch):
        prior_grad = -self.prior_precision * thetas
        if self.dataset_size == 0:
            return prior_grad
        if batch is None:
            features, labels, scale = self.features, self.labels, 1.0
        else:
            features, labels = self.features[batch], self.labels[batch]
            scale = self.dataset_size / batch.size
        margins = labels[:, None] * (features @ thetas.T)
        # d/dz log sigmoid(z) = sigmoid(-z) = exp(log_expit(-z))
        weights = labels[:, None] * np.exp(log_expit(-margins))
        return prior_grad + scale * (weights.T @ features)


@dataclass
class MinibatchSchedule:
    """
    Shuffled-epoch minibatches without replacement.

    Each epoch draws a fresh permutation and yields floor(N / n) batches of
    size n; when n does not divide N the trailing N mod n indices of that
    permutation are skipped, so every index appears at most once per epoch
    (exactly once when n divides N).
    """
    dataset_size: int
    batch_size: int
    seed: int
    _rng: np.random.Generator = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)
    _cursor: int = field(init=False, default=0)

    BATCH_STREAM = 0x5EED_BA7C

    def __post_init__(self):
        if self.dataset_size > 0:
            if self.batch_size < 1:
                raise ContractViolation(f"Batch size must be positive, got {self.batch_size}")
            if self.batch_size > self.dataset_size:
                logger.warning(f"Batch size {self.batch_size} exceeds dataset size {self.dataset_size}; using full batches")
                self.batch_size = self.dataset_size
        self._rng = np.random.default_rng([self.seed, self.BATCH_STREAM])
        self._order = np.empty(0, dtype=np.intp)
        self._cursor = 0

    @property
    def batches_per_epoch(self) -> int:
        return self.dataset_size // self.batch_size if self.dataset_size else 1

    def next_batch(self) -> Optional[np.ndarray]:
        if self.dataset_size == 0:
            return None
        if self._cursor + self.batch_size > self._order.size:
            self._order = self._rng.permutation(self.dataset_size)
            self._cursor = 0
        batch = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch


def potential_energy(model: TargetModel, theta: np.ndarray) -> float:
    """U(theta) = -log p(theta|X) under the model's documented constant convention."""
    return -model.log_unnorm_density(theta)


def grad_log_posterior(model: TargetModel, theta: np.ndarray) -> np.ndarray:
    return model.grad_log_density(theta)


def stochastic_grad(model: TargetModel, theta: np.ndarray, batch: Optional[np.ndarray]) -> np.ndarray:
    """grad log p(theta) + (N/n) * sum over batch of grad log p(x_i|theta)."""
    if model.dataset_size > 0 and (batch is None or len(batch) == 0):
        raise ContractViolation("stochastic_grad needs a nonempty minibatch")
    return model.stochastic_grad(theta, batch)


def logistic_metrics(model: LogisticRegressionTarget, particles: np.ndarray, test: Dataset) -> Tuple[float, float]:
    """
    Posterior-predictive accuracy and mean log-likelihood on a test set.

    The predictive probability of the observed label is the particle average of
    sigmoid(y * theta.x); accuracy counts points where it exceeds 0.5.
    """
    particles = model.check_particles(particles)
    if test.size == 0:
        raise ContractViolation("Test set is empty")
    if test.dim != model.dim:
        raise ContractViolation(f"Test features have dimension {test.dim}, model expects {model.dim}")
    margins = test.labels[:, None] * (test.features @ particles.T)
    log_pred = logsumexp(log_expit(margins), axis=1) - np.log(particles.shape[0])
    accuracy = float(np.mean(log_pred > np.log(0.5)))
    return accuracy, float(np.mean(log_pred))


def build_target(kind: str, dim: int = 1, mean: float = 0.0, separation: float = 2.0,
                 train: Optional[Dataset] = None, prior_precision: float = DEFAULT_PRIOR_PRECISION) -> TargetModel:
    """Construct a shipped target by name."""
    if kind == "gaussian":
        return GaussianTarget(dim, mean=mean)
    if kind == "mixture":
        return GaussianMixtureTarget(dim, separation=separation)
    if kind == "double_well":
        return DoubleWellTarget(dim)
    if kind == "logistic":
        if train is None:
            raise ContractViolation("Logistic target needs a training dataset")
        return LogisticRegressionTarget(train, prior_precision=prior_precision)
    raise ContractViolation(f"Unknown target kind '{kind}'")
