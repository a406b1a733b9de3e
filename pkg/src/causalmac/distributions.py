"""Gaussian / categorical output distributions and seeded sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_PROB_TOL = 1e-9


@dataclass
class Gaussian:
    """Diagonal Gaussian parameterized by mean and log standard deviation
    (the log keeps sigma positive by construction)."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.log_std = np.atleast_1d(np.asarray(self.log_std, dtype=np.float64))
        if self.mean.shape != self.log_std.shape:
            raise ContractError("mean and log_std shapes differ")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def nll(self, x) -> float:
        """Negative log density at x."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        z = (x - self.mean) / self.std
        return float(np.sum(0.5 * z * z + self.log_std + 0.5 * np.log(2.0 * np.pi)))


@dataclass
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ContractError("categorical probs must be a vector")
        if np.any(self.probs < -_PROB_TOL):
            raise ContractError("categorical probs must be nonnegative")
        if abs(self.probs.sum() - 1.0) > _PROB_TOL:
            raise ContractError(f"categorical probs sum to {self.probs.sum()}, not 1")

    def nll(self, index: int) -> float:
        return float(-np.log(self.probs[int(index)]))

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


Distribution = Gaussian | Categorical


def categorical_from_logits(logits: np.ndarray) -> Categorical:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return Categorical(e / e.sum())


def sample(dist: Distribution, rng: np.random.Generator):
    """Draw one value. Categorical uses a single uniform draw through the
    inverse CDF; Gaussian uses one standard-normal draw per dimension."""
    if isinstance(dist, Categorical):
        u = rng.random()
        return int(np.searchsorted(np.cumsum(dist.probs), u, side="right").clip(
            0, len(dist.probs) - 1))
    if isinstance(dist, Gaussian):
        draw = rng.standard_normal(dist.mean.shape)
        return dist.mean + dist.std * draw
    raise ContractError(f"unknown distribution type {type(dist)!r}")
