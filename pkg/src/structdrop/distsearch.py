"""Gradient-descent search for a dropout-pattern distribution.

Finds a probability vector over periods 1..n whose expected global dropout
rate matches a target while keeping the distribution spread out (so many
distinct sub-models get sampled). The vector is parameterized through a
softmax and optimized with plain gradient descent on

    loss = rate_weight * (rate(d) - target)^2
         + entropy_weight * (1/n) * sum_i d_i * ln(d_i)

The second term is the scaled negative entropy, so minimizing the loss
pushes entropy up. All search math runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numpy.random import Philox

PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class SearchConfig:
    """Hyperparameters for the distribution search.

    The two loss weights must sum to 1. `threshold` stops the descent once
    the loss change of an accepted step falls below it; the step size halves
    whenever a step would increase the loss.
    """

    rate_weight: float = 0.99
    entropy_weight: float = 0.01
    learning_rate: float = 0.1
    threshold: float = 1e-10
    max_iters: int = 50_000
    rate_tol: float = 0.01

    def __post_init__(self):
        if abs(self.rate_weight + self.entropy_weight - 1.0) > 1e-12:
            raise ValueError("rate_weight + entropy_weight must equal 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class PatternDistribution:
    """Probability vector over periods 1..max_period with its target rate."""

    probs: np.ndarray
    target_rate: float
    max_period: int
    iterations: int = 0
    final_loss: float = float("nan")

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)  # private copy
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or len(probs) != self.max_period:
            raise ValueError(f"need {self.max_period} probabilities, got shape {probs.shape}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError("probabilities must be non-negative and sum to 1")
        if not 0 <= self.target_rate < 1:
            raise ValueError(f"target rate must be in [0, 1), got {self.target_rate}")

    @property
    def achieved_rate(self) -> float:
        return expected_global_rate(self)


class NoConvergenceError(RuntimeError):
    """Search finished without reaching the target rate tolerance."""

    def __init__(self, message: str, distribution: PatternDistribution, rate_error: float):
        super().__init__(message)
        self.distribution = distribution
        self.rate_error = rate_error


def rate_vector(n: int) -> np.ndarray:
    """Per-period drop rates [0, 1/2, 2/3, ..., (n-1)/n]."""
    if n < 1:
        raise ValueError(f"need at least one period, got {n}")
    periods = np.arange(1, n + 1, dtype=np.float64)
    return (periods - 1.0) / periods


def expected_global_rate(dist: PatternDistribution) -> float:
    """Expected fraction of units dropped: probs . rate_vector."""
    return float(dist.probs @ rate_vector(dist.max_period))


def softmax(v: np.ndarray) -> np.ndarray:
    w = np.exp(v - np.max(v))
    return w / w.sum()


def loss(v: np.ndarray, target_rate: float, cfg: SearchConfig) -> tuple[float, np.ndarray]:
    """Loss value at logits v; also returns d = softmax(v).

    Negative-entropy term uses the natural log with 0*ln(0) = 0.
    """
    v = np.asarray(v, dtype=np.float64)
    n = len(v)
    d = softmax(v)
    rate_err = float(d @ rate_vector(n)) - target_rate
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(d > 0, d * np.log(np.maximum(d, 1e-300)), 0.0)
    neg_entropy = float(plogp.sum()) / n
    return cfg.rate_weight * rate_err**2 + cfg.entropy_weight * neg_entropy, d


def grad_loss(v: np.ndarray, target_rate: float, cfg: SearchConfig) -> np.ndarray:
    """Analytic gradient of `loss` with respect to the logits v."""
    v = np.asarray(v, dtype=np.float64)
    n = len(v)
    d = softmax(v)
    pu = rate_vector(n)
    rate_err = float(d @ pu) - target_rate
    # dL/dd, then through the softmax Jacobian: dL/dv = d * (g - g.d)
    g = cfg.rate_weight * 2.0 * rate_err * pu \
        + cfg.entropy_weight * (np.log(np.maximum(d, 1e-300)) + 1.0) / n
    return d * (g - float(g @ d))


def search(target_rate: float, n: int, cfg: SearchConfig | None = None,
           seed: int | None = None) -> PatternDistribution:
    """Run the descent and return the found distribution.

    Logits start at zero (uniform distribution); passing a seed instead
    starts from small seeded perturbations. Raises ValueError for targets
    above (n-1)/n, and NoConvergenceError if the achieved rate misses the
    target by more than cfg.rate_tol.
    """
    cfg = cfg or SearchConfig()
    if n < 1:
        raise ValueError(f"need at least one period, got {n}")
    if not 0 <= target_rate < 1:
        raise ValueError(f"target rate must be in [0, 1), got {target_rate}")
    max_rate = (n - 1) / n
    if target_rate > max_rate:
        raise ValueError(
            f"target rate {target_rate} unreachable with {n} periods (max {max_rate:.4f})"
        )

    if seed is None:
        v = np.zeros(n, dtype=np.float64)
    else:
        raw = Philox(key=np.array([seed, 0], dtype=np.uint64)).random_raw(n)
        v = (raw / 2.0**64 - 0.5) * 0.02

    lr = cfg.learning_rate
    cur_loss, d = loss(v, target_rate, cfg)
    iters = 0
    while iters < cfg.max_iters:
        iters += 1
        grad = grad_loss(v, target_rate, cfg)
        step = v - lr * grad
        new_loss, new_d = loss(step, target_rate, cfg)
        if new_loss > cur_loss:
            lr *= 0.5
            if lr < 1e-16:
                break
            continue
        delta = cur_loss - new_loss
        v, cur_loss, d = step, new_loss, new_d
        if delta < cfg.threshold:
            break

    dist = PatternDistribution(
        probs=d, target_rate=target_rate, max_period=n,
        iterations=iters, final_loss=cur_loss,
    )
    rate_error = abs(dist.achieved_rate - target_rate)
    if rate_error > cfg.rate_tol:
        raise NoConvergenceError(
            f"achieved rate {dist.achieved_rate:.4f} misses target "
            f"{target_rate} by {rate_error:.4f} after {iters} iterations",
            dist, rate_error,
        )
    return dist


def to_json_dict(dist: PatternDistribution) -> dict:
    return {
        "target_rate": dist.target_rate,
        "max_dp": dist.max_period,
        "probs": [float(p) for p in dist.probs],
        "achieved_rate": dist.achieved_rate,
        "iterations": dist.iterations,
        "final_loss": None if np.isnan(dist.final_loss) else dist.final_loss,
    }


def from_json_dict(data: dict) -> PatternDistribution:
    return PatternDistribution(
        probs=np.array(data["probs"], dtype=np.float64),
        target_rate=float(data["target_rate"]),
        max_period=int(data["max_dp"]),
        iterations=int(data.get("iterations", 0)),
        final_loss=float(data["final_loss"]) if data.get("final_loss") is not None else float("nan"),
    )


def save_distribution(dist: PatternDistribution, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(dist), indent=2) + "\n")


def load_distribution(path: str | Path) -> PatternDistribution:
    return from_json_dict(json.loads(Path(path).read_text()))
