"""Per-iteration pattern sampling on seeded, stream-separated randomness.

Each RngState is one Philox counter-based stream keyed by (seed, stream),
so streams never interact: adding a consumer on one stream cannot perturb
draws on another. Uniforms come straight from the raw 64-bit outputs,
keeping sequences identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Philox

from .distsearch import PatternDistribution
from .patterns import (
    DEFAULT_TILE_SHAPE,
    DropoutPattern,
    MaskGeometry,
    PatternKind,
    materialize_mask,
)

GENERATOR_ID = "philox4x64"


class RngState:
    """One reproducible uniform stream identified by (seed, stream)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._bitgen = Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    def spawn(self, stream: int) -> "RngState":
        """Fresh state on the same seed but a different stream."""
        return RngState(self.seed, stream)

    def uniform(self) -> float:
        """Next uniform in [0, 1)."""
        return float(self._bitgen.random_raw(1)[0]) / 2.0**64

    def uniforms(self, n: int) -> np.ndarray:
        """Next n uniforms in [0, 1); same sequence as n single draws."""
        return self._bitgen.random_raw(n) / 2.0**64


@dataclass(frozen=True)
class SampledPattern:
    """One pattern draw tagged with when and where it applies."""

    pattern: DropoutPattern
    iteration: int = 0
    layer_id: int = 0


def sample_period(dist: PatternDistribution, rng: RngState) -> int:
    """Inverse-CDF draw of a period from the distribution (one uniform)."""
    cum = np.cumsum(dist.probs)
    idx = int(np.searchsorted(cum, rng.uniform(), side="right"))
    return min(idx, dist.max_period - 1) + 1  # top bucket absorbs rounding slack


def sample_pattern(dist: PatternDistribution, kind: PatternKind, rng: RngState,
                   tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE,
                   iteration: int = 0, layer_id: int = 0) -> SampledPattern:
    """Draw (period, bias): period from the distribution, then bias uniform.

    Always consumes exactly two uniforms so stream positions stay aligned
    across iterations regardless of the drawn period.
    """
    period = sample_period(dist, rng)
    bias = min(int(rng.uniform() * period), period - 1) + 1
    tile_rows, tile_cols = tile_shape if kind is PatternKind.TILE else (1, 1)
    return SampledPattern(
        pattern=DropoutPattern(kind=kind, period=period, bias=bias,
                               tile_rows=tile_rows, tile_cols=tile_cols),
        iteration=iteration, layer_id=layer_id,
    )


def analytic_unit_drop_rate(dist: PatternDistribution) -> float:
    """Exact marginal drop probability of any single unit.

    Under a uniform bias, a unit is kept with probability exactly 1/period
    whatever its index, so the marginal equals the expected global rate.
    """
    from .distsearch import expected_global_rate

    return expected_global_rate(dist)


def empirical_unit_drop_rate(dist: PatternDistribution, geom: MaskGeometry,
                             kind: PatternKind, tile_shape: tuple[int, int],
                             trials: int, rng: RngState) -> np.ndarray:
    """Observed per-unit drop frequency over `trials` pattern draws.

    Units are rows for ROW patterns and matrix entries (row-major, flat)
    for TILE patterns.
    """
    if trials < 1:
        raise ValueError(f"need at least one trial, got {trials}")
    counts: dict[tuple[int, int], int] = {}
    for i in range(trials):
        sp = sample_pattern(dist, kind, rng, tile_shape, iteration=i)
        key = (sp.pattern.period, sp.pattern.bias)
        counts[key] = counts.get(key, 0) + 1

    if kind is PatternKind.ROW:
        dropped = np.zeros(geom.rows, dtype=np.float64)
        rows = np.arange(geom.rows)
        for (period, bias), c in counts.items():
            dropped += c * (rows % period != bias - 1)
    else:
        dropped = np.zeros(geom.rows * geom.cols, dtype=np.float64)
        for (period, bias), c in counts.items():
            pat = DropoutPattern(kind=PatternKind.TILE, period=period, bias=bias,
                                 tile_rows=tile_shape[0], tile_cols=tile_shape[1])
            dropped += c * (materialize_mask(geom, pat).ravel() == 0.0)
    return dropped / trials


def period_histogram(samples: list[SampledPattern], max_period: int) -> dict[int, int]:
    """Counts of drawn periods 1..max_period (zeros included)."""
    hist = {p: 0 for p in range(1, max_period + 1)}
    for s in samples:
        hist[s.pattern.period] = hist.get(s.pattern.period, 0) + 1
    return hist
