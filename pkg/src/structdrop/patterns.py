"""Regular dropout patterns: row-periodic and tile-periodic kept/dropped sets.

A pattern keeps one unit (row, or tile) out of every `period` consecutive
units; `bias` selects which residue class survives. The dropped fraction is
(period - 1) / period.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

DEFAULT_TILE_SHAPE = (32, 32)


class PatternKind(str, Enum):
    ROW = "row"
    TILE = "tile"


@dataclass(frozen=True)
class MaskGeometry:
    """Shape of the matrix a pattern applies to."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"geometry must be at least 1x1, got {self.rows}x{self.cols}")


@dataclass(frozen=True)
class DropoutPattern:
    """One regular dropout pattern.

    kind:      ROW drops whole rows (neurons); TILE drops tile_rows x tile_cols
               sub-blocks (groups of synapses).
    period:    one unit kept per `period` consecutive units.
    bias:      which residue class is kept, in {1..period}.
    tile_rows, tile_cols: tile shape; only meaningful for TILE (1x1 for ROW).
    """

    kind: PatternKind
    period: int
    bias: int
    tile_rows: int = 1
    tile_cols: int = 1

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        if not 1 <= self.bias <= self.period:
            raise ValueError(f"bias must be in 1..{self.period}, got {self.bias}")
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ValueError("tile shape must be at least 1x1")

    @property
    def drop_fraction(self) -> float:
        return (self.period - 1) / self.period


def kept_row_indices(geom: MaskGeometry, pat: DropoutPattern) -> np.ndarray:
    """0-based rows kept by a ROW pattern, sorted ascending.

    Row i is kept iff i mod period == bias - 1; all other rows are dropped.
    """
    if pat.kind is not PatternKind.ROW:
        raise ValueError(f"expected a ROW pattern, got {pat.kind}")
    rows = np.arange(geom.rows, dtype=np.int64)
    return rows[rows % pat.period == pat.bias - 1]


def tile_grid(geom: MaskGeometry, pat: DropoutPattern) -> tuple[int, int]:
    """Tile-grid shape covering the full matrix; edge tiles may be partial."""
    gr = -(-geom.rows // pat.tile_rows)
    gc = -(-geom.cols // pat.tile_cols)
    return gr, gc


def kept_tile_indices(geom: MaskGeometry, pat: DropoutPattern) -> np.ndarray:
    """0-based kept tile ids for a TILE pattern, row-major over the tile grid.

    Tile t is kept iff t mod period == bias - 1. Partial edge tiles are
    enumerated like any other tile.
    """
    if pat.kind is not PatternKind.TILE:
        raise ValueError(f"expected a TILE pattern, got {pat.kind}")
    gr, gc = tile_grid(geom, pat)
    n_tiles = gr * gc
    if pat.period > n_tiles:
        raise ValueError(
            f"period {pat.period} exceeds tile count {n_tiles} "
            f"for {geom.rows}x{geom.cols} with {pat.tile_rows}x{pat.tile_cols} tiles"
        )
    tiles = np.arange(n_tiles, dtype=np.int64)
    return tiles[tiles % pat.period == pat.bias - 1]


def tile_bounds(geom: MaskGeometry, pat: DropoutPattern, tile_id: int) -> tuple[int, int, int, int]:
    """Half-open (r0, r1, c0, c1) bounds of one tile, clipped at the matrix edge."""
    _, gc = tile_grid(geom, pat)
    tr, tc = divmod(int(tile_id), gc)
    r0 = tr * pat.tile_rows
    c0 = tc * pat.tile_cols
    return r0, min(r0 + pat.tile_rows, geom.rows), c0, min(c0 + pat.tile_cols, geom.cols)


def materialize_mask(geom: MaskGeometry, pat: DropoutPattern) -> np.ndarray:
    """Dense 0/1 float32 mask: 1 inside kept rows/tiles, 0 elsewhere."""
    mask = np.zeros((geom.rows, geom.cols), dtype=np.float32)
    if pat.kind is PatternKind.ROW:
        mask[kept_row_indices(geom, pat)] = 1.0
    else:
        for t in kept_tile_indices(geom, pat):
            r0, r1, c0, c1 = tile_bounds(geom, pat, t)
            mask[r0:r1, c0:c1] = 1.0
    return mask


def max_period(geom: MaskGeometry, kind: PatternKind,
               tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE) -> int:
    """Largest usable period: row count for ROW, full-tile count for TILE.

    The TILE count uses floor division, so partial edge tiles do not extend
    the period range even though masks cover them.
    """
    if kind is PatternKind.ROW:
        return geom.rows
    x, y = tile_shape
    return max(1, (geom.rows // x) * (geom.cols // y))


def submodel_count(geom: MaskGeometry, kind: PatternKind,
                   tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE) -> int:
    """Number of distinct (period, bias) patterns: sum of i for i = 1..max_period."""
    n = max_period(geom, kind, tile_shape)
    return n * (n + 1) // 2
