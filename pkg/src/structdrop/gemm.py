"""Matrix kernels with exact MAC accounting.

All kernels compute Y = W @ X for row-major 2-D arrays (float32 in normal
use; float64 is accepted for high-precision checks). The skipping kernels
never touch dropped data: dropped work costs neither MACs nor fetches.

Determinism contract: every output element is produced by a fixed sequence
of operations that depends only on the operands and the pattern, never on
the worker count. `dense_gemm` and `row_skip_gemm` compute each output row
with one vector-matrix product over the same operand views, so a
row-skipped result is bitwise identical to the dense result with dropped
rows zeroed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .patterns import (
    DEFAULT_TILE_SHAPE,
    DropoutPattern,
    MaskGeometry,
    PatternKind,
    kept_row_indices,
    kept_tile_indices,
    tile_bounds,
)


@dataclass
class MacCounter:
    """Running multiply-accumulate and fetch totals; only ever increases."""

    macs: int = 0
    bytes_fetched: int = 0

    def add(self, macs: int = 0, bytes_fetched: int = 0) -> None:
        if macs < 0 or bytes_fetched < 0:
            raise ValueError("counter increments must be non-negative")
        self.macs += int(macs)
        self.bytes_fetched += int(bytes_fetched)


@dataclass
class LayerCounters:
    """Per-layer MAC counters for a multi-layer model."""

    layers: list = field(default_factory=list)

    def layer(self, idx: int) -> MacCounter:
        while len(self.layers) <= idx:
            self.layers.append(MacCounter())
        return self.layers[idx]

    def total(self) -> MacCounter:
        out = MacCounter()
        for c in self.layers:
            out.add(c.macs, c.bytes_fetched)
        return out


def _check_operands(w: np.ndarray, x: np.ndarray) -> None:
    if w.ndim != 2 or x.ndim != 2:
        raise ValueError(f"operands must be 2-D, got {w.ndim}-D and {x.ndim}-D")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {w.shape} @ {x.shape}")


def _row_chunks(rows: np.ndarray, workers: int):
    n = len(rows)
    workers = max(1, min(workers, n)) if n else 1
    step = -(-n // workers) if n else 1
    return [rows[i:i + step] for i in range(0, n, step)]


def _run_chunks(fn, chunks, workers: int) -> None:
    if workers <= 1 or len(chunks) <= 1:
        for c in chunks:
            fn(c)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, chunks))


def dense_gemm(w: np.ndarray, x: np.ndarray, ctr: MacCounter | None = None,
               workers: int = 1) -> np.ndarray:
    """Reference product: every output row is one vector-matrix product."""
    _check_operands(w, x)
    m, k = w.shape
    b = x.shape[1]
    y = np.empty((m, b), dtype=w.dtype)

    def compute(rows):
        for i in rows:
            y[i] = np.dot(w[i], x)

    _run_chunks(compute, _row_chunks(np.arange(m), workers), workers)
    if ctr is not None:
        ctr.add(macs=m * k * b, bytes_fetched=(m * k + k * b) * w.dtype.itemsize)
    return y


def row_skip_gemm(w: np.ndarray, x: np.ndarray, pat: DropoutPattern,
                  ctr: MacCounter | None = None, workers: int = 1) -> np.ndarray:
    """Product computing only the pattern's kept rows; dropped rows are zero.

    Kept rows use the same per-row product as `dense_gemm`, so they are
    bitwise identical to the dense result.
    """
    _check_operands(w, x)
    m, k = w.shape
    b = x.shape[1]
    kept = kept_row_indices(MaskGeometry(m, max(1, b)), pat)
    y = np.zeros((m, b), dtype=w.dtype)

    def compute(rows):
        for i in rows:
            y[i] = np.dot(w[i], x)

    _run_chunks(compute, _row_chunks(kept, workers), workers)
    if ctr is not None:
        fetched = len(kept) * k + (k * b if len(kept) else 0)
        ctr.add(macs=len(kept) * k * b, bytes_fetched=fetched * w.dtype.itemsize)
    return y


def tile_skip_gemm(w: np.ndarray, x: np.ndarray, pat: DropoutPattern,
                   ctr: MacCounter | None = None, workers: int = 1) -> np.ndarray:
    """Product skipping every MAC whose weight lies in a dropped tile.

    Tiles cover the weight matrix; the result equals (w * tile_mask) @ x.
    Each output row accumulates its kept tiles in ascending column order, a
    fixed order that is independent of the worker count. Partial sums are
    grouped per tile, so values match a masked dense product only to
    rounding (about 1e-5 relative in float32).
    """
    _check_operands(w, x)
    m, k = w.shape
    b = x.shape[1]
    geom = MaskGeometry(m, k)
    kept = kept_tile_indices(geom, pat)
    y = np.zeros((m, b), dtype=w.dtype)

    # Group kept tiles per row band so each band owns its accumulation.
    bands: dict[int, list[tuple[int, int, int]]] = {}
    kept_elems = 0
    touched_k_rows: set[int] = set()
    for t in kept:
        r0, r1, c0, c1 = tile_bounds(geom, pat, t)
        bands.setdefault(r0, []).append((r1, c0, c1))
        kept_elems += (r1 - r0) * (c1 - c0)
        touched_k_rows.update(range(c0, c1))

    def compute(band_starts):
        for r0 in band_starts:
            first = True
            for r1, c0, c1 in sorted(bands[r0], key=lambda tc: tc[1]):
                part = np.dot(w[r0:r1, c0:c1], x[c0:c1])
                if first:
                    y[r0:r1] = part
                    first = False
                else:
                    y[r0:r1] += part

    _run_chunks(compute, _row_chunks(np.array(sorted(bands)), workers), workers)
    if ctr is not None:
        fetched = kept_elems + len(touched_k_rows) * b
        ctr.add(macs=kept_elems * b, bytes_fetched=fetched * w.dtype.itemsize)
    return y


def tiled_dense_gemm(w: np.ndarray, x: np.ndarray,
                     tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE,
                     ctr: MacCounter | None = None, workers: int = 1) -> np.ndarray:
    """Cache-blocked dense product: same MAC count as `dense_gemm`.

    Blocks only reorder the accumulation; nothing is skipped. With a single
    block covering the whole matrix this degenerates to `dense_gemm` exactly.
    """
    _check_operands(w, x)
    m, k = w.shape
    b = x.shape[1]
    br, bk = tile_shape
    if br < 1 or bk < 1:
        raise ValueError("block shape must be at least 1x1")
    y = np.empty((m, b), dtype=w.dtype)
    k_starts = list(range(0, k, bk))
    band_starts = np.arange(0, m, br)

    # Row bands give locality; each row's arithmetic only depends on the
    # k-blocking, so banding and workers never change the result.
    def compute(starts):
        for r0 in starts:
            for i in range(r0, min(r0 + br, m)):
                for j, k0 in enumerate(k_starts):
                    k1 = min(k0 + bk, k)
                    part = np.dot(w[i, k0:k1], x[k0:k1])
                    if j == 0:
                        y[i] = part
                    else:
                        y[i] += part

    _run_chunks(compute, _row_chunks(band_starts, workers), workers)
    if ctr is not None:
        ctr.add(macs=m * k * b, bytes_fetched=(m * k + k * b) * w.dtype.itemsize)
    return y
