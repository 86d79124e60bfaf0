"""Experiment harness: datasets, training sweeps, and kernel benchmarks.

Real IDX files are picked up from STRUCTDROP_DATA_ROOT when present;
otherwise a deterministic synthetic digit corpus is generated once, written
through the IDX writer, and read back, so the full loading path is always
exercised. Sweeps pair every pattern-dropout run against a conventional
mask-dropout baseline at the same rate and seed, and report signed
accuracy deltas, hidden-layer MAC ratios, and wall-clock speedups.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import patterns
from .data import (
    Dataset,
    data_root,
    load_mnist_idx,
    make_synthetic_digits,
    write_idx_images,
    write_idx_labels,
)
from .distsearch import PatternDistribution, search
from .gemm import MacCounter, dense_gemm, row_skip_gemm, tile_skip_gemm
from .nn import DivergenceError, DropoutMode, TrainConfig, train
from .patterns import DEFAULT_TILE_SHAPE, DropoutPattern, MaskGeometry, PatternKind, materialize_mask
from .report import RunReport, save_report
from .sampler import RngState

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

# synthetic corpus seeds; fixed so every run sees identical bytes
SYNTH_TRAIN_SEED = 1_0001
SYNTH_TEST_SEED = 1_0002

VALID_SWEEP_MODES = (DropoutMode.CONVENTIONAL, DropoutMode.ROW, DropoutMode.TILE)


@dataclass
class ExperimentConfig:
    layer_sizes: list[int] = field(default_factory=lambda: [784, 256, 256, 10])
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    rates: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.7])
    modes: list[str] = field(default_factory=lambda: ["row"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sizes: list[int] = field(default_factory=lambda: [64, 256, 512])
    size_sweep_rate: float = 0.7
    max_period: int = 10
    tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE
    n_train: int = 10_000
    n_test: int = 2_000
    out_dir: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        bad = [r for r in self.rates + [self.size_sweep_rate] if not 0.0 <= r <= 0.9]
        if bad:
            raise ValueError(f"rates outside [0, 0.9]: {bad}")
        unknown = [m for m in self.modes if m not in {m.value for m in VALID_SWEEP_MODES}]
        if unknown:
            raise ValueError(f"unknown sweep modes: {unknown}")
        if not self.sizes:
            raise ValueError("size sweep needs at least one hidden size")

    @classmethod
    def from_json_dict(cls, payload: dict[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "tile_shape" in payload:
            payload = dict(payload)
            payload["tile_shape"] = tuple(payload["tile_shape"])
        return cls(**payload)


@dataclass
class SummaryRow:
    sweep: str
    mode: str
    rate: float
    hidden_size: int
    n_seeds: int
    baseline_acc: float
    acc: float
    acc_delta: float
    mac_ratio_hidden: float
    speedup: float


def write_summary_csv(rows: list[SummaryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sweep", "mode", "rate", "hidden_size", "n_seeds",
                         "baseline_acc", "acc", "acc_delta", "mac_ratio_hidden", "speedup"])
        for r in rows:
            writer.writerow([r.sweep, r.mode, f"{r.rate:.2f}", r.hidden_size, r.n_seeds,
                             f"{r.baseline_acc:.4f}", f"{r.acc:.4f}", f"{r.acc_delta:+.4f}",
                             f"{r.mac_ratio_hidden:.4f}", f"{r.speedup:.3f}"])


# --- datasets -------------------------------------------------------------


def _real_paths(root: Path) -> dict[str, Path] | None:
    paths = {name: root / name for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)}
    return paths if all(p.exists() for p in paths.values()) else None


def ensure_synthetic_idx(root: Path, n_train: int, n_test: int) -> dict[str, Path]:
    """Write the synthetic corpus as IDX files under root/synthetic, once."""
    out = root / "synthetic"
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)}
    if not all(p.exists() for p in paths.values()):
        imgs, labels = make_synthetic_digits(n_train, SYNTH_TRAIN_SEED)
        write_idx_images(paths[TRAIN_IMAGES], imgs)
        write_idx_labels(paths[TRAIN_LABELS], labels)
        imgs, labels = make_synthetic_digits(n_test, SYNTH_TEST_SEED)
        write_idx_images(paths[TEST_IMAGES], imgs)
        write_idx_labels(paths[TEST_LABELS], labels)
    return paths


def acquire_dataset(n_train: int = 10_000, n_test: int = 2_000,
                    root: str | Path | None = None) -> tuple[Dataset, Dataset]:
    """Training and test splits, truncated to the requested sizes."""
    root = Path(root) if root is not None else data_root()
    paths = _real_paths(root)
    if paths is None:
        paths = ensure_synthetic_idx(root, n_train, n_test)
    train_ds = load_mnist_idx(paths[TRAIN_IMAGES], paths[TRAIN_LABELS]).subset(0, n_train)
    test_ds = load_mnist_idx(paths[TEST_IMAGES], paths[TEST_LABELS]).subset(0, n_test)
    return train_ds, test_ds


# --- training sweeps ------------------------------------------------------


def capacity_limit(layer_sizes: list[int], mode: DropoutMode, tile_shape) -> int:
    """Largest pattern period supported by every hidden layer of the net."""
    kind = PatternKind.ROW if mode == DropoutMode.ROW else PatternKind.TILE
    caps = [patterns.max_period(MaskGeometry(layer_sizes[l + 1], layer_sizes[l]), kind, tile_shape)
            for l in range(len(layer_sizes) - 2)]
    return min(caps)


class DistributionCache:
    """Memoizes searched pattern distributions per (rate, period count)."""

    def __init__(self):
        self._cache: dict[tuple[float, int], PatternDistribution] = {}

    def get(self, rate: float, n: int) -> PatternDistribution:
        key = (round(rate, 6), n)
        if key not in self._cache:
            self._cache[key] = search(rate, n)
        return self._cache[key]


def run_one(cfg: ExperimentConfig, mode: DropoutMode, rate: float, seed: int,
            layer_sizes: list[int], dist: PatternDistribution | None,
            train_ds: Dataset, test_ds: Dataset) -> RunReport:
    """One training run; divergence is recorded in the report, not raised."""
    train_cfg = TrainConfig(
        layer_sizes=layer_sizes, epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, momentum=cfg.momentum, mode=mode,
        rate=rate, tile_shape=cfg.tile_shape, distribution=dist, seed=seed,
    )
    try:
        _, rep = train(train_cfg, train_ds.images, train_ds.labels, test_ds.images, test_ds.labels)
    except DivergenceError as err:
        rep = RunReport(mode=mode.value, seed=seed,
                        config={"layer_sizes": layer_sizes, "rate": rate},
                        generator="philox4x64", diverged=True,
                        divergence_iteration=err.iteration)
    return rep


def _summarize(sweep: str, mode: str, rate: float, hidden_size: int,
               baselines: list[RunReport], runs: list[RunReport]) -> SummaryRow:
    base_acc = statistics.fmean(r.final_test_acc for r in baselines)
    acc = statistics.fmean(r.final_test_acc for r in runs)
    base_wall = sum(r.wall_clock_s for r in baselines)
    wall = sum(r.wall_clock_s for r in runs)
    return SummaryRow(
        sweep=sweep, mode=mode, rate=rate, hidden_size=hidden_size,
        n_seeds=len(runs), baseline_acc=base_acc, acc=acc, acc_delta=acc - base_acc,
        mac_ratio_hidden=statistics.fmean(r.mac_ratio_hidden for r in runs),
        speedup=base_wall / wall if wall > 0 else float("nan"),
    )


def _maybe_save(report: RunReport, out_dir: Path | None, name: str) -> None:
    if out_dir is not None:
        save_report(report, out_dir / f"{name}.json")


def _paired_runs(cfg: ExperimentConfig, rate: float, layer_sizes: list[int],
                 dist_cache: DistributionCache, train_ds: Dataset, test_ds: Dataset,
                 out_dir: Path | None, tag: str,
                 ) -> tuple[list[RunReport], dict[str, list[RunReport]]]:
    """Conventional baseline plus every configured mode, on shared seeds."""
    baselines = []
    for seed in cfg.seeds:
        rep = run_one(cfg, DropoutMode.CONVENTIONAL, rate, seed, layer_sizes,
                      None, train_ds, test_ds)
        _maybe_save(rep, out_dir, f"{tag}_conventional_s{seed}")
        baselines.append(rep)

    by_mode: dict[str, list[RunReport]] = {}
    for mode_name in cfg.modes:
        mode = DropoutMode(mode_name)
        if mode == DropoutMode.CONVENTIONAL:
            by_mode[mode_name] = baselines
            continue
        n = min(cfg.max_period, capacity_limit(layer_sizes, mode, cfg.tile_shape))
        if rate > (n - 1) / n:
            raise ValueError(f"rate {rate} unreachable with {n} periods for {layer_sizes}")
        dist = dist_cache.get(rate, n)
        runs = []
        for seed in cfg.seeds:
            rep = run_one(cfg, mode, rate, seed, layer_sizes, dist, train_ds, test_ds)
            _maybe_save(rep, out_dir, f"{tag}_{mode.value}_s{seed}")
            runs.append(rep)
        by_mode[mode_name] = runs
    return baselines, by_mode


def run_rate_sweep(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset,
                   dist_cache: DistributionCache | None = None,
                   ) -> tuple[list[SummaryRow], list[RunReport]]:
    """Each mode at each rate against a conventional baseline at that rate."""
    dist_cache = dist_cache or DistributionCache()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    hidden_size = max(cfg.layer_sizes[1:-1])

    rows, reports = [], []
    for rate in cfg.rates:
        baselines, by_mode = _paired_runs(cfg, rate, cfg.layer_sizes, dist_cache,
                                          train_ds, test_ds, out_dir, f"rate_r{rate:.2f}")
        reports.extend(baselines)
        for mode_name in cfg.modes:
            runs = by_mode[mode_name]
            if runs is not baselines:
                reports.extend(runs)
            rows.append(_summarize("rate", mode_name, rate, hidden_size, baselines, runs))
    if out_dir is not None:
        write_summary_csv(rows, out_dir / "rate_sweep.csv")
    return rows, reports


def run_size_sweep(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset,
                   dist_cache: DistributionCache | None = None,
                   ) -> tuple[list[SummaryRow], list[RunReport]]:
    """Fixed rate across hidden widths; baseline re-trained per width."""
    dist_cache = dist_cache or DistributionCache()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    in_dim, out_dim = cfg.layer_sizes[0], cfg.layer_sizes[-1]
    n_hidden = len(cfg.layer_sizes) - 2
    rate = cfg.size_sweep_rate

    rows, reports = [], []
    for size in cfg.sizes:
        sizes = [in_dim] + [size] * n_hidden + [out_dim]
        baselines, by_mode = _paired_runs(cfg, rate, sizes, dist_cache,
                                          train_ds, test_ds, out_dir, f"size{size}")
        reports.extend(baselines)
        for mode_name in cfg.modes:
            runs = by_mode[mode_name]
            if runs is not baselines:
                reports.extend(runs)
            rows.append(_summarize("size", mode_name, rate, size, baselines, runs))
    if out_dir is not None:
        write_summary_csv(rows, out_dir / "size_sweep.csv")
    return rows, reports


# --- kernel microbenchmark ------------------------------------------------


class BenchVerificationError(RuntimeError):
    """Skipping kernel disagreed with the masked dense reference."""


def _bench_operands(m: int, k: int, b: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    w = (RngState(seed, 0).uniforms(m * k).reshape(m, k) * 2 - 1).astype(np.float32)
    x = (RngState(seed, 1).uniforms(k * b).reshape(k, b) * 2 - 1).astype(np.float32)
    return w, x


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def gemm_microbench(m: int, k: int, b: int, kind: PatternKind, period: int,
                    tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE,
                    repeats: int = 20, seed: int = 0) -> dict[str, Any]:
    """Times one skipping kernel against dense after verifying equivalence.

    Verification compares the kernel to a dense product over the explicitly
    masked weights: bit-for-bit for row skipping, 1e-5 relative for tile
    skipping. A mismatch aborts the benchmark.
    """
    w, x = _bench_operands(m, k, b, seed)
    pat = DropoutPattern(kind, period, bias=1, tile_rows=tile_shape[0], tile_cols=tile_shape[1])
    geom = MaskGeometry(m, k)
    skip = row_skip_gemm if kind == PatternKind.ROW else tile_skip_gemm

    got = skip(w, x, pat)
    if kind == PatternKind.ROW:
        # kept rows are the same per-row products as the dense kernel
        ok = np.array_equal(got, dense_gemm(w, x) * materialize_mask(geom, pat)[:, :1])
    else:
        masked = np.dot(w * materialize_mask(geom, pat), x)
        ok = np.allclose(got, masked, rtol=1e-5, atol=1e-5)
    if not ok:
        raise BenchVerificationError(
            f"{kind.value} kernel mismatch at m={m} k={k} b={b} period={period}")

    ctr = MacCounter()
    skip(w, x, pat, ctr)
    dense_ctr = MacCounter()
    dense_gemm(w, x, dense_ctr)

    skip_t = _median_time(lambda: skip(w, x, pat), repeats)
    dense_t = _median_time(lambda: dense_gemm(w, x), repeats)
    return {
        "m": m, "k": k, "b": b, "pattern": kind.value, "period": period,
        "tile_shape": list(tile_shape) if kind == PatternKind.TILE else None,
        "macs": ctr.macs, "dense_macs": dense_ctr.macs,
        "mac_ratio": ctr.macs / dense_ctr.macs,
        "bytes_fetched": ctr.bytes_fetched, "dense_bytes_fetched": dense_ctr.bytes_fetched,
        "median_s": skip_t, "dense_median_s": dense_t,
        "speedup": dense_t / skip_t if skip_t > 0 else float("nan"),
        "repeats": repeats, "verified": True,
    }
