"""Command line front end.

Subcommands: search-dist (fit a pattern distribution to a target rate),
gemm-bench (verify and time a skipping kernel), train (one training run
from a JSON config), sweep (rate or size comparison sweeps). Failures exit
nonzero with a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench
from .data import IdxFormatError
from .distsearch import NoConvergenceError, SearchConfig, save_distribution, search, to_json_dict
from .nn import DivergenceError, DropoutMode, TrainConfig, save_checkpoint, train
from .patterns import DEFAULT_TILE_SHAPE, PatternKind
from .report import save_report


def _parse_tile(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError as err:
        raise ValueError(f"tile shape must look like 32x32, got {text!r}") from err


def _cmd_search_dist(args) -> int:
    cfg = SearchConfig(rate_weight=args.lambda1, entropy_weight=args.lambda2)
    dist = search(args.rate, args.max_dp, cfg, seed=args.seed)
    payload = to_json_dict(dist)
    if args.out:
        save_distribution(dist, args.out)
        payload["path"] = args.out
    print(json.dumps(payload))
    return 0


def _cmd_gemm_bench(args) -> int:
    result = bench.gemm_microbench(
        args.m, args.k, args.b, PatternKind(args.pattern), args.dp,
        tile_shape=_parse_tile(args.tile), repeats=args.repeats,
    )
    print(json.dumps(result))
    return 0


def _cmd_train(args) -> int:
    payload = json.loads(Path(args.config).read_text())
    mode = DropoutMode(payload.get("mode", "none"))
    layer_sizes = payload.get("layer_sizes", [784, 256, 256, 10])
    rate = payload.get("rate", 0.0)
    tile_shape = tuple(payload.get("tile_shape", DEFAULT_TILE_SHAPE))
    max_period = payload.get("max_period", 10)

    dist = None
    if mode in (DropoutMode.ROW, DropoutMode.TILE):
        n = min(max_period, bench.capacity_limit(layer_sizes, mode, tile_shape))
        dist = search(rate, n)

    cfg = TrainConfig(
        layer_sizes=layer_sizes,
        epochs=payload.get("epochs", 5),
        batch_size=payload.get("batch_size", 128),
        learning_rate=payload.get("learning_rate", 0.01),
        momentum=payload.get("momentum", 0.9),
        mode=mode, rate=rate, rescale=payload.get("rescale", True),
        tile_shape=tile_shape, distribution=dist, seed=payload.get("seed", 0),
    )
    train_ds, test_ds = bench.acquire_dataset(
        payload.get("n_train", 10_000), payload.get("n_test", 2_000),
        payload.get("data_root"),
    )
    model, report = train(cfg, train_ds.images, train_ds.labels, test_ds.images, test_ds.labels)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.json")
    save_checkpoint(model, out / "checkpoint.json")
    print(json.dumps({
        "report": str(out / "report.json"),
        "checkpoint": str(out / "checkpoint.json"),
        "final_test_acc": report.final_test_acc,
        "mac_ratio_hidden": report.mac_ratio_hidden,
    }))
    return 0


def _cmd_sweep(args) -> int:
    payload = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = bench.ExperimentConfig.from_json_dict(payload)
    if args.out:
        cfg.out_dir = args.out
    train_ds, test_ds = bench.acquire_dataset(cfg.n_train, cfg.n_test)
    runner = bench.run_rate_sweep if args.kind == "rate" else bench.run_size_sweep
    rows, _ = runner(cfg, train_ds, test_ds)
    for row in rows:
        print(json.dumps(vars(row)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structdrop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search-dist", help="fit a pattern distribution to a target drop rate")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--max-dp", type=int, default=10, help="number of candidate periods")
    p.add_argument("--lambda1", type=float, default=SearchConfig().rate_weight)
    p.add_argument("--lambda2", type=float, default=SearchConfig().entropy_weight)
    p.add_argument("--seed", type=int, default=None, help="perturb the initial logits")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=_cmd_search_dist)

    p = sub.add_parser("gemm-bench", help="verify and time a compute-skipping kernel")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--pattern", choices=["row", "tile"], default="row")
    p.add_argument("--dp", type=int, default=2, help="pattern period")
    p.add_argument("--tile", type=str, default="32x32")
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(fn=_cmd_gemm_bench)

    p = sub.add_parser("train", help="one training run from a JSON config")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sweep", help="rate or size comparison sweep")
    p.add_argument("--kind", choices=["rate", "size"], required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, NoConvergenceError, DivergenceError,
            bench.BenchVerificationError) as err:
        record = {"error": {"type": type(err).__name__, "message": str(err)}}
        if isinstance(err, IdxFormatError):
            record["error"]["kind"] = err.kind
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
