"""Structured results for a single training run.

Reports are plain JSON so downstream tooling can diff them; everything
needed to reproduce the run bit-for-bit (mode, seed, layer sizes, rates,
generator name) is echoed into the record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1


@dataclass
class RunReport:
    mode: str
    seed: int
    config: dict[str, Any]
    generator: str
    epoch_test_acc: list[float] = field(default_factory=list)
    final_test_acc: float = 0.0
    final_train_acc: float = 0.0
    macs: dict[str, int] = field(default_factory=dict)
    bytes_fetched: dict[str, int] = field(default_factory=dict)
    mac_ratio_hidden: float = 1.0
    wall_clock_s: float = 0.0
    pattern_histogram: dict[str, dict[str, int]] = field(default_factory=dict)
    diverged: bool = False
    divergence_iteration: int | None = None
    schema_version: int = SCHEMA_VERSION

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "generator": self.generator,
            "epoch_test_acc": list(self.epoch_test_acc),
            "final_test_acc": self.final_test_acc,
            "final_train_acc": self.final_train_acc,
            "macs": dict(self.macs),
            "bytes_fetched": dict(self.bytes_fetched),
            "mac_ratio_hidden": self.mac_ratio_hidden,
            "wall_clock_s": self.wall_clock_s,
            "pattern_histogram": {k: dict(v) for k, v in self.pattern_histogram.items()},
            "diverged": self.diverged,
            "divergence_iteration": self.divergence_iteration,
        }

    @classmethod
    def from_json_dict(cls, payload: dict[str, Any]) -> "RunReport":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in payload.items() if k in known})


def save_report(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")


def load_report(path: str | Path) -> RunReport:
    return RunReport.from_json_dict(json.loads(Path(path).read_text()))
