"""Component and anchor-setting sweeps: one trained model per row, shared data and seed."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

from ..config import TrainConfig
from ..data_synth import SampleArrays
from .evaluate import evaluate
from .metrics import MetricReport
from .train import train

COMPONENT_ROWS: dict[str, dict] = {
    "full": {},
    "no_transformer": {"transformer_model": False},
    "no_a2j_fusion": {"a2j_fusion": False},
    "uniform_weights": {"learned_weights": False},
    "no_msdam": {"msdam": False},
}

ANCHOR_ROWS: dict[str, dict] = {
    "anchors_4x4x1": {"in_plane_count": 16, "depth_count": 1},
    "anchors_4x4x3": {"in_plane_count": 16, "depth_count": 3},
    "anchors_16x16x1": {"in_plane_count": 256, "depth_count": 1},
    "anchors_16x16x3": {"in_plane_count": 256, "depth_count": 3},
}


@dataclass
class AblationRow:
    name: str
    changes: dict
    report: MetricReport
    train_seconds: float
    final_loss: float | None

    def format(self) -> str:
        return f"{self.name:<18} {self.report.format()} | {self.train_seconds:.0f} s"


def run_ablation(base_cfg: TrainConfig, train_data: SampleArrays, test_data: SampleArrays,
                 rows: dict[str, dict] | None = None,
                 on_row: Callable[[AblationRow], None] | None = None) -> list[AblationRow]:
    """Train and evaluate every row; rows differ from ``base_cfg`` only by their changes."""
    rows = rows if rows is not None else {**COMPONENT_ROWS, **ANCHOR_ROWS}
    out = []
    for name, changes in rows.items():
        cfg = base_cfg.replace(**changes)
        t0 = time.perf_counter()
        res = train(cfg, train_data)
        dt = time.perf_counter() - t0
        row = AblationRow(name, dict(changes), evaluate(res.model, test_data), dt, res.final_loss)
        out.append(row)
        if on_row:
            on_row(row)
    return out
