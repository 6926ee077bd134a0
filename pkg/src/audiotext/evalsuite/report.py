"""Serializable metric reports."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from ..errors import EvaluationError

_UNIT_INTERVAL = ("R@", "accuracy", "mAP", "bleu", "rouge")


@dataclass
class MetricReport:
    task: str
    metrics: Dict[str, float]
    dataset_id: str = ""
    checkpoint_id: str = ""
    seed: int = 0
    wall_clock: float = field(default_factory=time.time)
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.metrics = {k: float(v) for k, v in self.metrics.items()}
        for k, v in self.metrics.items():
            if not math.isfinite(v):
                raise EvaluationError(f"metric {k} is not finite: {v}")
            if any(tag in k for tag in _UNIT_INTERVAL) and not 0.0 <= v <= 1.0:
                raise EvaluationError(f"metric {k} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def fingerprint(self) -> str:
        """Hash of everything except the wall-clock stamp."""
        d = self.to_dict()
        d.pop("wall_clock")
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))

    def summary(self, percent: bool = True) -> str:
        """One line per metric; R@K and accuracy shown as percentages."""
        lines = [f"[{self.task}] dataset={self.dataset_id or '-'} seed={self.seed}"]
        for k, v in sorted(self.metrics.items()):
            shown = f"{100 * v:.2f}" if percent and any(t in k for t in ("R@", "accuracy")) else f"{v:.6g}"
            lines.append(f"  {k:<24} {shown}")
        return "\n".join(lines)


def seed_summary(values: List[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "median": float(np.median(arr))}
