"""Retrieval fine-tuning of a pre-trained bi-encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

from ..contrastive import PairData, TrainConfig, TrainResult, evaluate_pairs, train_contrastive
from ..encoders import BiEncoder
from ..errors import ConfigError


@dataclass
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 128
    max_lr: float = 5e-5
    validate_every: int = 0      # 0 means once per epoch
    seed: int = 0


@dataclass
class FinetuneResult:
    train: Optional[TrainResult]
    report: Dict[str, float]     # validation scores of the selected state
    iters_per_epoch: int

    @property
    def trace(self) -> List[dict]:
        return self.train.trace if self.train else []


def finetune_retrieval(model: BiEncoder, train: PairData, val: PairData, cfg: FinetuneConfig) -> FinetuneResult:
    """InfoNCE on the target pairs; the learning rate warms up linearly over the first epoch
    and then follows a half-cosine to zero."""
    if cfg.epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {cfg.epochs}")
    if len(train) < cfg.batch_size:
        raise ConfigError(f"fine-tuning set has {len(train)} pairs, fewer than batch {cfg.batch_size}")
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    if cfg.epochs == 0:
        return FinetuneResult(None, evaluate_pairs(model, val), per_epoch)
    tc = TrainConfig(batch_size=cfg.batch_size, total_iters=cfg.epochs * per_epoch, warmup_iters=per_epoch,
                     max_lr=cfg.max_lr, validate_every=cfg.validate_every or per_epoch, seed=cfg.seed)
    result = train_contrastive(model, train, val, tc, stage="finetune")
    return FinetuneResult(result, evaluate_pairs(model, val), per_epoch)


def iterations_to_reach(trace: List[dict], target: float, key: str = "val_mean_R@1") -> Optional[int]:
    """First validated iteration whose score reaches ``target`` (None if never)."""
    for row in trace:
        if row[key] >= target - 1e-12:
            return int(row["iter"])
    return None


def best_score(trace: List[dict], key: str = "val_mean_R@1"):
    """(best score, first iteration attaining it)."""
    best = max(row[key] for row in trace)
    return best, iterations_to_reach(trace, best, key)
