"""Symmetric InfoNCE pre-training of the bi-encoder, schedules and checkpoints."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import load_state_into, read_state_file, state_hash, write_state_file  # noqa: F401
from .diffcore import Adam, Tensor, as_tensor, no_grad, ops
from .encoders import BiEncoder, BiEncoderConfig, embed_batch
from .errors import CheckpointError, ConfigError, NumericError
from .evalsuite.retrieval import recall_at_k


def similarity_matrix(audio, text) -> Tensor:
    """Cosine similarity, rows = audio, columns = text.  Differentiable."""
    a, t = as_tensor(audio), as_tensor(text)
    if a.ndim != 2 or t.ndim != 2 or a.shape != t.shape:
        raise ConfigError(f"need equal (N, D) embeddings, got audio {a.shape} and text {t.shape}")
    for name, x in (("audio", a), ("text", t)):
        norms = np.linalg.norm(x.data, axis=1)
        if np.any(norms == 0):
            raise NumericError(f"{name} embedding row {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    a_hat = a / ops.sqrt(ops.sum(a * a, axis=1, keepdims=True))
    t_hat = t / ops.sqrt(ops.sum(t * t, axis=1, keepdims=True))
    return ops.matmul(a_hat, ops.transpose(t_hat))


@dataclass
class InfoNCE:
    loss: Tensor
    a2t: np.ndarray  # per-item -log softmax over row i
    t2a: np.ndarray  # per-item -log softmax over column i


def infonce_terms(S, tau) -> InfoNCE:
    """``L = (1/N) * sum_i (L_i^{a2t} + L_i^{t2a})`` with logits ``S / tau``.

    The two directions are summed and divided by N, not 2N.
    """
    S = as_tensor(S)
    N = S.shape[0]
    if S.ndim != 2 or S.shape[1] != N:
        raise ConfigError(f"similarity matrix must be square, got {S.shape}")
    if N < 2:
        raise ConfigError("InfoNCE needs N >= 2 (in-batch negatives)")
    tau_val = float(getattr(tau, "data", tau))
    if not tau_val > 0:
        raise NumericError(f"temperature must be positive, got {tau_val}")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        logits = S / tau
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite InfoNCE logits")
    diag = (np.arange(N), np.arange(N))
    a2t = -ops.log_softmax(logits, axis=1)[diag]
    t2a = -ops.log_softmax(logits, axis=0)[diag]
    loss = (ops.sum(a2t) + ops.sum(t2a)) * (1.0 / N)
    return InfoNCE(loss, a2t.data.copy(), t2a.data.copy())


def infonce_loss(S, tau) -> Tensor:
    return infonce_terms(S, tau).loss


# -- schedules ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    total_iters: int = 400
    warmup_iters: int = 40
    max_lr: float = 1e-3
    validate_every: int = 50
    seed: int = 0
    selection: str = "r1"   # "r1" (mean a2t/t2a R@1) or "loss"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if self.total_iters < 0 or not 0 <= self.warmup_iters <= max(self.total_iters, 0):
            raise ConfigError(f"need 0 <= warmup_iters ({self.warmup_iters}) <= total_iters ({self.total_iters})")
        if self.validate_every <= 0 or self.max_lr < 0:
            raise ConfigError("validate_every must be positive and max_lr non-negative")
        if self.selection not in ("r1", "loss"):
            raise ConfigError(f"selection must be 'r1' or 'loss', got {self.selection!r}")


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> max_lr, then half-cosine max_lr -> 0."""
    if not 0 <= it <= cfg.total_iters:
        raise ConfigError(f"iteration {it} outside [0, {cfg.total_iters}]")
    if it < cfg.warmup_iters:
        return cfg.max_lr * it / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    if span == 0:
        return cfg.max_lr
    return 0.5 * cfg.max_lr * (1.0 + math.cos(math.pi * (it - cfg.warmup_iters) / span))


# -- data --------------------------------------------------------------------------------

@dataclass
class PairData:
    """Aligned (log-mel frames, caption tokens) pairs."""
    frames: np.ndarray            # (N, T, F)
    tokens: List[List[int]]
    ids: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)

    def subset(self, idx) -> "PairData":
        idx = list(idx)
        ids = [self.ids[i] for i in idx] if self.ids else []
        return PairData(self.frames[idx], [self.tokens[i] for i in idx], ids)


def batch_loss(model: BiEncoder, frames: np.ndarray, tokens: Sequence[Sequence[int]]) -> InfoNCE:
    a = model.audio_embeddings(frames)
    t = model.text_embeddings(tokens)
    return infonce_terms(similarity_matrix(a, t), ops.exp(model.log_temperature))


def evaluate_pairs(model: BiEncoder, data: PairData) -> Dict[str, float]:
    """Inference-mode retrieval scores and InfoNCE loss over a whole pair set."""
    a = embed_batch(model, list(data.frames), "audio")
    t = embed_batch(model, data.tokens, "text")
    with no_grad():
        S = similarity_matrix(a, t).data
        loss = infonce_loss(S, model.temperature).item()
    r_a2t, r_t2a = recall_at_k(S, 1, "a2t"), recall_at_k(S, 1, "t2a")
    return {"loss": loss, "a2t_R@1": r_a2t, "t2a_R@1": r_t2a, "mean_R@1": 0.5 * (r_a2t + r_t2a)}


@dataclass
class TrainResult:
    best_iter: int
    best_metrics: Dict[str, float]
    trace: List[dict]          # one row per validation: iter, loss, lr, val metrics
    losses: List[float]        # training loss per iteration

    def write_trace(self, path) -> None:
        if not self.trace:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.trace[0]))
            writer.writeheader()
            writer.writerows(self.trace)


def _better(metrics: dict, best: Optional[dict], selection: str) -> bool:
    if best is None:
        return True
    if selection == "loss":
        return metrics["loss"] < best["loss"]
    return metrics["mean_R@1"] > best["mean_R@1"]


def train_contrastive(model: BiEncoder, train: PairData, val: Optional[PairData], cfg: TrainConfig,
                      stage: str = "", schedule=None) -> TrainResult:
    """Minimise InfoNCE over shuffled in-batch negatives; restores the best validated state.

    Validation runs before the first update and then every ``validate_every``
    iterations (and after the last).  ``schedule(it)`` overrides the cosine
    schedule when given.
    """
    cfg.validate()
    if len(train) < cfg.batch_size:
        raise ConfigError(f"{stage or 'training'} corpus has {len(train)} pairs, fewer than batch {cfg.batch_size}")
    schedule = schedule or (lambda it: lr_schedule(it, cfg))
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(list(model.named_parameters()), lr=cfg.max_lr)
    order: List[int] = []
    trace, losses = [], []
    best, best_iter, best_state = None, 0, model.state_dict()
    best_state = {k: v.copy() for k, v in best_state.items()}
    last_loss = float("nan")

    def validate(it: int):
        nonlocal best, best_iter, best_state
        if val is None:
            return
        metrics = evaluate_pairs(model, val)
        trace.append({"stage": stage, "iter": it, "train_loss": last_loss, "lr": schedule(min(it, cfg.total_iters)),
                      "temperature": model.temperature, **{f"val_{k}": v for k, v in metrics.items()}})
        if _better(metrics, best, cfg.selection):
            best, best_iter = metrics, it
            best_state = {k: v.copy() for k, v in model.state_dict().items()}

    model.train()
    validate(0)
    for it in range(1, cfg.total_iters + 1):
        if len(order) < cfg.batch_size:
            order = list(rng.permutation(len(train)))
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        batch = train.subset(idx)
        model.train()
        out = batch_loss(model, batch.frames, batch.tokens)
        opt.zero_grad()
        out.loss.backward()
        opt.step(schedule(it))
        model.clamp_temperature()
        last_loss = out.loss.item()
        losses.append(last_loss)
        if it % cfg.validate_every == 0 or it == cfg.total_iters:
            validate(it)
    if val is None:
        best_iter, best = cfg.total_iters, {}
    else:
        model.load_state_dict(best_state)
    model.train()
    return TrainResult(best_iter, best or {}, trace, losses)


@dataclass
class TwoStageResult:
    stage1: TrainResult
    stage2: TrainResult


def pretrain_two_stage(model: BiEncoder, synthetic: PairData, real_train: PairData, real_val: PairData,
                       stage1: TrainConfig, stage2: TrainConfig, synthetic_val_size: int = 100,
                       seed: int = 0) -> TwoStageResult:
    """Stage 1 on synthetic pairs (held-out synthetic validation), stage 2 on real pairs."""
    if len(synthetic) == 0 or len(real_train) == 0:
        raise ConfigError("both the synthetic and the real corpus must be non-empty")
    n_val = min(synthetic_val_size, len(synthetic) // 5)
    perm = np.random.default_rng(seed).permutation(len(synthetic))
    syn_val = synthetic.subset(sorted(perm[:n_val])) if n_val >= 2 else None
    syn_train = synthetic.subset(sorted(perm[n_val:]))
    r1 = train_contrastive(model, syn_train, syn_val, stage1, stage="synthetic")
    r2 = train_contrastive(model, real_train, real_val, stage2, stage="real")
    return TwoStageResult(r1, r2)


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(model: BiEncoder, path, stage: str = "") -> str:
    """Header JSON (entries, config, feature fingerprint, stage) + float64 payload; returns file sha1."""
    return write_state_file(path, model, {"kind": "biencoder", "config": model.cfg.to_dict(),
                                          "fingerprint": model.cfg.mel_fingerprint, "stage": stage})


def read_checkpoint(path):
    return read_state_file(path)


def load_checkpoint(path, model: Optional[BiEncoder] = None) -> BiEncoder:
    """Build (or fill) a bi-encoder from a checkpoint; the model is untouched on any error."""
    header, state = read_state_file(path)
    if header.get("kind", "biencoder") != "biencoder":
        raise CheckpointError(f"{path}: holds a {header['kind']!r} model, not a bi-encoder")
    if model is None:
        model = BiEncoder(BiEncoderConfig.from_dict(header["config"]))
    fp = header.get("fingerprint")
    if fp and model.cfg.mel_fingerprint and fp != model.cfg.mel_fingerprint:
        raise CheckpointError(f"{path}: feature fingerprint differs from the model's")
    load_state_into(model, state, str(path))
    return model
