"""Zero-shot classification and trained classification heads on the audio encoder."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..diffcore import Adam, Linear, Module, Tensor, no_grad
from ..diffcore import functional as F
from ..errors import ConfigError, DataError, DegenerateInputError, StateError
from ..textproc import Vocabulary, label_to_text, tokenize
from .retrieval import accuracy, mean_average_precision


def cosine_scores(audio: np.ndarray, text: np.ndarray) -> np.ndarray:
    a = audio / np.linalg.norm(audio, axis=1, keepdims=True)
    t = text / np.linalg.norm(text, axis=1, keepdims=True)
    return a @ t.T


@dataclass
class ZeroShotResult:
    scores: np.ndarray        # (clips, labels) cosine similarities
    predictions: np.ndarray   # argmax label index per clip (first on ties)
    label_texts: List[str]


def zero_shot_classify(model, frames, labels: Sequence[str], vocab: Vocabulary) -> ZeroShotResult:
    """Score clips against textual labels; underscores in labels become blanks.

    ``model`` needs ``embed_audio(frames)`` and ``embed_text(token_lists)``;
    the labels are encoded once, in one call.
    """
    if len(labels) == 0:
        raise ConfigError("zero-shot classification needs at least one label")
    texts = [label_to_text(l) for l in labels]
    tokens = [tokenize(t, vocab) for t in texts]
    empty = [l for l, t in zip(labels, tokens) if not t]
    if empty:
        raise DegenerateInputError(f"labels {empty} tokenize to nothing")
    label_emb = np.asarray(model.embed_text(tokens))
    audio_emb = np.asarray(model.embed_audio(frames))
    scores = cosine_scores(audio_emb, label_emb)
    return ZeroShotResult(scores, scores.argmax(axis=1), texts)


# -- trained heads -----------------------------------------------------------------------

LINEAR_PROBE, FINE_TUNE = "linear-probe", "fine-tune"
SINGLE, MULTI = "single-label", "multi-label"


class ClassifierHead(Module):
    """One fully-connected layer from the audio embedding to class logits."""

    def __init__(self, embed_dim: int, n_classes: int, mode: str = LINEAR_PROBE, seed: int = 0):
        super().__init__()
        if mode not in (LINEAR_PROBE, FINE_TUNE):
            raise ConfigError(f"mode must be '{LINEAR_PROBE}' or '{FINE_TUNE}', got {mode!r}")
        self.mode = mode
        self.n_classes = n_classes
        self.fc = Linear(embed_dim, n_classes, np.random.default_rng(seed))

    def forward(self, features):
        return self.fc(features)


@dataclass
class ClassifierTrainConfig:
    steps: int = 300
    batch_size: int = 64       # fine-tune mode only; the probe trains full-batch
    lr: float = 1e-2
    seed: int = 0


def encoder_hash(encoder: Module) -> str:
    h = hashlib.sha1()
    for name, value in encoder.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


def _check_labels(labels, n_classes: int, task: str) -> np.ndarray:
    y = np.asarray(labels)
    if task == SINGLE:
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise DataError("single-label targets must be a 1-D integer array")
        bad = np.flatnonzero((y < 0) | (y >= n_classes))
        if bad.size:
            raise DataError(f"label {int(y[bad[0]])} at item {int(bad[0])} outside [0, {n_classes})")
    elif task == MULTI:
        if y.ndim != 2 or y.shape[1] != n_classes or not np.isin(y, (0, 1)).all():
            raise DataError(f"multi-label targets must be a 0/1 matrix with {n_classes} columns")
    else:
        raise ConfigError(f"task must be '{SINGLE}' or '{MULTI}', got {task!r}")
    return y


def _loss(logits, y, task: str):
    return F.cross_entropy(logits, y) if task == SINGLE else F.bce_with_logits(logits, y)


@dataclass
class ClassifierResult:
    losses: List[float]
    train_metric: float
    encoder_hash_before: str
    encoder_hash_after: str


def audio_features(model, frames) -> np.ndarray:
    return np.asarray(model.embed_audio(frames))


def train_classifier(model, head: ClassifierHead, frames: np.ndarray, labels, task: str = SINGLE,
                     cfg: Optional[ClassifierTrainConfig] = None) -> ClassifierResult:
    """Train ``head`` (and in fine-tune mode the audio encoder) with CE or BCE.

    In linear-probe mode the encoder is only run in inference mode to extract
    features, and its state is verified bitwise unchanged afterwards.
    """
    cfg = cfg or ClassifierTrainConfig()
    y = _check_labels(labels, head.n_classes, task)
    before = encoder_hash(model.audio)
    losses = []
    rng = np.random.default_rng(cfg.seed)
    if head.mode == LINEAR_PROBE:
        feats = Tensor(audio_features(model, frames))
        opt = Adam(list(head.named_parameters()), lr=cfg.lr)
        for _ in range(cfg.steps):
            loss = _loss(head(feats), y, task)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    else:
        params = [(f"head.{n}", p) for n, p in head.named_parameters()]
        params += [(f"audio.{n}", p) for n, p in model.audio.named_parameters()]
        opt = Adam(params, lr=cfg.lr)
        model.audio.train()
        for _ in range(cfg.steps):
            idx = rng.choice(len(y), size=min(cfg.batch_size, len(y)), replace=False)
            loss = _loss(head(model.audio(Tensor(frames[idx]))), y[idx], task)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.audio.eval()
    after = encoder_hash(model.audio)
    if head.mode == LINEAR_PROBE and after != before:
        raise StateError("linear probe modified the frozen encoder")
    metric = evaluate_classifier(model, head, frames, y, task)
    return ClassifierResult(losses, metric, before, after)


def predict_logits(model, head: ClassifierHead, frames) -> np.ndarray:
    feats = audio_features(model, frames)
    with no_grad():
        return head(Tensor(feats)).data


def evaluate_classifier(model, head: ClassifierHead, frames, labels, task: str = SINGLE) -> float:
    """Accuracy (single-label) or mAP (multi-label)."""
    y = _check_labels(labels, head.n_classes, task)
    logits = predict_logits(model, head, frames)
    if task == SINGLE:
        return accuracy(logits, y)
    return mean_average_precision(logits, y)[0]
