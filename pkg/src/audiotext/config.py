"""Validated run configuration with two built-in profiles.

``paper`` carries the reference-scale recipe (documentation; far too slow on
a laptop CPU).  ``desk`` holds the minutes-scale values the tests use.  A JSON
config file overrides either profile key by key; unknown keys are rejected.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .audiofront import MelConfig
from .captioner import CaptionerConfig, CaptionTrainConfig
from .contrastive import TrainConfig
from .errors import ConfigError
from .evalsuite.classify import ClassifierTrainConfig
from .evalsuite.finetune import FinetuneConfig
from .toygen import DEFAULT_HOLDOUT, CorpusConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusSection(_Section):
    n_train: int = Field(500, gt=0)
    n_val: int = Field(100, gt=0)
    n_test: int = Field(100, gt=0)
    n_tag_only: int = Field(2000, gt=0)
    tag_holdout: List[str] = list(DEFAULT_HOLDOUT)
    clip_seconds: float = Field(2.0, gt=0)
    max_events: int = Field(3, ge=1, le=3)
    event_count_weights: List[float] = [0.2, 0.4, 0.4]
    n_zero_shot_per_class: int = Field(25, gt=0)
    n_probe_per_class: int = Field(40, gt=0)     # half train, half test

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(self.n_train, self.n_val, self.n_test, self.n_tag_only, tuple(self.tag_holdout),
                            self.clip_seconds, self.max_events, tuple(self.event_count_weights))


class FeatureSection(_Section):
    sample_rate: int = Field(16000, gt=0)
    win: int = Field(1024, gt=0)
    hop: int = Field(1000, gt=0)
    n_fft: int = Field(1024, gt=0)
    mel_bins: int = Field(32, gt=0)
    fmin: float = Field(50.0, ge=0)
    fmax: Optional[float] = None
    floor_eps: float = Field(1e-10, gt=0)

    def mel_config(self) -> MelConfig:
        cfg = MelConfig(**self.model_dump())
        cfg.validate()
        return cfg


class CaptionerSection(_Section):
    time_pool: int = Field(2, gt=0)
    gru_hidden: int = Field(64, gt=0)
    gru_layers: int = Field(3, gt=0)
    width: int = Field(128, gt=0)
    decoder_layers: int = Field(2, gt=0)
    heads: int = Field(4, gt=0)
    ff: int = Field(256, gt=0)
    max_len: int = Field(20, ge=2)
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(32, gt=0)
    max_lr: float = Field(2e-3, gt=0)
    min_lr: float = Field(2e-5, gt=0)
    beam_size: int = Field(3, gt=0)

    def model_config_for(self, mel_bins: int, use_tags: bool = True) -> CaptionerConfig:
        return CaptionerConfig(mel_bins, self.time_pool, self.gru_hidden, self.gru_layers, self.width,
                               self.decoder_layers, self.heads, self.ff, self.max_len, use_tags)

    def train_config(self, seed: int) -> CaptionTrainConfig:
        return CaptionTrainConfig(self.epochs, self.batch_size, self.max_lr, self.min_lr, 0, seed)


class BootstrapSection(_Section):
    filter_mode: Literal["strict", "lenient"] = "strict"


class EncoderSection(_Section):
    conv_channels: List[int] = [8, 8, 16, 16, 32, 32]
    embed_dim: int = Field(128, gt=0)
    text_width: int = Field(128, gt=0)
    text_layers: int = Field(2, gt=0)
    text_heads: int = Field(4, gt=0)
    text_ff: int = Field(256, gt=0)
    max_tokens: int = Field(32, gt=0)
    init_temperature: float = Field(0.07, gt=0)


class StageSection(_Section):
    batch_size: int = Field(32, ge=2)
    total_iters: int = Field(400, ge=0)
    warmup_iters: int = Field(40, ge=0)
    max_lr: float = Field(1e-3, ge=0)
    validate_every: int = Field(50, gt=0)
    val_size: int = Field(100, ge=0)
    selection: Literal["r1", "loss"] = "r1"

    @model_validator(mode="after")
    def _warmup_fits(self):
        if self.warmup_iters > self.total_iters:
            raise ValueError(f"warmup_iters ({self.warmup_iters}) exceeds total_iters ({self.total_iters})")
        return self

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.batch_size, self.total_iters, self.warmup_iters, self.max_lr,
                           self.validate_every, seed, self.selection)


class PretrainSection(_Section):
    stage1: StageSection = StageSection(total_iters=800, warmup_iters=80)
    stage2: StageSection = StageSection(total_iters=400, warmup_iters=40, max_lr=5e-4)


class FinetuneSection(_Section):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(32, ge=2)
    max_lr: float = Field(5e-4, ge=0)
    validate_every: int = Field(10, ge=0)

    def finetune_config(self, seed: int) -> FinetuneConfig:
        return FinetuneConfig(self.epochs, self.batch_size, self.max_lr, self.validate_every, seed)


class ClassifierSection(_Section):
    mode: Literal["linear-probe", "fine-tune"] = "linear-probe"
    steps: int = Field(300, ge=0)
    batch_size: int = Field(64, gt=0)
    lr: float = Field(1e-2, gt=0)

    def train_config(self, seed: int) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(self.steps, self.batch_size, self.lr, seed)


class PathsSection(_Section):
    corpus_dir: Optional[str] = None
    caption_manifest: Optional[str] = None
    tag_manifest: Optional[str] = None
    synthetic_manifest: Optional[str] = None
    vocab: Optional[str] = None
    captioner_checkpoint: Optional[str] = None
    checkpoint: Optional[str] = None
    references: Optional[str] = None


class RunConfig(_Section):
    profile: Literal["paper", "desk"] = "desk"
    seed: int = Field(0, ge=0)
    corpus: CorpusSection = CorpusSection()
    features: FeatureSection = FeatureSection()
    captioner: CaptionerSection = CaptionerSection()
    bootstrap: BootstrapSection = BootstrapSection()
    encoder: EncoderSection = EncoderSection()
    pretrain: PretrainSection = PretrainSection()
    finetune: FinetuneSection = FinetuneSection()
    classifier: ClassifierSection = ClassifierSection()
    paths: PathsSection = PathsSection()


# Reference-scale recipe.  The captioner schedule, beam width, both pre-training
# stages and the retrieval fine-tuning values are the published ones; the
# feature front end and widths are conventional choices for that scale.
PAPER_OVERRIDES = {
    "profile": "paper",
    "features": {"win": 512, "hop": 160, "n_fft": 512, "mel_bins": 64},
    "captioner": {"epochs": 25, "batch_size": 64, "max_lr": 5e-4, "min_lr": 5e-7, "beam_size": 3},
    "encoder": {"conv_channels": [64, 64, 128, 128, 256, 256, 512, 512, 1024, 1024, 2048, 2048],
                "embed_dim": 512, "text_width": 512, "text_layers": 8, "text_heads": 8, "text_ff": 2048},
    "pretrain": {
        "stage1": {"batch_size": 128, "total_iters": 200000, "warmup_iters": 10000, "max_lr": 1e-4,
                   "validate_every": 500, "val_size": 1200},
        "stage2": {"batch_size": 128, "total_iters": 15000, "warmup_iters": 750, "max_lr": 1e-4,
                   "validate_every": 750, "val_size": 0},
    },
    "finetune": {"epochs": 20, "batch_size": 128, "max_lr": 5e-5, "validate_every": 0},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def build_config(overrides: Optional[dict] = None, profile: Optional[str] = None) -> RunConfig:
    overrides = dict(overrides or {})
    profile = profile or overrides.get("profile", "desk")
    if profile not in ("paper", "desk"):
        raise ConfigError(f"profile: unknown profile {profile!r}")
    base = RunConfig().model_dump()
    if profile == "paper":
        base = _merge(base, PAPER_OVERRIDES)
    merged = _merge(base, overrides)
    merged["profile"] = profile
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path=None, profile: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Read a JSON config (``None`` means an empty object) on top of a profile."""
    overrides = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    if seed is not None:
        overrides["seed"] = seed
    return build_config(overrides, profile)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(), indent=2, sort_keys=True)
