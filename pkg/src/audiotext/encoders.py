"""Audio/text bi-encoder.

The audio side is a VGG-style stack of conv-BN-ReLU blocks with 2x2 max
pooling between every two blocks, global (mean + max) pooling and a linear
projection.  The text side is a pre-norm transformer over word tokens with a
prepended summary token (the ``<BOS>`` index) whose final state is projected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .audiofront import MelSpectrogram
from .diffcore import (BatchNorm, Conv2d, Embedding, EncoderBlock, LayerNorm, Linear, Module,
                       Parameter, Tensor, no_grad, ops)
from .diffcore import functional as F
from .errors import ConfigError, DegenerateInputError
from .textproc import pad_batch

MIN_TEMPERATURE = 1e-3


@dataclass
class BiEncoderConfig:
    mel_bins: int = 64
    conv_channels: Tuple[int, ...] = (16, 32, 64, 128, 256, 256)
    embed_dim: int = 128
    vocab_size: int = 64
    text_width: int = 128
    text_layers: int = 2
    text_heads: int = 4
    text_ff: int = 256
    max_tokens: int = 32
    init_temperature: float = 0.07
    mel_fingerprint: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BiEncoderConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


class AudioEncoder(Module):
    def __init__(self, cfg: BiEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.bn0 = BatchNorm(cfg.mel_bins)
        self.convs, self.norms = [], []
        c_in = 1
        for c_out in cfg.conv_channels:
            self.convs.append(Conv2d(c_in, c_out, rng))
            self.norms.append(BatchNorm(c_out))
            c_in = c_out
        self.proj = Linear(c_in, cfg.embed_dim, rng)
        self.n_pools = (len(cfg.conv_channels) - 1) // 2

    @property
    def min_frames(self) -> int:
        return 2 ** self.n_pools

    def feature_map(self, frames) -> Tensor:
        """(B, T, F) log-mel -> (B, T', F', C) map after the conv stack."""
        B, T, Fb = frames.shape
        if T < self.min_frames or Fb < self.min_frames:
            raise DegenerateInputError(
                f"mel of {T}x{Fb} is too small for {self.n_pools} 2x2 poolings")
        x = ops.reshape(self.bn0(frames), (B, T, Fb, 1))
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = ops.relu(norm(conv(x)))
            if i % 2 == 1 and i < len(self.convs) - 1:
                x = F.max_pool2x2(x)
        return x

    def forward(self, frames) -> Tensor:
        fmap = self.feature_map(frames)
        pooled = F.global_mean_pool(fmap) + F.global_max_pool(fmap)
        return self.proj(pooled)


class TextEncoder(Module):
    def __init__(self, cfg: BiEncoderConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.text_width
        self.tok = Embedding(cfg.vocab_size, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.1, (cfg.max_tokens + 1, d)))
        self.blocks = [EncoderBlock(d, cfg.text_heads, cfg.text_ff, rng) for _ in range(cfg.text_layers)]
        self.ln = LayerNorm(d)
        self.proj = Linear(d, cfg.embed_dim, rng)
        self.max_tokens = cfg.max_tokens

    def forward(self, tokens: np.ndarray, pad: int = 0, summary: int = 1) -> Tensor:
        """``tokens``: (B, L) int array right-padded with ``pad``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        if L > self.max_tokens:
            tokens, L = tokens[:, :self.max_tokens], self.max_tokens
        if np.any((tokens != pad).sum(axis=1) == 0):
            raise DegenerateInputError("text encoder got an empty token sequence")
        ids = np.concatenate([np.full((B, 1), summary), tokens], axis=1)
        mask = (ids == pad)[:, None, None, :]
        x = self.tok(ids) + self.pos[:L + 1]
        for block in self.blocks:
            x = block(x, mask)
        return self.proj(self.ln(x)[:, 0, :])


class BiEncoder(Module):
    def __init__(self, cfg: BiEncoderConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.audio = AudioEncoder(cfg, rng)
        self.text = TextEncoder(cfg, rng)
        self.log_temperature = Parameter(np.array(np.log(cfg.init_temperature)))

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.data))

    def clamp_temperature(self) -> None:
        floor = np.log(MIN_TEMPERATURE)
        if self.log_temperature.data < floor:
            self.log_temperature.data = np.array(floor)

    def check_mel(self, mel: MelSpectrogram) -> None:
        fp = self.cfg.mel_fingerprint
        if fp and mel.config_fingerprint != fp:
            raise ConfigError(
                f"mel config {mel.config_fingerprint[:10]} does not match model config {fp[:10]}")
        if mel.mel_bins != self.cfg.mel_bins:
            raise ConfigError(f"mel has {mel.mel_bins} bins, model expects {self.cfg.mel_bins}")

    def audio_embeddings(self, frames) -> Tensor:
        return self.audio(Tensor(frames) if not isinstance(frames, Tensor) else frames)

    def text_embeddings(self, token_lists: Sequence[Sequence[int]]) -> Tensor:
        return self.text(pad_batch(token_lists))

    # inference helpers returning plain arrays
    def embed_audio(self, frames) -> np.ndarray:
        return embed_batch(self, list(frames), "audio")

    def embed_text(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        return embed_batch(self, list(token_lists), "text")


def encode_audio(model: BiEncoder, mel: MelSpectrogram) -> np.ndarray:
    """Single-clip audio embedding in inference mode."""
    model.check_mel(mel)
    return embed_batch(model, [mel.frames], "audio")[0]


def encode_text(model: BiEncoder, tokens: Sequence[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise DegenerateInputError("cannot encode an empty token sequence")
    return embed_batch(model, [list(tokens)], "text")[0]


def embed_batch(model: BiEncoder, items: Sequence, modality: str, batch_size: int = 64) -> np.ndarray:
    """Inference-mode embeddings for a homogeneous list of mel frame arrays or token lists."""
    if modality not in ("audio", "text"):
        raise ConfigError(f"modality must be 'audio' or 'text', got {modality!r}")
    was_training = model.training
    model.eval()
    rows: List[np.ndarray] = []
    try:
        with no_grad():
            for start in range(0, len(items), batch_size):
                chunk = items[start:start + batch_size]
                if modality == "audio":
                    frames = [m.frames if isinstance(m, MelSpectrogram) else np.asarray(m) for m in chunk]
                    if len({f.shape for f in frames}) != 1:
                        # ragged lengths: encode one by one
                        rows.extend(model.audio_embeddings(f[None]).data for f in frames)
                        continue
                    rows.append(model.audio_embeddings(np.stack(frames)).data)
                else:
                    rows.append(model.text_embeddings(chunk).data)
    finally:
        model.train(was_training)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, model.cfg.embed_dim))
