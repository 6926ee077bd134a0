"""WAV I/O and log-mel spectrogram features."""
from __future__ import annotations

import hashlib
import json
import struct
import wave
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateInputError, FormatError, ParseError


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FormatError(f"clip '{self.id}' must be mono (1-D), got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise DegenerateInputError(f"clip '{self.id}' is empty")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise FormatError(f"clip '{self.id}' contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path, clip_id: Optional[str] = None) -> AudioClip:
    """Read a 16-bit PCM mono WAV; samples are scaled by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width = wf.getnchannels(), wf.getsampwidth()
            rate, nframes = wf.getframerate(), wf.getnframes()
            if channels != 1:
                raise FormatError(f"{path}: expected mono, found {channels} channels")
            if width != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
            raw = wf.readframes(nframes)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise FormatError(f"{path}: not PCM ({msg})") from exc
        raise ParseError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise ParseError(f"{path}: truncated header") from exc
    if len(raw) != nframes * 2:
        raise ParseError(f"{path}: truncated data, header promises {nframes} frames, "
                         f"found {len(raw) // 2}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate, clip_id if clip_id is not None else path.stem)


def write_wav(path, clip: AudioClip) -> None:
    q = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate))
        wf.writeframes(q.tobytes())


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    win: int = 512
    hop: int = 160
    n_fft: int = 512
    mel_bins: int = 64
    fmin: float = 50.0
    fmax: Optional[float] = None
    floor_eps: float = 1e-10

    @property
    def top(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    def validate(self) -> None:
        if self.win > self.n_fft:
            raise ConfigError(f"win ({self.win}) must be <= n_fft ({self.n_fft})")
        if self.top > self.sample_rate / 2:
            raise ConfigError(f"fmax ({self.top}) exceeds Nyquist ({self.sample_rate / 2})")
        if not 0 <= self.fmin < self.top:
            raise ConfigError(f"need 0 <= fmin < fmax, got {self.fmin}, {self.top}")
        if min(self.hop, self.mel_bins) <= 0 or self.floor_eps <= 0:
            raise ConfigError("hop, mel_bins and floor_eps must be positive")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, F)
    frame_rate: float
    mel_bins: int
    config_fingerprint: str

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# Slaney mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(hz):
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / _F_SP
    log_region = hz >= _MIN_LOG_HZ
    return np.where(log_region, _MIN_LOG_MEL + np.log(np.maximum(hz, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP, mel)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    return np.where(mel >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (mel - _MIN_LOG_MEL)), _F_SP * mel)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """``mel_bins + 2`` frequencies (Hz): filter m spans edges[m] .. edges[m + 2], peak at edges[m + 1]."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.top), cfg.mel_bins + 2))


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters, shape (mel_bins, n_fft // 2 + 1), area-normalised per band."""
    edges = mel_band_edges(cfg)
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    fb = weights * (2.0 / (upper - lower))
    fb.flags.writeable = False  # shared through the cache
    return fb


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_stft(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Centre-padded Hann STFT power, shape (1 + len // hop, n_fft // 2 + 1)."""
    pad = cfg.n_fft // 2
    x = np.pad(samples, (pad, pad))
    window = np.zeros(cfg.n_fft)
    offset = (cfg.n_fft - cfg.win) // 2
    window[offset:offset + cfg.win] = hann(cfg.win)
    n_frames = 1 + samples.size // cfg.hop
    starts = np.arange(n_frames) * cfg.hop
    frames = x[starts[:, None] + np.arange(cfg.n_fft)[None, :]] * window
    return np.abs(np.fft.rfft(frames, axis=1)) ** 2


def logmel(clip: AudioClip, cfg: Optional[MelConfig] = None) -> MelSpectrogram:
    cfg = cfg or MelConfig(sample_rate=clip.sample_rate)
    cfg.validate()
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigError(f"clip rate {clip.sample_rate} != feature config rate {cfg.sample_rate}")
    if clip.samples.size < cfg.hop:
        raise DegenerateInputError(
            f"clip '{clip.id}' has {clip.samples.size} samples, shorter than one hop ({cfg.hop})")
    energy = power_stft(clip.samples, cfg) @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(energy + cfg.floor_eps), cfg.sample_rate / cfg.hop,
                          cfg.mel_bins, cfg.fingerprint())


def stack_logmel(clips, cfg: MelConfig) -> np.ndarray:
    """Log-mel frames of equal-length clips stacked to (N, T, F)."""
    return np.stack([logmel(c, cfg).frames for c in clips])


_CACHE_MAGIC = b"LMEL"


def write_feature_cache(path, mel: MelSpectrogram) -> None:
    """Header: magic, uint32 frames, uint32 bins, float64 frame rate, 40-char fingerprint; then float32 rows."""
    T, F = mel.frames.shape
    header = _CACHE_MAGIC + struct.pack("<IId", T, F, mel.frame_rate) + mel.config_fingerprint.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(mel.frames.astype("<f4").tobytes(order="C"))


def read_feature_cache(path, expected_fingerprint: Optional[str] = None) -> MelSpectrogram:
    blob = Path(path).read_bytes()
    head = len(_CACHE_MAGIC) + 16 + 40
    if len(blob) < head or not blob.startswith(_CACHE_MAGIC):
        raise ParseError(f"{path}: not a feature cache file")
    T, F, rate = struct.unpack("<IId", blob[4:20])
    fingerprint = blob[20:60].decode("ascii")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise ConfigError(f"{path}: cached with config {fingerprint}, expected {expected_fingerprint}")
    body = blob[head:]
    if len(body) != T * F * 4:
        raise ParseError(f"{path}: expected {T * F * 4} payload bytes, found {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, F).astype(np.float64)
    return MelSpectrogram(frames, rate, F, fingerprint)
