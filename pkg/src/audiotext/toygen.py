"""Procedural audio-event corpora with template captions.

Two corpora come out of :func:`generate_corpus`:

* a *caption corpus* (captioned, no held-out tags, split train/val/test);
* a *tag-only corpus* over the full event registry (tags, no captions).

Every caption is built from per-event phrases that all contain the event's
key phrase, so tags can be recovered from a caption by substring matching
(:func:`recover_tags`).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .audiofront import AudioClip, load_wav, write_wav
from .errors import ConfigError

SAMPLE_RATE = 16000
KINDS = ("sine", "square", "chirp", "noise_burst", "am_tone")


@dataclass(frozen=True)
class EventSpec:
    event_id: str
    kind: str
    freq: Tuple[float, float] = (440.0, 440.0)
    duration: Tuple[float, float] = (0.5, 0.5)
    amplitude: Tuple[float, float] = (0.5, 0.5)
    freq_end: Tuple[float, float] = (440.0, 440.0)   # chirp end frequency
    mod_freq: Tuple[float, float] = (5.0, 5.0)       # am_tone modulation rate
    decay: float = 0.0                                # exponential decay rate (1/s)
    key: str = ""
    phrases: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"event '{self.event_id}': unknown synthesis kind '{self.kind}'")
        for name in ("freq", "duration", "amplitude", "freq_end", "mod_freq"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"event '{self.event_id}': empty {name} range [{lo}, {hi}]")
        if self.duration[0] <= 0 or self.amplitude[0] <= 0:
            raise ConfigError(f"event '{self.event_id}': duration and amplitude must be positive")
        if any(self.key not in p for p in self.phrases):
            raise ConfigError(f"event '{self.event_id}': every phrase must contain '{self.key}'")

    @property
    def label(self) -> str:
        return self.event_id


def default_registry() -> List[EventSpec]:
    """Ten events; the last two are meant as held-out (tag-only) events."""
    return [
        EventSpec("low_hum", "sine", freq=(110, 170), duration=(0.6, 1.0), amplitude=(0.4, 0.8),
                  key="low hum", phrases=("a low hum", "a steady low hum", "a faint low hum")),
        EventSpec("high_beep", "sine", freq=(2200, 3000), duration=(0.15, 0.35), amplitude=(0.4, 0.8),
                  key="high beep", phrases=("a high beep", "a short high beep", "a sharp high beep")),
        EventSpec("buzzer", "square", freq=(220, 320), duration=(0.4, 0.8), amplitude=(0.3, 0.6),
                  key="buzzer", phrases=("a buzzer", "a loud buzzer", "an electric buzzer")),
        EventSpec("rising_chirp", "chirp", freq=(300, 600), freq_end=(2500, 3500), duration=(0.4, 0.7),
                  amplitude=(0.4, 0.8), key="rising chirp",
                  phrases=("a rising chirp", "a quick rising chirp", "a bright rising chirp")),
        EventSpec("falling_chirp", "chirp", freq=(2500, 3500), freq_end=(300, 600), duration=(0.4, 0.7),
                  amplitude=(0.4, 0.8), key="falling chirp",
                  phrases=("a falling chirp", "a slow falling chirp", "a soft falling chirp")),
        EventSpec("noise_burst", "noise_burst", duration=(0.1, 0.3), amplitude=(0.4, 0.8),
                  key="noise burst", phrases=("a noise burst", "a loud noise burst", "a sudden noise burst")),
        EventSpec("siren", "am_tone", freq=(700, 900), mod_freq=(4, 7), duration=(0.8, 1.2),
                  amplitude=(0.4, 0.8), key="siren", phrases=("a siren", "a wailing siren", "a distant siren")),
        EventSpec("engine_rumble", "am_tone", freq=(60, 90), mod_freq=(12, 20), duration=(0.6, 1.0),
                  amplitude=(0.5, 0.9), key="engine rumble",
                  phrases=("an engine rumble", "a deep engine rumble", "a rough engine rumble")),
        EventSpec("whistle", "sine", freq=(1200, 1500), duration=(0.5, 0.9), amplitude=(0.4, 0.8),
                  key="whistle", phrases=("a whistle", "a shrill whistle", "a long whistle")),
        EventSpec("bell_ding", "sine", freq=(900, 1100), duration=(0.5, 0.8), amplitude=(0.5, 0.9),
                  decay=6.0, key="bell ding", phrases=("a bell ding", "a clear bell ding", "a single bell ding")),
    ]


DEFAULT_HOLDOUT = ("whistle", "bell_ding")

SINGLE_TEMPLATES = ("{0} is heard", "{0} can be heard", "there is {0}")
PAIR_TEMPLATES = ("{0} followed by {1}", "{0} and then {1}", "{0} then {1}")
TRIPLE_TEMPLATES = ("{0} followed by {1} and then {2}", "{0} then {1} then {2}",
                    "{0} and {1} followed by {2}")


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _ramp(n: int, sr: int) -> np.ndarray:
    ramp = min(n // 4, int(0.01 * sr))
    env = np.ones(n)
    if ramp > 0:
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return env


def synth_event(spec: EventSpec, seed: int, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Render one event; parameters are drawn from the spec ranges with ``seed``.

    The rendered clip is scaled so its peak absolute sample equals the drawn amplitude.
    """
    rng = _rng(seed, 7)
    dur = rng.uniform(*spec.duration)
    amp = rng.uniform(*spec.amplitude)
    f0 = rng.uniform(*spec.freq)
    n = max(1, int(round(dur * sample_rate)))
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    if spec.kind == "sine":
        x = np.sin(2 * np.pi * f0 * t + phase)
    elif spec.kind == "square":
        x = np.sign(np.sin(2 * np.pi * f0 * t + phase))
    elif spec.kind == "chirp":
        f1 = rng.uniform(*spec.freq_end)
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / dur) + phase)
    elif spec.kind == "noise_burst":
        x = rng.normal(size=n)
    else:  # am_tone
        fm = rng.uniform(*spec.mod_freq)
        x = np.sin(2 * np.pi * f0 * t + phase) * (0.5 + 0.5 * np.sin(2 * np.pi * fm * t))
    x = x * _ramp(n, sample_rate)
    if spec.decay > 0:
        x = x * np.exp(-spec.decay * t)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (amp / peak)
    return AudioClip(x, sample_rate, f"{spec.event_id}-{seed}")


@dataclass
class AudioTextExample:
    clip_id: str
    caption: str
    tags: Tuple[str, ...]
    split: str = "train"
    provenance: str = "human-style"
    wav_path: Optional[str] = None
    audio: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def manifest_row(self) -> dict:
        return {"clip_id": self.clip_id, "wav_path": self.wav_path, "caption": self.caption,
                "tags": list(self.tags), "split": self.split, "provenance": self.provenance}


def _scene_caption(order: Sequence[EventSpec], rng: np.random.Generator) -> str:
    phrases = [spec.phrases[rng.integers(len(spec.phrases))] for spec in order]
    templates = {1: SINGLE_TEMPLATES, 2: PAIR_TEMPLATES, 3: TRIPLE_TEMPLATES}[len(order)]
    return templates[rng.integers(len(templates))].format(*phrases)


def mix_scene(events: Sequence[EventSpec], seed: int, clip_id: str = "", duration: float = 2.0,
              sample_rate: int = SAMPLE_RATE, noise_floor: float = 0.003,
              with_caption: bool = True) -> AudioTextExample:
    """Place 1-3 events at random onsets, sum, add a faint noise floor, normalise peak to 0.9.

    The caption names the events in order of onset.
    """
    if not events:
        raise ConfigError("mix_scene needs at least one event")
    if len(events) > 3:
        raise ConfigError(f"mix_scene takes at most 3 events, got {len(events)}")
    rng = _rng(seed, 11)
    n = int(round(duration * sample_rate))
    mix = noise_floor * rng.normal(size=n)
    onsets = []
    for k, spec in enumerate(events):
        clip = synth_event(spec, int(rng.integers(2**31)), sample_rate).samples[:n]
        start = int(rng.integers(0, n - clip.size + 1))
        mix[start:start + clip.size] += clip
        onsets.append((start, k))
    mix *= 0.9 / np.max(np.abs(mix))
    order = [events[k] for _, k in sorted(onsets)]
    caption = _scene_caption(order, rng) if with_caption else ""
    tags = tuple(sorted({spec.event_id for spec in events}))
    return AudioTextExample(clip_id or f"scene-{seed}", caption, tags, audio=mix)


def recover_tags(caption: str, registry: Iterable[EventSpec]) -> set:
    """Tags whose key phrase occurs in the caption."""
    text = " ".join(caption.lower().split())
    return {spec.event_id for spec in registry if spec.key in text}


@dataclass
class Corpus:
    name: str
    items: List[AudioTextExample]
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def split(self, name: str) -> "Corpus":
        return Corpus(f"{self.name}:{name}", [it for it in self.items if it.split == name], self.sample_rate)

    def tag_set(self) -> set:
        return {t for it in self.items for t in it.tags}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(it.manifest_row(), sort_keys=True) + "\n" for it in self.items)

    def fingerprint(self) -> str:
        """Content hash; wav paths enter by file name only, so a moved corpus keeps its id."""
        rows = []
        for it in self.items:
            row = it.manifest_row()
            if row["wav_path"] is not None:
                row["wav_path"] = Path(row["wav_path"]).name
            rows.append(json.dumps(row, sort_keys=True))
        return hashlib.sha1("\n".join(rows).encode()).hexdigest()

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    def audio(self, item: AudioTextExample) -> AudioClip:
        if item.audio is not None:
            return AudioClip(item.audio, self.sample_rate, item.clip_id)
        if item.wav_path is None:
            raise ConfigError(f"item '{item.clip_id}' has neither inline audio nor a wav_path")
        return load_wav(item.wav_path, item.clip_id)


def read_manifest(path, name: Optional[str] = None) -> Corpus:
    items = []
    base = Path(path).resolve().parent
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        wav = row.get("wav_path")
        if wav is not None and not Path(wav).is_absolute():
            wav = str(base / wav)
        items.append(AudioTextExample(row["clip_id"], row.get("caption") or "", tuple(row["tags"]),
                                      row.get("split", "train"), row.get("provenance", "human-style"), wav))
    return Corpus(name or Path(path).stem, items)


@dataclass
class CorpusConfig:
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    n_tag_only: int = 2000
    tag_holdout: Tuple[str, ...] = DEFAULT_HOLDOUT
    clip_seconds: float = 2.0
    max_events: int = 3
    # relative frequency of 1, 2, 3 events per scene; multi-event scenes dominate so that
    # most captions single out one clip
    event_count_weights: Tuple[float, ...] = (0.2, 0.4, 0.4)
    registry: Optional[List[EventSpec]] = None

    def events(self) -> List[EventSpec]:
        return list(self.registry) if self.registry is not None else default_registry()


def _draw_events(pool: Sequence[EventSpec], rng: np.random.Generator, max_events: int,
                 weights: Sequence[float]) -> List[EventSpec]:
    top = min(max_events, len(pool))
    w = np.asarray(list(weights) + [0.0] * top, dtype=np.float64)[:top]
    if w.sum() <= 0:
        w = np.ones(top)
    k = 1 + int(rng.choice(top, p=w / w.sum()))
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picks]


def generate_corpus(cfg: CorpusConfig, seed: int, out_dir=None) -> Tuple[Corpus, Corpus]:
    """Return (caption corpus, tag-only corpus); with ``out_dir`` also write WAVs and manifests."""
    registry = cfg.events()
    ids = [spec.event_id for spec in registry]
    if len(set(ids)) != len(ids):
        raise ConfigError("event ids in the registry must be unique")
    unknown = set(cfg.tag_holdout) - set(ids)
    if unknown:
        raise ConfigError(f"holdout tags not in registry: {sorted(unknown)}")
    visible = [spec for spec in registry if spec.event_id not in cfg.tag_holdout]
    if not visible:
        raise ConfigError("tag_holdout covers every event; caption corpus would be empty")
    for name in ("n_train", "n_val", "n_test", "n_tag_only"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")

    caption_items = []
    k = 0
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        for i in range(count):
            rng = _rng(seed, 1, k)
            events = _draw_events(visible, rng, cfg.max_events, cfg.event_count_weights)
            item = mix_scene(events, int(rng.integers(2**31)), f"cap-{split}-{i:05d}", cfg.clip_seconds)
            item.split = split
            caption_items.append(item)
            k += 1
    tag_items = []
    for i in range(cfg.n_tag_only):
        rng = _rng(seed, 2, i)
        events = _draw_events(registry, rng, cfg.max_events, cfg.event_count_weights)
        item = mix_scene(events, int(rng.integers(2**31)), f"tag-{i:05d}", cfg.clip_seconds,
                         with_caption=False)
        item.caption = ""
        tag_items.append(item)
    caption_corpus = Corpus("caption", caption_items)
    tag_corpus = Corpus("tag_only", tag_items)
    if out_dir is not None:
        _materialise(caption_corpus, Path(out_dir))
        _materialise(tag_corpus, Path(out_dir))
    return caption_corpus, tag_corpus


def _materialise(corpus: Corpus, out_dir: Path) -> None:
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    for item in corpus.items:
        path = wav_dir / f"{item.clip_id}.wav"
        write_wav(path, AudioClip(item.audio, corpus.sample_rate, item.clip_id))
        item.wav_path = f"wav/{item.clip_id}.wav"
    corpus.write(out_dir / f"{corpus.name}.jsonl")


def event_classification_set(events: Sequence[EventSpec], n_per_class: int, seed: int,
                             clip_seconds: float = 2.0, split: str = "test") -> Tuple[Corpus, np.ndarray]:
    """Single-event scenes, one class per event; returns the corpus and integer labels."""
    items, labels = [], []
    for c, spec in enumerate(events):
        for i in range(n_per_class):
            rng = _rng(seed, 3, c, i)
            item = mix_scene([spec], int(rng.integers(2**31)), f"cls-{spec.event_id}-{i:04d}", clip_seconds)
            item.split = split
            items.append(item)
            labels.append(c)
    return Corpus("classification", items), np.array(labels)


def event_lookup(registry: Iterable[EventSpec]) -> Dict[str, EventSpec]:
    return {spec.event_id: spec for spec in registry}
