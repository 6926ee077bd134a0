"""Expand a tag-only corpus into synthetic audio-caption pairs with the captioner."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, List

import numpy as np

from .captioner import CaptionModel, generate_captions, hypothesis_text
from .errors import ConfigError
from .textproc import Vocabulary
from .toygen import Corpus

STRICT, LENIENT = "strict", "lenient"


@dataclass
class FilterReport:
    kept: int
    dropped: int
    mode: str


def filter_by_tag_vocab(tag_only: Corpus, caption_tags: Iterable[str], mode: str = STRICT):
    """Keep clips whose tags are all known (strict) or that have any known tag (lenient).

    Returns (filtered corpus, report).  Item order is preserved.
    """
    known = set(caption_tags)
    if mode == STRICT:
        keep = lambda tags: set(tags) <= known  # noqa: E731
    elif mode == LENIENT:
        keep = lambda tags: bool(set(tags) & known)  # noqa: E731
    else:
        raise ConfigError(f"filter mode must be '{STRICT}' or '{LENIENT}', got {mode!r}")
    items = [it for it in tag_only if keep(it.tags)]
    report = FilterReport(len(items), len(tag_only) - len(items), mode)
    return Corpus(tag_only.name, items, tag_only.sample_rate), report


@dataclass
class BootstrapReport:
    generated: int
    forced: List[str] = field(default_factory=list)   # clip ids whose caption never emitted <EOS>


def generate_synthetic_corpus(model: CaptionModel, filtered: Corpus, frames: np.ndarray, vocab: Vocabulary,
                              beam_size: int = 3, name: str = "synthetic"):
    """One beam-searched caption per clip, conditioned on the clip's own tags.

    ``frames`` holds the clips' log-mel features in corpus order.  The result
    is sorted by clip_id with provenance "synthetic".  Returns (corpus, report,
    scores) where scores maps clip_id to the beam score.
    """
    items = list(filtered)
    if len(frames) != len(items):
        raise ConfigError(f"{len(frames)} feature rows for {len(items)} clips")
    hyps = generate_captions(model, frames, [it.tags for it in items], beam_size=beam_size) if items else []
    out, forced, scores = [], [], {}
    for it, h in zip(items, hyps):
        text = hypothesis_text(h, vocab)
        if h.forced:
            forced.append(it.clip_id)
        if not text:
            # immediate <EOS>: fall back to the tag words so no caption is empty, and flag it
            text = " ".join(t.replace("_", " ") for t in it.tags)
            forced.append(it.clip_id)
        out.append(replace(it, caption=text, provenance="synthetic", split="train"))
        scores[it.clip_id] = h.score
    out.sort(key=lambda it: it.clip_id)
    return Corpus(name, out, filtered.sample_rate), BootstrapReport(len(out), sorted(set(forced))), scores


def synthetic_captions_jsonl(corpus: Corpus, scores: dict) -> str:
    return "".join(json.dumps({"clip_id": it.clip_id, "caption": it.caption,
                               "score": scores.get(it.clip_id)}, sort_keys=True) + "\n" for it in corpus)
