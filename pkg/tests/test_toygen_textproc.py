import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiotext.errors import ConfigError
from audiotext.textproc import (Vocabulary, build_vocab, detokenize, label_to_text, normalize,
                                tokenize)
from audiotext.toygen import (SINGLE_TEMPLATES, CorpusConfig, EventSpec, default_registry,
                              generate_corpus, mix_scene, read_manifest, recover_tags, synth_event)

REG = {spec.event_id: spec for spec in default_registry()}


def test_synth_is_deterministic():
    a = synth_event(REG["low_hum"], 5).samples
    b = synth_event(REG["low_hum"], 5).samples
    assert a.tobytes() == b.tobytes()


def test_peak_equals_fixed_amplitude():
    spec = EventSpec("t", "sine", freq=(300, 300), duration=(0.5, 0.5), amplitude=(0.5, 0.5))
    x = synth_event(spec, 1).samples
    assert abs(np.max(np.abs(x)) - 0.5) <= 1e-6
    assert x.size == 8000


def test_duration_within_range():
    spec = REG["siren"]
    for seed in range(5):
        dur = synth_event(spec, seed).duration
        assert spec.duration[0] - 1e-4 <= dur <= spec.duration[1] + 1e-4


def test_chirp_zero_crossing_rate_increases():
    spec = EventSpec("up", "chirp", freq=(200, 200), freq_end=(4000, 4000), duration=(1.0, 1.0),
                     amplitude=(0.5, 0.5))
    x = synth_event(spec, 0).samples
    windows = x[:16000 - 16000 % 1600].reshape(-1, 1600)[1:-1]  # skip the ramped edges
    zcr = [(np.diff(np.signbit(w).astype(int)) != 0).sum() for w in windows]
    assert all(b > a for a, b in zip(zcr, zcr[1:]))


def test_single_event_scene_uses_single_template():
    item = mix_scene([REG["buzzer"]], seed=3)
    phrases = REG["buzzer"].phrases
    options = {t.format(p) for t in SINGLE_TEMPLATES for p in phrases}
    assert item.caption in options
    assert item.tags == ("buzzer",)


def test_two_event_scene():
    item = mix_scene([REG["buzzer"], REG["siren"]], seed=4)
    assert "buzzer" in item.caption and "siren" in item.caption
    assert len(item.tags) == 2
    assert np.max(np.abs(item.audio)) <= 0.9 + 1e-12


def test_three_event_captions_recover_all_tags():
    for seed in range(10):
        item = mix_scene([REG["high_beep"], REG["low_hum"], REG["siren"]], seed=seed)
        assert recover_tags(item.caption, REG.values()) == set(item.tags)


def test_empty_scene_rejected():
    with pytest.raises(ConfigError):
        mix_scene([], seed=0)


def _small_cfg(**kw):
    base = dict(n_train=12, n_val=3, n_test=3, n_tag_only=20, clip_seconds=1.0)
    base.update(kw)
    return CorpusConfig(**base)


def test_corpus_counts_holdout_and_determinism(tmp_path):
    cfg = _small_cfg()
    cap, tag = generate_corpus(cfg, seed=7)
    assert len(cap.split("train")) == 12
    for item in cap:
        assert not set(item.tags) & set(cfg.tag_holdout)
        assert item.caption
        assert recover_tags(item.caption, REG.values()) == set(item.tags)
    ids = [it.clip_id for it in cap] + [it.clip_id for it in tag]
    assert len(ids) == len(set(ids))
    cap2, tag2 = generate_corpus(cfg, seed=7)
    assert cap.to_jsonl() == cap2.to_jsonl() and tag.to_jsonl() == tag2.to_jsonl()
    assert cap.to_jsonl() != generate_corpus(cfg, seed=8)[0].to_jsonl()


def test_corpus_written_to_disk(tmp_path):
    cap, _ = generate_corpus(_small_cfg(n_tag_only=2), seed=1, out_dir=tmp_path)
    back = read_manifest(tmp_path / "caption.jsonl")
    assert [it.clip_id for it in back] == [it.clip_id for it in cap]
    clip = back.audio(back.items[0])
    np.testing.assert_allclose(clip.samples, cap.items[0].audio, atol=1 / 32768)


def test_holdout_covering_everything_rejected():
    ids = tuple(REG)
    with pytest.raises(ConfigError):
        generate_corpus(_small_cfg(tag_holdout=ids), seed=0)


def test_registry_phrase_variants():
    for spec in default_registry():
        assert len(spec.phrases) >= 3
        others = [o for o in default_registry() if o.event_id != spec.event_id]
        for p in spec.phrases:
            assert not any(o.key in p for o in others)


# -- text processing --------------------------------------------------------------------

def test_build_vocab_examples():
    v = build_vocab(["a tone", "a tone rings"], min_count=1)
    assert set(v.tokens[4:]) == {"a", "tone", "rings"} and len(v) == 7
    v2 = build_vocab(["a tone", "a tone rings"], min_count=2)
    assert v2.tokens[4:] == ["a", "tone"]
    assert tokenize("rings", v2) == [v2.unk]
    assert build_vocab(["b a", "a"]).tokens == build_vocab(["b a", "a"]).tokens
    assert build_vocab(["b a", "a"]).tokens[4:] == ["a", "b"]


def test_build_vocab_empty_rejected():
    with pytest.raises(ConfigError):
        build_vocab([])


def test_tokenize_examples():
    v = build_vocab(["a tone"])
    assert tokenize("A Tone", v) == [v.index["a"], v.index["tone"]]
    assert tokenize("", v) == []
    assert tokenize("xyzzy tone", v) == [v.unk, v.index["tone"]]


def test_label_to_text():
    assert label_to_text("dog_barking") == "dog barking"
    assert label_to_text("Speech") == "Speech"
    assert label_to_text("water_tap_faucet") == "water tap faucet"


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(["a low hum then a buzzer"])
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


VOCAB = build_vocab([" ".join(spec.phrases) for spec in default_registry()])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(4, len(VOCAB) - 1), max_size=12))
def test_tokenize_detokenize_round_trip(seq):
    assert tokenize(detokenize(seq, VOCAB), VOCAB) == seq


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(alphabet="abc !,", max_size=10), min_size=1, max_size=5))
def test_vocab_is_pure(caps):
    assert build_vocab(caps).tokens == build_vocab(list(caps)).tokens
    assert all(normalize(t) == normalize(t.upper()) for t in caps)
