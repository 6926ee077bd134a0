"""Synthesise a few toy scenes, look at their log-mel features and score some captions.

    python3 demos/01_toy_scenes_and_features.py
"""
import numpy as np

from audiotext.audiofront import AudioClip, MelConfig, logmel
from audiotext.evalsuite.captionmetrics import bleu4, corpus_cider, rouge_l
from audiotext.toygen import default_registry, mix_scene, recover_tags

registry = default_registry()
print(f"{len(registry)} event types:", ", ".join(s.event_id for s in registry))

# Three scenes with one, two and three events.
scenes = [mix_scene(registry[:k], seed=k, duration=2.0) for k in (1, 2, 3)]
mel_cfg = MelConfig(win=1024, hop=1000, n_fft=1024, mel_bins=32)
for scene in scenes:
    mel = logmel(AudioClip(scene.audio, 16000, scene.clip_id), mel_cfg)
    loudest = np.unravel_index(np.argmax(mel.frames), mel.frames.shape)
    print(f"\n{scene.clip_id}: tags {scene.tags}")
    print(f"  caption: {scene.caption}")
    print(f"  log-mel {mel.frames.shape}, range [{mel.frames.min():.1f}, {mel.frames.max():.1f}] log-power, "
          f"peak at frame {loudest[0]} bin {loudest[1]}")
    print(f"  tags read back from the caption: {sorted(recover_tags(scene.caption, registry))}")

# Caption metrics on a candidate that gets one event right and one wrong.
ref = scenes[1].caption
cand = ref.replace(registry[1].key, "dog bark")
print(f"\nreference: {ref}\ncandidate: {cand}")
print(f"BLEU-4 {bleu4(cand, [ref]):.3f}  ROUGE-L {rouge_l(cand, [ref]):.3f}")
cands = [s.caption for s in scenes]
cands[1] = cand
print(f"corpus CIDEr-D over the three scenes {corpus_cider(cands, [[s.caption] for s in scenes]):.3f}")
