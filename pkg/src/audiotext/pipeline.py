"""End-to-end orchestration: corpus -> captioner -> bootstrap -> pre-training -> evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .audiofront import MelConfig, stack_logmel
from .bootstrap import filter_by_tag_vocab, generate_synthetic_corpus, synthetic_captions_jsonl
from .captioner import (CaptionData, CaptionModel, caption_data, evaluate_ce, generate_captions,
                        hypothesis_text, train_captioner)
from .config import RunConfig, dump_config
from .contrastive import PairData, TwoStageResult, pretrain_two_stage, save_checkpoint, state_hash
from .encoders import BiEncoder, BiEncoderConfig
from .evalsuite.classify import (ClassifierHead, cosine_scores, evaluate_classifier, train_classifier,
                                 zero_shot_classify)
from .evalsuite.finetune import best_score, finetune_retrieval, iterations_to_reach
from .evalsuite.report import MetricReport
from .evalsuite.retrieval import accuracy, retrieval_report
from .textproc import Vocabulary, build_vocab, tokenize
from .toygen import Corpus, default_registry, event_classification_set, generate_corpus, recover_tags

log = logging.getLogger(__name__)


@dataclass
class DataBundle:
    cfg: RunConfig
    seed: int
    mel: MelConfig
    caption: Corpus
    tag_only: Corpus
    vocab: Vocabulary
    frames: Dict[str, np.ndarray]     # "train", "val", "test", "tag_only"

    @property
    def caption_tags(self) -> List[str]:
        return sorted(self.caption.tag_set())

    def captions(self, split: str) -> CaptionData:
        return caption_data(self.caption.split(split), self.vocab, self.frames[split])

    def pairs(self, split: str) -> PairData:
        return pair_data(self.caption.split(split), self.frames[split], self.vocab)


def corpus_frames(corpus: Corpus, mel: MelConfig) -> np.ndarray:
    return stack_logmel([corpus.audio(it) for it in corpus], mel)


def pair_data(corpus: Corpus, frames: np.ndarray, vocab: Vocabulary) -> PairData:
    return PairData(frames, [tokenize(it.caption, vocab) for it in corpus], [it.clip_id for it in corpus])


def prepare_data(cfg: RunConfig, seed: int, caption: Optional[Corpus] = None,
                 tag_only: Optional[Corpus] = None) -> DataBundle:
    mel = cfg.features.mel_config()
    if caption is None or tag_only is None:
        caption, tag_only = generate_corpus(cfg.corpus.corpus_config(), seed)
    frames = {s: corpus_frames(caption.split(s), mel) for s in ("train", "val", "test")}
    frames["tag_only"] = corpus_frames(tag_only, mel)
    vocab = build_vocab([it.caption for it in caption.split("train")])
    return DataBundle(cfg, seed, mel, caption, tag_only, vocab, frames)


# -- captioner ---------------------------------------------------------------------------

def fit_captioner(data: DataBundle, seed: int, use_tags: bool = True):
    cc = data.cfg.captioner
    model = CaptionModel(cc.model_config_for(data.mel.mel_bins, use_tags), len(data.vocab),
                         data.caption_tags, seed=seed)
    result = train_captioner(model, data.captions("train"), data.captions("val"), cc.train_config(seed))
    return model, result


def tag_recovery_rate(captions: List[str], tag_sets, registry=None) -> float:
    """Fraction of captions that name every tagged event."""
    registry = registry or default_registry()
    hits = [set(tags) <= recover_tags(c, registry) for c, tags in zip(captions, tag_sets)]
    return float(np.mean(hits)) if hits else 0.0


def caption_eval(model: CaptionModel, data: DataBundle, split: str = "test") -> Dict[str, float]:
    cd = data.captions(split)
    hyps = generate_captions(model, cd.frames, cd.tags, beam_size=data.cfg.captioner.beam_size)
    texts = [hypothesis_text(h, data.vocab) for h in hyps]
    return {"ce": evaluate_ce(model, cd), "tag_recovery": tag_recovery_rate(texts, cd.tags)}


# -- bootstrap ---------------------------------------------------------------------------

@dataclass
class BootstrapOutput:
    filtered: Corpus
    synthetic: Corpus
    pairs: PairData
    kept: int
    dropped: int
    forced: List[str]
    scores: Dict[str, float]


def run_bootstrap(captioner: CaptionModel, data: DataBundle) -> BootstrapOutput:
    filtered, freport = filter_by_tag_vocab(data.tag_only, data.caption_tags, data.cfg.bootstrap.filter_mode)
    index = {it.clip_id: i for i, it in enumerate(data.tag_only)}
    rows = [index[it.clip_id] for it in filtered]
    frames = data.frames["tag_only"][rows]
    synthetic, breport, scores = generate_synthetic_corpus(captioner, filtered, frames, data.vocab,
                                                           beam_size=data.cfg.captioner.beam_size)
    syn_rows = [index[it.clip_id] for it in synthetic]
    pairs = pair_data(synthetic, data.frames["tag_only"][syn_rows], data.vocab)
    return BootstrapOutput(filtered, synthetic, pairs, freport.kept, freport.dropped, breport.forced, scores)


# -- bi-encoder --------------------------------------------------------------------------

def make_biencoder(cfg: RunConfig, vocab: Vocabulary, mel: MelConfig, seed: int) -> BiEncoder:
    e = cfg.encoder
    bcfg = BiEncoderConfig(mel.mel_bins, tuple(e.conv_channels), e.embed_dim, len(vocab), e.text_width,
                           e.text_layers, e.text_heads, e.text_ff, e.max_tokens, e.init_temperature,
                           mel.fingerprint())
    return BiEncoder(bcfg, seed)


def pretrain(data: DataBundle, synthetic: PairData, seed: int):
    model = make_biencoder(data.cfg, data.vocab, data.mel, seed)
    p = data.cfg.pretrain
    result = pretrain_two_stage(model, synthetic, data.pairs("train"), data.pairs("val"),
                                p.stage1.train_config(seed), p.stage2.train_config(seed + 1),
                                synthetic_val_size=p.stage1.val_size, seed=seed)
    return model, result


def visible_events(cfg: RunConfig):
    return [s for s in default_registry() if s.event_id not in cfg.corpus.tag_holdout]


def zero_shot_set(cfg: RunConfig, mel: MelConfig, seed: int):
    """Single-event clips of every caption-corpus event; labels are event ids."""
    events = visible_events(cfg)
    corpus, labels = event_classification_set(events, cfg.corpus.n_zero_shot_per_class, seed + 50_000,
                                              cfg.corpus.clip_seconds)
    return corpus_frames(corpus, mel), labels, [s.event_id for s in events]


def probe_set(cfg: RunConfig, mel: MelConfig, seed: int):
    """Single-event clips of every registry event, split half/half into train and test."""
    events = default_registry()
    per = cfg.corpus.n_probe_per_class
    corpus, labels = event_classification_set(events, per, seed + 60_000, cfg.corpus.clip_seconds)
    frames = corpus_frames(corpus, mel)
    is_train = (np.arange(len(labels)) % per) < per // 2
    return (frames[is_train], labels[is_train]), (frames[~is_train], labels[~is_train])


def zero_shot_accuracy(model: BiEncoder, cfg: RunConfig, mel: MelConfig, vocab: Vocabulary, seed: int) -> float:
    frames, labels, names = zero_shot_set(cfg, mel, seed)
    return accuracy(zero_shot_classify(model, frames, names, vocab).scores, labels)


def retrieval_metrics(model: BiEncoder, pairs: PairData) -> Dict[str, float]:
    return retrieval_report(cosine_scores(model.embed_audio(pairs.frames), model.embed_text(pairs.tokens)))


def evaluate_biencoder(model: BiEncoder, data: DataBundle, seed: int) -> Dict[str, float]:
    metrics = retrieval_metrics(model, data.pairs("test"))
    metrics["zero_shot_accuracy"] = zero_shot_accuracy(model, data.cfg, data.mel, data.vocab, seed)
    return metrics


def linear_probe(model: BiEncoder, data: DataBundle, seed: int, probe=None) -> Dict[str, object]:
    (xtr, ytr), (xte, yte) = probe or probe_set(data.cfg, data.mel, seed)
    head = ClassifierHead(model.cfg.embed_dim, int(max(ytr.max(), yte.max())) + 1, seed=seed)
    res = train_classifier(model, head, xtr, ytr, cfg=data.cfg.classifier.train_config(seed))
    return {"accuracy": evaluate_classifier(model, head, xte, yte), "train_accuracy": res.train_metric,
            "hash_before": res.encoder_hash_before, "hash_after": res.encoder_hash_after}


def retrieval_transfer(data: DataBundle, pretrained: BiEncoder, seed: int) -> Dict[str, object]:
    """Fine-tune from the pre-trained weights and from scratch; compare iterations to the scratch best."""
    fcfg = data.cfg.finetune.finetune_config(seed)
    train, val = data.pairs("train"), data.pairs("val")
    scratch = make_biencoder(data.cfg, data.vocab, data.mel, seed + 7)
    s_res = finetune_retrieval(scratch, train, val, fcfg)
    target, scratch_iters = best_score(s_res.trace)
    tuned = make_biencoder(data.cfg, data.vocab, data.mel, seed)
    tuned.load_state_dict(pretrained.state_dict())
    f_res = finetune_retrieval(tuned, train, val, fcfg)
    fine_iters = iterations_to_reach(f_res.trace, target)
    return {"scratch_best_R@1": target, "scratch_iters": scratch_iters, "finetune_iters": fine_iters,
            "finetune_best_R@1": best_score(f_res.trace)[0],
            "scratch_trace": s_res.trace, "finetune_trace": f_res.trace}


# -- full run ----------------------------------------------------------------------------

@dataclass
class PipelineResult:
    seed: int
    data: DataBundle
    captioner: CaptionModel
    bootstrap: BootstrapOutput
    model: BiEncoder
    pretrain: TwoStageResult
    reports: Dict[str, MetricReport] = field(default_factory=dict)
    checkpoint_hash: str = ""
    timings: Dict[str, float] = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, seed: Optional[int] = None, out_dir=None) -> PipelineResult:
    """Corpus, tag-guided captioner, bootstrap, two-stage pre-training, test evaluation."""
    seed = cfg.seed if seed is None else seed
    timings, t0 = {}, time.perf_counter()

    def lap(name):
        nonlocal t0
        now = time.perf_counter()
        timings[name] = now - t0
        t0 = now
        log.info("seed %d: %s done in %.1fs", seed, name, timings[name])

    data = prepare_data(cfg, seed)
    lap("data")
    captioner, _ = fit_captioner(data, seed)
    lap("captioner")
    boot = run_bootstrap(captioner, data)
    lap("bootstrap")
    model, two = pretrain(data, boot.pairs, seed)
    lap("pretrain")
    metrics = evaluate_biencoder(model, data, seed)
    lap("evaluate")
    ckpt_id = state_hash(model)
    dataset_id = data.caption.fingerprint()[:12]
    reports = {
        "retrieval": MetricReport("eval-retrieval", {k: v for k, v in metrics.items() if "R@" in k},
                                  dataset_id, ckpt_id, seed),
        "zero_shot": MetricReport("eval-zero-shot", {"accuracy": metrics["zero_shot_accuracy"]},
                                  dataset_id, ckpt_id, seed),
        "bootstrap": MetricReport("bootstrap", {"kept": boot.kept, "dropped": boot.dropped,
                                                "forced": len(boot.forced)}, dataset_id, "", seed),
    }
    result = PipelineResult(seed, data, captioner, boot, model, two, reports, ckpt_id, timings)
    if out_dir is not None:
        write_run_dir(result, Path(out_dir))
    return result


def write_run_dir(result: PipelineResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    data = result.data
    (out / "config.json").write_text(dump_config(data.cfg) + "\n")
    (out / "seed.txt").write_text(f"{result.seed}\n")
    fingerprints = {"caption": data.caption.fingerprint(), "tag_only": data.tag_only.fingerprint(),
                    "synthetic": result.bootstrap.synthetic.fingerprint(), "features": data.mel.fingerprint()}
    (out / "fingerprints.json").write_text(json.dumps(fingerprints, indent=2, sort_keys=True) + "\n")
    data.vocab.save(out / "vocab.txt")
    result.bootstrap.synthetic.write(out / "synthetic.jsonl")
    (out / "synthetic_captions.jsonl").write_text(
        synthetic_captions_jsonl(result.bootstrap.synthetic, result.bootstrap.scores))
    save_checkpoint(result.model, out / "biencoder.ckpt", stage="real")
    result.pretrain.stage1.write_trace(out / "trace_stage1.csv")
    result.pretrain.stage2.write_trace(out / "trace_stage2.csv")
    for name, rep in result.reports.items():
        rep.write(out / f"report_{name}.json")


def file_sha1(path) -> str:
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()
