"""Command-line entry points.

Every subcommand reads one JSON config (``--config``; omitted means the
profile defaults), writes its artifacts under ``--out`` and prints a metric
summary.  Inputs produced by earlier steps are named in the ``paths`` section,
e.g. ``{"paths": {"caption_manifest": "runs/corpus/caption.jsonl"}}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import pipeline as pl
from .bootstrap import filter_by_tag_vocab, generate_synthetic_corpus, synthetic_captions_jsonl
from .captioner import caption_data, evaluate_ce, generate_captions, hypothesis_text, load_captioner, save_captioner
from .config import RunConfig, dump_config, load_config
from .contrastive import load_checkpoint, save_checkpoint, state_hash
from .errors import AudioTextError, ConfigError
from .evalsuite.captionmetrics import METRICS, cider, round_robin_eval
from .evalsuite.classify import ClassifierHead, evaluate_classifier, train_classifier
from .evalsuite.finetune import best_score, finetune_retrieval
from .evalsuite.report import MetricReport
from .gradsuite import format_table, run_suite
from .textproc import Vocabulary, build_vocab
from .toygen import Corpus, generate_corpus, read_manifest

log = logging.getLogger("audiotext")


class Run:
    """Resolved config, seed and output directory of one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.seed = cfg.seed
        self.out = out
        self.mel = cfg.features.mel_config()
        self.fingerprints: Dict[str, str] = {"features": self.mel.fingerprint()}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, field: str) -> str:
        value = getattr(self.cfg.paths, field)
        if not value:
            raise ConfigError(f"paths.{field} is required for '{self.command}' but is not set")
        if not Path(value).exists():
            raise ConfigError(f"paths.{field}: {value} does not exist")
        return value

    def manifest(self, field: str) -> Corpus:
        corpus = read_manifest(self.path(field), field.replace("_manifest", ""))
        self.fingerprints[field] = corpus.fingerprint()
        return corpus

    def vocab(self, caption: Optional[Corpus] = None) -> Vocabulary:
        """From ``paths.vocab``, else rebuilt from the caption manifest's training split."""
        if self.cfg.paths.vocab:
            return Vocabulary.load(self.path("vocab"))
        if caption is None:
            if not self.cfg.paths.caption_manifest:
                raise ConfigError(f"paths.vocab (or paths.caption_manifest) is required for '{self.command}'")
            caption = self.manifest("caption_manifest")
        return build_vocab([it.caption for it in caption.split("train")])

    def bundle(self, splits=("train", "val", "test"), tag_only: bool = False) -> pl.DataBundle:
        caption = self.manifest("caption_manifest")
        tags = self.manifest("tag_manifest") if tag_only else Corpus("tag_only", [])
        frames = {s: pl.corpus_frames(caption.split(s), self.mel) for s in splits}
        if tag_only:
            frames["tag_only"] = pl.corpus_frames(tags, self.mel)
        return pl.DataBundle(self.cfg, self.seed, self.mel, caption, tags, self.vocab(caption), frames)

    def finish(self, reports: List[MetricReport]) -> None:
        (self.out / "config.json").write_text(dump_config(self.cfg) + "\n")
        (self.out / "seed.txt").write_text(f"{self.seed}\n")
        (self.out / "fingerprints.json").write_text(json.dumps(self.fingerprints, indent=2, sort_keys=True) + "\n")
        for rep in reports:
            name = rep.task.replace("-", "_")
            rep.write(self.out / f"report_{name}.json")
            print(rep.summary())
        print(f"artifacts written to {self.out}")


def _dataset_id(run: Run) -> str:
    return run.fingerprints.get("caption_manifest", "")[:12]


# -- commands ----------------------------------------------------------------------------

def cmd_make_corpus(run: Run) -> None:
    caption, tags = generate_corpus(run.cfg.corpus.corpus_config(), run.seed, out_dir=run.out)
    vocab = build_vocab([it.caption for it in caption.split("train")])
    vocab.save(run.out / "vocab.txt")
    run.fingerprints.update(caption=caption.fingerprint(), tag_only=tags.fingerprint())
    counts = {f"n_{s}": len(caption.split(s)) for s in ("train", "val", "test")}
    counts.update(n_tag_only=len(tags), n_events=len(caption.tag_set() | tags.tag_set()), vocab_size=len(vocab))
    run.finish([MetricReport("make-corpus", counts, caption.fingerprint()[:12], "", run.seed)])


def cmd_train_captioner(run: Run) -> None:
    data = run.bundle()
    model, result = pl.fit_captioner(data, run.seed)
    save_captioner(model, run.out / "captioner.ckpt")
    data.vocab.save(run.out / "vocab.txt")
    metrics = {"best_epoch": result.best_epoch, **pl.caption_eval(model, data)}
    if result.val_ce:
        metrics["val_ce"] = min(result.val_ce)
    run.finish([MetricReport("train-captioner", metrics, _dataset_id(run), state_hash(model), run.seed)])


def cmd_bootstrap(run: Run) -> None:
    caption = run.manifest("caption_manifest")
    tag_only = run.manifest("tag_manifest")
    vocab = run.vocab(caption)
    model = load_captioner(run.path("captioner_checkpoint"))
    filtered, freport = filter_by_tag_vocab(tag_only, sorted(caption.tag_set()), run.cfg.bootstrap.filter_mode)
    frames = pl.corpus_frames(filtered, run.mel)
    synthetic, breport, scores = generate_synthetic_corpus(model, filtered, frames, vocab,
                                                           beam_size=run.cfg.captioner.beam_size)
    synthetic.write(run.out / "synthetic.jsonl")
    (run.out / "synthetic_captions.jsonl").write_text(synthetic_captions_jsonl(synthetic, scores))
    run.fingerprints["synthetic"] = synthetic.fingerprint()
    rate = pl.tag_recovery_rate([it.caption for it in synthetic], [it.tags for it in synthetic])
    metrics = {"kept": freport.kept, "dropped": freport.dropped, "forced": len(breport.forced),
               "tag_recovery": rate}
    run.finish([MetricReport("bootstrap", metrics, synthetic.fingerprint()[:12], state_hash(model), run.seed)])


def cmd_pretrain(run: Run) -> None:
    synthetic = run.manifest("synthetic_manifest")
    data = run.bundle()
    syn_pairs = pl.pair_data(synthetic, pl.corpus_frames(synthetic, run.mel), data.vocab)
    model, two = pl.pretrain(data, syn_pairs, run.seed)
    save_checkpoint(model, run.out / "biencoder.ckpt", stage="real")
    data.vocab.save(run.out / "vocab.txt")
    two.stage1.write_trace(run.out / "trace_stage1.csv")
    two.stage2.write_trace(run.out / "trace_stage2.csv")
    metrics = pl.evaluate_biencoder(model, data, run.seed)
    metrics.update(stage1_best_iter=two.stage1.best_iter, stage2_best_iter=two.stage2.best_iter)
    run.finish([MetricReport("pretrain", metrics, _dataset_id(run), state_hash(model), run.seed)])


def _load_biencoder(run: Run):
    model = load_checkpoint(run.path("checkpoint"))
    if model.cfg.mel_fingerprint and model.cfg.mel_fingerprint != run.mel.fingerprint():
        raise ConfigError("features: the checkpoint was trained on a different feature configuration")
    return model


def cmd_finetune_retrieval(run: Run) -> None:
    data = run.bundle()
    if run.cfg.paths.checkpoint:
        model = _load_biencoder(run)
    else:
        print("paths.checkpoint not set: fine-tuning from random initialisation")
        model = pl.make_biencoder(run.cfg, data.vocab, run.mel, run.seed)
    result = finetune_retrieval(model, data.pairs("train"), data.pairs("val"),
                                run.cfg.finetune.finetune_config(run.seed))
    save_checkpoint(model, run.out / "biencoder.ckpt", stage="finetune")
    if result.train is not None:
        result.train.write_trace(run.out / "trace_finetune.csv")
    best, first = best_score(result.trace) if result.trace else (result.report["mean_R@1"], 0)
    metrics = {"val_best_mean_R@1": best, "best_iter": first, **pl.retrieval_metrics(model, data.pairs("test"))}
    run.finish([MetricReport("finetune-retrieval", metrics, _dataset_id(run), state_hash(model), run.seed)])


def cmd_finetune_classifier(run: Run) -> None:
    model = _load_biencoder(run)
    (xtr, ytr), (xte, yte) = pl.probe_set(run.cfg, run.mel, run.seed)
    c = run.cfg.classifier
    head = ClassifierHead(model.cfg.embed_dim, int(max(ytr.max(), yte.max())) + 1, c.mode, run.seed)
    res = train_classifier(model, head, xtr, ytr, cfg=c.train_config(run.seed))
    if c.mode == "fine-tune":
        save_checkpoint(model, run.out / "biencoder.ckpt", stage="classifier")
    metrics = {"train_accuracy": res.train_metric, "test_accuracy": evaluate_classifier(model, head, xte, yte)}
    extra = {"mode": c.mode, "encoder_hash_before": res.encoder_hash_before,
             "encoder_hash_after": res.encoder_hash_after}
    run.finish([MetricReport("finetune-classifier", metrics, "", state_hash(model), run.seed, extra=extra)])


def cmd_eval_retrieval(run: Run) -> None:
    model = _load_biencoder(run)
    data = run.bundle(splits=("test",))
    metrics = pl.retrieval_metrics(model, data.pairs("test"))
    run.finish([MetricReport("eval-retrieval", metrics, _dataset_id(run), state_hash(model), run.seed)])


def cmd_eval_zero_shot(run: Run) -> None:
    model = _load_biencoder(run)
    vocab = run.vocab()
    acc = pl.zero_shot_accuracy(model, run.cfg, run.mel, vocab, run.seed)
    n = len(pl.visible_events(run.cfg))
    metrics = {"accuracy": acc, "chance_accuracy": 1.0 / n, "n_labels": n}
    run.finish([MetricReport("eval-zero-shot", metrics, "", state_hash(model), run.seed)])


def _read_references(path: str):
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ConfigError(f"paths.references: {path} holds no items")
    return rows


def cmd_eval_caption(run: Run) -> None:
    """Score candidates against references, or run round-robin when no candidates are given.

    Without ``paths.references`` the captioner named by ``paths.captioner_checkpoint``
    captions the test split and is scored against its reference captions.
    """
    extra: Dict[str, object] = {}
    if run.cfg.paths.references:
        rows = _read_references(run.path("references"))
        refs = [r["references"] for r in rows]
        if all("candidate" in r for r in rows):
            cands = [r["candidate"] for r in rows]
        else:
            metrics = {name: round_robin_eval(refs, name) for name in METRICS}
            extra["mode"] = "round-robin"
            run.finish([MetricReport("eval-caption", metrics, "", "", run.seed, extra=extra)])
            return
        ckpt = ""
    else:
        model = load_captioner(run.path("captioner_checkpoint"))
        data = run.bundle(splits=("test",))
        cd = caption_data(data.caption.split("test"), data.vocab, data.frames["test"])
        hyps = generate_captions(model, cd.frames, cd.tags, beam_size=run.cfg.captioner.beam_size)
        cands = [hypothesis_text(h, data.vocab) for h in hyps]
        refs = [[it.caption] for it in data.caption.split("test")]
        extra.update(ce=evaluate_ce(model, cd), tag_recovery=pl.tag_recovery_rate(cands, cd.tags))
        with open(run.out / "captions.jsonl", "w") as fh:
            for cid, c, r in zip(cd.ids, cands, refs):
                fh.write(json.dumps({"clip_id": cid, "candidate": c, "references": r}) + "\n")
        ckpt = state_hash(model)
    metrics = {name: fn(cands, refs) for name, fn in METRICS.items() if name != "cider"}
    metrics["cider"] = cider(cands, refs)[0] if len(cands) >= 2 else float("nan")
    metrics = {k: v for k, v in metrics.items() if np.isfinite(v)}
    run.finish([MetricReport("eval-caption", metrics, _dataset_id(run), ckpt, run.seed, extra=extra)])


def cmd_gradcheck(run: Run) -> int:
    rows, seconds = run_suite(run.seed)
    print(format_table(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed in {seconds:.1f}s")
    worst = max(r.max_relative_error for r in rows)
    run.finish([MetricReport("gradcheck", {"checks": len(rows), "failed": len(failed), "max_relative_error": worst},
                             "", "", run.seed)])
    return 1 if failed else 0


COMMANDS: Dict[str, Callable[[Run], Optional[int]]] = {
    "make-corpus": cmd_make_corpus,
    "train-captioner": cmd_train_captioner,
    "bootstrap": cmd_bootstrap,
    "pretrain": cmd_pretrain,
    "finetune-retrieval": cmd_finetune_retrieval,
    "finetune-classifier": cmd_finetune_classifier,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-zero-shot": cmd_eval_zero_shot,
    "eval-caption": cmd_eval_caption,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audiotext", description="Audio-text pre-training toolkit on toy audio.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", help="JSON config file (default: profile defaults)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="run directory (default: runs/<command>-seed<seed>)")
        p.add_argument("--profile", choices=("paper", "desk"), help="built-in defaults to start from")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.profile, args.seed)
        out = Path(args.out or f"runs/{args.command}-seed{cfg.seed}")
        code = COMMANDS[args.command](Run(args.command, cfg, out))
    except ConfigError as exc:
        print(f"audiotext {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AudioTextError, OSError) as exc:
        print(f"audiotext {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
