"""The whole recipe on toy data: captioner, bootstrap, two-stage pre-training, evaluation.

By default a shrunken corpus keeps this to a couple of minutes; ``--full`` runs the desk
profile used by the acceptance suite (about five minutes per seed on one core).

    python3 demos/03_desk_pipeline.py [--full] [--seed 0]
"""
import argparse
import logging

from audiotext import pipeline as pl
from audiotext.config import build_config

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", help="also write the run directory here")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

small = {
    "corpus": {"n_train": 160, "n_val": 40, "n_test": 40, "n_tag_only": 400},
    "captioner": {"epochs": 8},
    "pretrain": {"stage1": {"total_iters": 200, "warmup_iters": 20, "val_size": 40},
                 "stage2": {"total_iters": 100, "warmup_iters": 10}},
}
cfg = build_config({} if args.full else small)
res = pl.run_pipeline(cfg, args.seed, out_dir=args.out)

boot = res.bootstrap
print(f"\nbootstrap: kept {boot.kept} tag-only clips, dropped {boot.dropped}")
for it in boot.synthetic.items[:3]:
    print(f"  {it.clip_id} {list(it.tags)} -> {it.caption!r}")

for stage in ("stage1", "stage2"):
    tr = getattr(res.pretrain, stage)
    print(f"{stage}: best mean R@1 {tr.best['mean_R@1']:.3f} at iteration {tr.best_iter}")

print()
for rep in res.reports.values():
    print(rep.summary())
print("\ntimings:", {k: round(v, 1) for k, v in res.timings.items()})
