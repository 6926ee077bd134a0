"""Greedy decoding versus beam search on a hand-written next-token table.

Greedy commits to the likelier first word and ends at p = 0.6 * 0.5 = 0.30; a beam of two keeps
the runner-up alive and finds p = 0.4 * 0.9 = 0.36.

    python3 demos/02_beam_search.py
"""
import math

import numpy as np

from audiotext.captioner import beam_search, greedy_decode

WORDS = ["<eos>", "dog", "rain"]
BOS = len(WORDS)
TABLE = {(): [0.0, 0.6, 0.4], (1,): [0.5, 0.25, 0.25], (2,): [0.9, 0.05, 0.05]}


def step(prefixes):
    with np.errstate(divide="ignore"):
        return np.log(np.array([TABLE.get(tuple(p[1:]), [1 / 3] * 3) for p in prefixes]))


def show(name, hyp):
    print(f"{name:>8}: {' '.join(WORDS[t] for t in hyp.tokens):<12} p = {math.exp(hyp.score):.2f}")


show("greedy", greedy_decode(step, max_len=3, bos=BOS, eos=0))
for width in (1, 2, 3):
    show(f"beam {width}", beam_search(step, width, max_len=3, bos=BOS, eos=0))
