"""BLEU-4, ROUGE-L and CIDEr-D following the COCO caption evaluation conventions.

Candidates and references may be strings (normalised with the package
tokenizer) or token lists.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from ..errors import DataError, StatisticsError
from ..textproc import normalize

Text = Union[str, Sequence[str]]


def _toks(x: Text) -> List[str]:
    return normalize(x) if isinstance(x, str) else [str(w) for w in x]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU --------------------------------------------------------------------------------

def _bleu_stats(cand: List[str], refs: List[List[str]]) -> Tuple[List[int], List[int], int, int]:
    clipped, total = [], []
    for n in range(1, 5):
        c = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        clipped.append(sum(min(k, max_ref[g]) for g, k in c.items()))
        total.append(max(len(cand) - n + 1, 0))
    # closest reference length, shorter one on ties
    r_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    return clipped, total, len(cand), r_len


def _bleu_from_stats(clipped, total, c_len, r_len) -> float:
    if c_len == 0 or any(k == 0 for k in clipped):
        return 0.0
    log_p = sum(math.log(k / t) for k, t in zip(clipped, total)) / 4.0
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(log_p))


def bleu4(candidate: Text, references: Sequence[Text]) -> float:
    """Sentence BLEU-4: clipped 1-4-gram precisions, closest-length brevity penalty.

    Any zero clipped count makes the score exactly 0.
    """
    if not references:
        raise DataError("bleu4 needs at least one reference")
    cand = _toks(candidate)
    if not cand:
        warnings.warn("empty candidate scores 0", stacklevel=2)
        return 0.0
    return _bleu_from_stats(*_bleu_stats(cand, [_toks(r) for r in references]))


def corpus_bleu4(candidates: Sequence[Text], references: Sequence[Sequence[Text]]) -> float:
    """Corpus BLEU-4 from summed n-gram counts and lengths (COCO style)."""
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} reference lists")
    clipped, total, c_len, r_len = [0] * 4, [0] * 4, 0, 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise DataError("bleu4 needs at least one reference per item")
        k, t, c, r = _bleu_stats(_toks(cand), [_toks(x) for x in refs])
        clipped = [a + b for a, b in zip(clipped, k)]
        total = [a + b for a, b in zip(total, t)]
        c_len += c
        r_len += r
    return _bleu_from_stats(clipped, total, c_len, r_len)


# -- ROUGE-L -----------------------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Text, references: Sequence[Text], beta: float = 1.2) -> float:
    """LCS F-measure; precision and recall are each maximised over references (COCO)."""
    if not references:
        raise DataError("rouge_l needs at least one reference")
    cand = _toks(candidate)
    if not cand:
        warnings.warn("empty candidate scores 0", stacklevel=2)
        return 0.0
    precs, recs = [], []
    for ref in references:
        r = _toks(ref)
        lcs = lcs_length(cand, r)
        precs.append(lcs / len(cand))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def corpus_rouge_l(candidates: Sequence[Text], references: Sequence[Sequence[Text]]) -> float:
    return float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))


# -- CIDEr-D -----------------------------------------------------------------------------

def _tfidf(counts: Counter, df: Dict[tuple, float], log_n: float):
    vec = {g: tf * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, tf in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider(candidates: Sequence[Text], references: Sequence[Sequence[Text]],
          sigma: float = 6.0) -> Tuple[float, List[float]]:
    """CIDEr-D over a corpus.  Returns (mean score, per-item scores).

    Document frequencies come from the references, one document per item.
    Per n-gram order: clipped TF-IDF cosine ``sum min(h, r) * r / (|h| |r|)``
    times ``exp(-(len_h - len_r)^2 / (2 sigma^2))`` (lengths in words),
    averaged over n = 1..4 and over references, scaled by 10.
    """
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} reference lists")
    if len(candidates) < 2:
        raise StatisticsError("CIDEr needs a corpus of at least 2 items for document frequencies")
    cands = [_toks(c) for c in candidates]
    refs = [[_toks(r) for r in rs] for rs in references]
    df: Dict[tuple, float] = Counter()
    for rs in refs:
        seen = set()
        for r in rs:
            for n in range(1, 5):
                seen.update(ngrams(r, n))
        for g in seen:
            df[g] += 1
    log_n = math.log(float(len(refs)))
    scores = []
    for cand, rs in zip(cands, refs):
        if not rs:
            raise DataError("cider needs at least one reference per item")
        hyp_vecs = [_tfidf(ngrams(cand, n), df, log_n) for n in range(1, 5)]
        total = 0.0
        for r in rs:
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma ** 2))
            acc = 0.0
            for n in range(1, 5):
                (hv, hn), (rv, rn) = hyp_vecs[n - 1], _tfidf(ngrams(r, n), df, log_n)
                if hn == 0 or rn == 0:
                    continue
                dot = sum(min(v, rv[g]) * rv[g] for g, v in hv.items() if g in rv)
                acc += dot / (hn * rn) * penalty
            total += acc / 4.0
        scores.append(10.0 * total / len(rs))
    return float(np.mean(scores)), scores


def corpus_cider(candidates, references) -> float:
    return cider(candidates, references)[0]


# -- round robin -------------------------------------------------------------------------

CorpusMetric = Callable[[Sequence[Text], Sequence[Sequence[Text]]], float]

METRICS: Dict[str, CorpusMetric] = {"bleu4": corpus_bleu4, "rouge_l": corpus_rouge_l, "cider": corpus_cider}


def round_robin_eval(references: Sequence[Sequence[Text]], metric: Union[str, CorpusMetric]) -> float:
    """Each reference in turn is the candidate against the remaining ones; rounds are averaged."""
    fn = METRICS[metric] if isinstance(metric, str) else metric
    counts = {len(rs) for rs in references}
    if len(counts) != 1:
        raise DataError(f"items have differing reference counts {sorted(counts)}")
    R = counts.pop()
    if R < 2:
        raise DataError("round-robin evaluation needs at least 2 references per item")
    rounds = []
    for r in range(R):
        cands = [rs[r] for rs in references]
        rest = [list(rs[:r]) + list(rs[r + 1:]) for rs in references]
        rounds.append(fn(cands, rest))
    return float(np.mean(rounds))
