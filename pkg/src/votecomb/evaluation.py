"""Corpus BLEU, hypothesis matching rate, paired bootstrap and similarity reports."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Sequence

import numpy as np
import torch

from .corpus import SPECIALS, CombinationExample, make_rng

MAX_ORDER = 4


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(candidate: Sequence[str], references: Sequence[Sequence[str]], case_sensitive: bool = True) -> np.ndarray:
    """Sufficient statistics for corpus BLEU of one sentence.

    Layout: [match_1..match_4, total_1..total_4, cand_len, closest_ref_len].
    """
    if not case_sensitive:
        candidate = [t.lower() for t in candidate]
        references = [[t.lower() for t in r] for r in references]
    if not references:
        raise ValueError("need at least one reference per sentence")
    stats = np.zeros(2 * MAX_ORDER + 2)
    for n in range(1, MAX_ORDER + 1):
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            max_ref |= ngrams(ref, n)
        stats[n - 1] = sum(min(c, max_ref[g]) for g, c in cand.items())
        stats[MAX_ORDER + n - 1] = max(len(candidate) - n + 1, 0)
    c = len(candidate)
    stats[-2] = c
    stats[-1] = min((abs(len(r) - c), len(r)) for r in references)[1]
    return stats


def bleu_from_stats(stats: np.ndarray) -> float:
    """Corpus BLEU-4 (0-100) from summed sentence statistics."""
    matches, totals = stats[:MAX_ORDER], stats[MAX_ORDER : 2 * MAX_ORDER]
    c, r = stats[-2], stats[-1]
    if c == 0 or np.any(matches == 0):
        return 0.0
    log_prec = np.mean(np.log(matches / totals))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_prec)


def corpus_stats(candidates, references, case_sensitive: bool = True) -> np.ndarray:
    """Per-sentence statistics, shape [S, 10]; ``references`` is a list of reference sets."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    return np.stack([sentence_stats(c, r, case_sensitive) for c, r in zip(candidates, references)])


def bleu(candidates, references, case_sensitive: bool = True) -> float:
    return bleu_from_stats(corpus_stats(candidates, references, case_sensitive).sum(axis=0))


def matching_rate(outputs, hyp_sets, n: int) -> float:
    """Clipped n-gram precision of each output against each single hypothesis.

    Matches are averaged over the hypotheses of a sentence, summed over the
    corpus, and divided by the corpus count of output n-grams. Outputs shorter
    than ``n`` add nothing to either side.
    """
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    if len(outputs) != len(hyp_sets):
        raise ValueError("outputs and hypothesis sets differ in length")
    matched = total = 0.0
    for out, hyps in zip(outputs, hyp_sets):
        grams = ngrams(out, n)
        t = sum(grams.values())
        if t == 0:
            continue
        per_hyp = []
        for h in hyps:
            hg = ngrams(h, n)
            per_hyp.append(sum(min(c, hg[g]) for g, c in grams.items()))
        matched += float(np.mean(per_hyp))
        total += t
    return matched / total if total else 0.0


def paired_bootstrap(stats_a: np.ndarray, stats_b: np.ndarray, resamples: int = 1000, seed: int = 0) -> float:
    """Fraction of resampled test sets on which system B's BLEU is >= system A's.

    Small values mean A is significantly better than B.
    """
    stats_a, stats_b = np.asarray(stats_a), np.asarray(stats_b)
    if stats_a.shape != stats_b.shape:
        raise ValueError(f"statistic shapes differ: {stats_a.shape} vs {stats_b.shape}")
    if resamples < 100:
        raise ValueError("use at least 100 resamples")
    rng = make_rng(seed)
    s = len(stats_a)
    wins_b = 0
    for _ in range(resamples):
        idx = rng.integers(0, s, size=s)
        if bleu_from_stats(stats_b[idx].sum(axis=0)) >= bleu_from_stats(stats_a[idx].sum(axis=0)):
            wins_b += 1
    return wins_b / resamples


@torch.no_grad()
def rank_word_pairs(model, examples: Sequence[CombinationExample], vocab, min_pair_count: int = 1):
    """All unordered cross-hypothesis word pairs as (mean similarity, (a, b)), best first.

    Similarities come from the model's hypothesis encoder in eval mode and are
    averaged over every occurrence of the pair; specials are skipped.
    """
    from .model import collate, compute_similarity

    if any(ex.n_hyps < 2 for ex in examples):
        raise ValueError("similarity report needs at least two hypotheses per example")
    model.eval()
    sums: dict[tuple[str, str], float] = defaultdict(float)
    counts: dict[tuple[str, str], int] = defaultdict(int)
    for ex in examples:
        batch = collate([ex], model.cfg.vocab_size, with_target=False)
        h_hyp = model.encode_hypotheses(batch.hyps, batch.hyp_mask)
        sim = compute_similarity(h_hyp, batch.hyp_mask)[0].double().numpy()
        length = batch.hyps.shape[2]
        toks = [[vocab.tokens[t] for t in h] for h in ex.hyps]
        for m, hm in enumerate(toks):
            for n, hn in enumerate(toks):
                if m == n:
                    continue
                block = sim[m * length : m * length + len(hm), n * length : n * length + len(hn)]
                for i, a in enumerate(hm):
                    if a in SPECIALS:
                        continue
                    for j, b in enumerate(hn):
                        if b in SPECIALS:
                            continue
                        key = (a, b) if a <= b else (b, a)
                        sums[key] += block[i, j]
                        counts[key] += 1
    pairs = [(sums[k] / counts[k], k) for k in sums if counts[k] >= min_pair_count]
    pairs.sort(key=lambda x: (-x[0], x[1]))
    return pairs


def similarity_report(model, examples, vocab, top_k: int = 10, min_pair_count: int = 1):
    """Top ``top_k`` non-identical pairs as (rank among all pairs, word_a, word_b, mean)."""
    report = []
    for rank, (mean, (a, b)) in enumerate(rank_word_pairs(model, examples, vocab, min_pair_count), start=1):
        if a != b:
            report.append((rank, a, b, mean))
            if len(report) == top_k:
                break
    return report
