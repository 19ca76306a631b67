import math
from collections import Counter
from typing import List, Sequence, Tuple


def ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_statistics(
    hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_order: int = 4
) -> Tuple[List[int], List[int], int, int]:
    """Clipped n-gram matches and totals per order, plus hypothesis and reference lengths."""
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hyp_counts = ngrams(hyp, n)
            ref_counts = ngrams(ref, n)
            matches[n - 1] += sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(
    hypotheses: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
    max_order: int = 4,
    smooth: bool = False,
) -> float:
    """Corpus BLEU over token ids in [0, 100].

    Orders longer than every hypothesis are left out and the geometric mean
    runs over the remaining ones. Without smoothing any zero n-gram precision
    yields 0. ``smooth`` adds one to matches and totals of orders above 1.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not references:
        raise ValueError("BLEU needs at least one reference")
    matches, totals, hyp_len, ref_len = corpus_statistics(hypotheses, references, max_order)
    if hyp_len == 0:
        return 0.0
    orders = [n for n in range(max_order) if totals[n] > 0]
    log_precision = 0.0
    for n in orders:
        match, total = matches[n], totals[n]
        if smooth and n > 0:
            match, total = match + 1, total + 1
        if match == 0:
            return 0.0
        log_precision += math.log(match / total) / len(orders)
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)
