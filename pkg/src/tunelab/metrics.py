"""Text-generation metrics: corpus BLEU-4, ROUGE-L, and relative performance.

All scores live in [0, 1]; reporting layers multiply by 100 for display.
Token sequences are plain Python sequences of hashable tokens (strings here).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import NumericDomainError, ShapeError

MAX_ORDER = 4
SENTENCE_EPS = 1e-9
ROUGE_BETA = 1.2


@dataclass
class EvalBatch:
    """Hypotheses paired with one or more references each."""

    hypotheses: list
    references: list  # list of lists of token sequences

    def __post_init__(self):
        if len(self.hypotheses) == 0:
            raise NumericDomainError("metrics need at least one hypothesis")
        if len(self.hypotheses) != len(self.references):
            raise ShapeError(
                f"{len(self.hypotheses)} hypotheses vs {len(self.references)} reference lists"
            )
        for refs in self.references:
            if len(refs) == 0:
                raise NumericDomainError("every hypothesis needs at least one reference")


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _clipped_counts(hyp: Sequence, refs: Sequence[Sequence], n: int) -> tuple[int, int]:
    """(clipped match count, total hypothesis n-gram count) for one pair."""
    hyp_counts = _ngrams(hyp, n)
    total = sum(hyp_counts.values())
    if total == 0:
        return 0, 0
    max_ref = Counter()
    for ref in refs:
        for gram, c in _ngrams(ref, n).items():
            if c > max_ref[gram]:
                max_ref[gram] = c
    clipped = sum(min(c, max_ref[gram]) for gram, c in hyp_counts.items())
    return clipped, total


def _closest_ref_length(hyp_len: int, refs: Sequence[Sequence]) -> int:
    # tie on distance resolves to the shorter reference
    return min((len(r) for r in refs), key=lambda rl: (abs(rl - hyp_len), rl))


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    if c > r:
        return 1.0
    return math.exp(1.0 - r / c)


def bleu(batch: EvalBatch) -> float:
    """Corpus-level BLEU-4 with per-order clipping and brevity penalty.

    Precisions are pooled over the whole batch before the geometric mean;
    a zero numerator at any order sends the corpus score to exactly 0.
    """
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c = 0
    r = 0
    for hyp, refs in zip(batch.hypotheses, batch.references):
        c += len(hyp)
        r += _closest_ref_length(len(hyp), refs)
        for n in range(1, MAX_ORDER + 1):
            m, t = _clipped_counts(hyp, refs, n)
            matches[n - 1] += m
            totals[n - 1] += t
    if any(m == 0 or t == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
    return _brevity_penalty(c, r) * math.exp(log_p)


def sentence_bleu(hyp: Sequence, refs: Sequence[Sequence]) -> float:
    """Single-pair BLEU-4 with add-epsilon smoothing on every precision.

    Each order contributes (clipped + eps) / (total + eps), so short or
    partially matching hypotheses score above zero; an exact match scores 1.
    """
    if len(refs) == 0:
        raise NumericDomainError("sentence_bleu needs at least one reference")
    log_p = 0.0
    for n in range(1, MAX_ORDER + 1):
        m, t = _clipped_counts(hyp, refs, n)
        log_p += math.log((m + SENTENCE_EPS) / (t + SENTENCE_EPS))
    bp = _brevity_penalty(len(hyp), _closest_ref_length(len(hyp), refs))
    return bp * math.exp(log_p / MAX_ORDER)


def _lcs_length(a: Sequence, b: Sequence) -> int:
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _rouge_l_pair(hyp: Sequence, ref: Sequence, beta: float) -> float:
    if len(hyp) == 0 or len(ref) == 0:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    prec = lcs / len(hyp)
    rec = lcs / len(ref)
    return (1.0 + beta * beta) * prec * rec / (rec + beta * beta * prec)


def rouge_l(batch: EvalBatch, beta: float = ROUGE_BETA) -> float:
    """Mean longest-common-subsequence F-measure against the best reference."""
    total = 0.0
    for hyp, refs in zip(batch.hypotheses, batch.references):
        total += max(_rouge_l_pair(hyp, ref, beta) for ref in refs)
    return total / len(batch.hypotheses)


def relative_performance(bleu_pt: float, bleu_ft: float) -> float:
    """Ratio of a tuned model's score to the fully fine-tuned score."""
    if bleu_ft <= 0.0:
        raise NumericDomainError("relative performance needs a positive baseline score")
    return bleu_pt / bleu_ft
