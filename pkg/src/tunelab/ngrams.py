"""Bigram statistics of a pretraining corpus and the familiarity score.

Familiarity of an input set is the mean over sequences of the mean over
adjacent positions of log(count + 1), where counts come from a bigram
table built once from the pretraining corpus. The +1 keeps fully unseen
inputs at exactly zero and every contribution finite.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

from .corpus import N_RESERVED, Corpus, Vocab
from .errors import NumericDomainError


@dataclass
class BigramTable:
    counts: dict = field(default_factory=dict)  # (id, id) -> count
    total: int = 0

    def count(self, a: int, b: int) -> int:
        return self.counts.get((a, b), 0)


def build_bigram_table(corpus: Corpus) -> BigramTable:
    """Count adjacent token pairs over every x and y; reserved ids excluded."""
    if len(corpus) == 0:
        raise NumericDomainError("cannot build a bigram table from an empty corpus")
    counts: dict = {}
    for x, y in corpus.pairs:
        for seq in (x, y):
            for a, b in zip(seq, seq[1:]):
                if a < N_RESERVED or b < N_RESERVED:
                    continue
                key = (a, b)
                counts[key] = counts.get(key, 0) + 1
    return BigramTable(counts, sum(counts.values()))


def familiarity(inputs, table: BigramTable) -> float:
    """Mean over sequences of mean position-wise log(bigram count + 1)."""
    if len(inputs) == 0:
        raise NumericDomainError("familiarity needs at least one input sequence")
    scores = []
    skipped = 0
    for seq in inputs:
        if len(seq) < 2:
            skipped += 1
            continue
        contribs = [math.log(table.count(a, b) + 1) for a, b in zip(seq, seq[1:])]
        scores.append(sum(contribs) / len(contribs))
    if skipped:
        warnings.warn(f"familiarity skipped {skipped} sequence(s) shorter than 2 tokens")
    if not scores:
        raise NumericDomainError("no input sequence had at least 2 tokens")
    return sum(scores) / len(scores)


def corpus_familiarity(corpus: Corpus, table: BigramTable) -> float:
    """Familiarity of a task corpus's input side."""
    return familiarity([x for x, _ in corpus.pairs], table)


# ---------------------------------------------------------------------------
# file format: one "tokA tokB count" triple per line


def save_bigram_table(table: BigramTable, vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (a, b) in sorted(table.counts):
            f.write(f"{vocab.token_of(a)} {vocab.token_of(b)} {table.counts[(a, b)]}\n")


def load_bigram_table(path, vocab: Vocab) -> BigramTable:
    counts: dict = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            ta, tb, c = line.split()
            counts[(vocab.id_of(ta), vocab.id_of(tb))] = int(c)
    return BigramTable(counts, sum(counts.values()))
