"""Word error rate and sentence-level accuracy."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Iterable, Sequence

from ..errors import EmptyBatch, EmptyReference


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, split on whitespace, strip surrounding punctuation, drop empties."""
    words = (w.strip(string.punctuation) for w in text.lower().split())
    return tuple(w for w in words if w)


@dataclass(frozen=True)
class TranscriptPair:
    reference: tuple[str, ...]
    hypothesis: tuple[str, ...]

    @classmethod
    def from_text(cls, reference: str, hypothesis: str) -> "TranscriptPair":
        return cls(tokenize(reference), tokenize(hypothesis))

    @property
    def exact(self) -> bool:
        return self.reference == self.hypothesis


@dataclass(frozen=True)
class Alignment:
    substitutions: int
    insertions: int
    deletions: int
    n_ref: int
    ops: tuple[str, ...]  # "=", "S", "I", "D" in reading order

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def align(reference: Sequence[str], hypothesis: Sequence[str]) -> Alignment:
    """Unit-cost Levenshtein alignment; ties prefer substitution, then insertion, then deletion."""
    n, m = len(reference), len(hypothesis)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        cost[i][0] = i
    for j in range(m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1])
            cost[i][j] = min(diag, cost[i][j - 1] + 1, cost[i - 1][j] + 1)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and cost[i][j] == cost[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            ops.append("=" if reference[i - 1] == hypothesis[j - 1] else "S")
            i, j = i - 1, j - 1
        elif j and cost[i][j] == cost[i][j - 1] + 1:
            ops.append("I")
            j -= 1
        else:
            ops.append("D")
            i -= 1
    ops.reverse()
    return Alignment(ops.count("S"), ops.count("I"), ops.count("D"), n, tuple(ops))


def wer(pair: TranscriptPair) -> float:
    """100 * (S + I + D) / N; may exceed 100."""
    if not pair.reference:
        raise EmptyReference("WER is undefined for an empty reference")
    a = align(pair.reference, pair.hypothesis)
    return 100.0 * a.errors / a.n_ref


def corpus_wer(pairs: Iterable[TranscriptPair]) -> float:
    """Total edits over total reference words."""
    errors = words = 0
    for p in pairs:
        if not p.reference:
            raise EmptyReference("WER is undefined for an empty reference")
        a = align(p.reference, p.hypothesis)
        errors += a.errors
        words += a.n_ref
    if words == 0:
        raise EmptyBatch("no transcript pairs")
    return 100.0 * errors / words


def sla(pairs: Sequence[TranscriptPair]) -> float:
    """Percentage of exactly matching transcripts."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyBatch("SLA needs at least one pair")
    return 100.0 * sum(p.exact for p in pairs) / len(pairs)
