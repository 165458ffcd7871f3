"""Evaluation: corpus BLEU, dictionary lookup ratio, report formatting."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .decoding import DecodeTrace

MAX_ORDER = 4


class MetricsError(Exception):
    pass


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_precisions(
    hypotheses: list[list[str]],
    references: list[list[str]],
    smooth: bool = False,
) -> list[float]:
    """Corpus-level clipped n-gram precisions for n = 1..4.

    Add-one smoothing, when requested, applies to orders above 1 only
    (unigram counts are never empty on non-trivial corpora).
    Orders with no hypothesis n-grams at all report -1 (undefined).
    """
    precisions = []
    for n in range(1, MAX_ORDER + 1):
        matched, total = 0, 0
        for hyp, ref in zip(hypotheses, references):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            matched += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            total += max(len(hyp) - n + 1, 0)
        if total == 0:
            precisions.append(-1.0)
        elif smooth and n > 1:
            precisions.append((matched + 1) / (total + 1))
        else:
            precisions.append(matched / total)
    return precisions


def bleu_score(
    hypotheses: list[list[str]],
    references: list[list[str]],
    smooth: bool = False,
) -> float:
    """Corpus BLEU on a 0-100 scale: geometric mean of clipped n-gram
    precisions up to order 4 times the brevity penalty.

    Orders for which the corpus has no hypothesis n-grams are dropped
    from the geometric mean (only possible when every hypothesis is
    shorter than 4 tokens); a zero precision at any remaining order
    yields 0 unless smoothing is on.
    """
    if len(hypotheses) != len(references):
        raise MetricsError(
            f"hypothesis/reference counts differ: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise MetricsError("empty corpus")
    precisions = [p for p in ngram_precisions(hypotheses, references, smooth=smooth) if p >= 0]
    if not precisions:
        return 0.0
    if any(p == 0.0 for p in precisions):
        return 0.0
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    log_mean = sum(math.log(p) for p in precisions) / len(precisions)
    return 100.0 * bp * math.exp(log_mean)


def lookup_ratio(traces: list[DecodeTrace]) -> float:
    """Fraction of emitted target words produced by dictionary lookup."""
    if not traces:
        raise MetricsError("lookup_ratio of an empty trace set")
    total = 0
    from_dict = 0
    for trace in traces:
        for seg in trace.segments:
            total += len(seg.tokens)
            if seg.from_dictionary:
                from_dict += len(seg.tokens)
    if total == 0:
        return 0.0
    return from_dict / total


@dataclass
class EvalReport:
    """Scored translation run; missing inputs leave fields None."""

    bleu: float
    sentences: int
    src_oov_rate: float | None = None
    tgt_oov_rate: float | None = None
    lookup: float | None = None
    truncated: int | None = None

    def validate(self) -> None:
        if not 0.0 <= self.bleu <= 100.0:
            raise MetricsError(f"BLEU out of range: {self.bleu}")
        for rate in (self.src_oov_rate, self.tgt_oov_rate, self.lookup):
            if rate is not None and not 0.0 <= rate <= 1.0:
                raise MetricsError(f"rate out of range: {rate}")

    def to_lines(self) -> list[str]:
        """Stable tab-separated key/value lines for scripting."""
        self.validate()
        lines = [f"bleu\t{self.bleu:.4f}", f"sentences\t{self.sentences}"]
        if self.src_oov_rate is not None:
            lines.append(f"src_oov_rate\t{self.src_oov_rate:.6f}")
        if self.tgt_oov_rate is not None:
            lines.append(f"tgt_oov_rate\t{self.tgt_oov_rate:.6f}")
        if self.lookup is not None:
            lines.append(f"lookup_ratio\t{self.lookup:.6f}")
        if self.truncated is not None:
            lines.append(f"truncated\t{self.truncated}")
        return lines
