"""Synthetic phrase-mapping corpora for smoke tests and benchmarks.

Each rule deterministically rewrites a source bigram to a target unigram
or a source unigram to a target bigram, and every source token belongs
to exactly one rule, so each source sentence has a unique parse and a
unique correct translation. Sentences concatenate a few independently
drawn rules.

With `tiered=True` the rules get a three-tier frequency skew (common,
mid, rare), which makes vocabulary thresholds mask predictable slices of
the type inventory; the rare tier's tokens fall below small thresholds
first, mirroring an open-vocabulary setup where a phrase dictionary can
recover the masked mappings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ParallelCorpus, PhraseDictionary

# Tier layout: (bigram rules, unigram rules, sampling weight).
TIERS = (
    ("common", 14, 12, 20.0),
    ("mid", 6, 4, 4.0),
    ("rare", 10, 4, 1.0),
)


@dataclass
class PhraseRule:
    source: tuple[str, ...]
    target: tuple[str, ...]
    weight: float
    tier: str


@dataclass
class ToyTask:
    train_pairs: list[tuple[list[str], list[str]]]
    test_pairs: list[tuple[list[str], list[str]]]
    rules: list[PhraseRule]

    def train_corpus(self) -> ParallelCorpus:
        return ParallelCorpus.from_token_pairs(self.train_pairs)

    def test_corpus(self) -> ParallelCorpus:
        return ParallelCorpus.from_token_pairs(self.test_pairs)


def make_rules(tiered: bool = False) -> list[PhraseRule]:
    rules: list[PhraseRule] = []
    bi, uni = 0, 0
    for tier, n_bigram, n_unigram, weight in TIERS:
        w = weight if tiered else 1.0
        for _ in range(n_bigram):
            rules.append(
                PhraseRule((f"s{bi}a", f"s{bi}b"), (f"X{bi}",), w, tier)
            )
            bi += 1
        for _ in range(n_unigram):
            rules.append(
                PhraseRule((f"u{uni}",), (f"y{uni}a", f"y{uni}b"), w, tier)
            )
            uni += 1
    return rules


def sample_pairs(
    rules: list[PhraseRule],
    n: int,
    rng: np.random.Generator,
    min_rules: int = 2,
    max_rules: int = 4,
) -> list[tuple[list[str], list[str]]]:
    weights = np.array([r.weight for r in rules])
    weights = weights / weights.sum()
    pairs = []
    for _ in range(n):
        k = int(rng.integers(min_rules, max_rules + 1))
        chosen = rng.choice(len(rules), size=k, p=weights)
        src: list[str] = []
        tgt: list[str] = []
        for idx in chosen:
            src.extend(rules[idx].source)
            tgt.extend(rules[idx].target)
        pairs.append((src, tgt))
    return pairs


def phrase_mapping_task(
    n_train: int = 2000,
    n_test: int = 200,
    seed: int = 13,
    tiered: bool = False,
) -> ToyTask:
    rules = make_rules(tiered=tiered)
    rng = np.random.default_rng(seed)
    train_pairs = sample_pairs(rules, n_train, rng)
    test_pairs = sample_pairs(rules, n_test, rng)
    return ToyTask(train_pairs, test_pairs, rules)


def rules_dictionary(rules: list[PhraseRule]) -> PhraseDictionary:
    """Dictionary of every rule; only masked spans ever consult it."""
    d = PhraseDictionary()
    for rule in rules:
        d.add(rule.source, rule.target)
    return d


def exact_match(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    if not references:
        return 0.0
    hits = sum(1 for h, r in zip(hypotheses, references) if h == r)
    return hits / len(references)
