"""Exact marginalization over target segmentations.

The forward recursion sums, in log space, over every way of splitting
the target into segments of bounded length: alpha(j) accumulates
alpha(j') times the probability of the segment y_{j'+1..j} given the
attention state at j'. Interior segments are scored with their
end-of-segment terminator; segments ending the sentence are scored with
the end-of-sentence terminator instead. That split is what lets the
total probability over all finite sentences reach one, since generation
stops only at the end-of-sentence symbol.

`brute_force_marginal` recomputes the same quantity by enumerating every
composition outright; it shares no code with the recursion and anchors
the correctness tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nm
from .model import ModelParams, attend, encode_source_phrases, encode_target_prefixes, segment_prefix_logprobs
from .numerics import Tensor


class LatticeError(Exception):
    """Missing table entries or instances too large to enumerate."""


@dataclass
class SegmentScoreTable:
    """Log-probabilities of all admissible segments of one target.

    `dollar[(j0, j)]` scores tokens y_{j0+1..j} followed by the segment
    terminator; `eos_final[j0]` scores the final segment y_{j0+1..T'}
    followed by the sentence terminator. Entries exist exactly for
    j - j0 <= max_seg_len.
    """

    target_len: int
    max_seg_len: int
    dollar: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    eos_final: dict[int, Tensor] = field(default_factory=dict)

    def starts_for(self, j: int) -> range:
        return range(max(0, j - self.max_seg_len), j)

    def check_complete(self) -> None:
        for j in range(1, self.target_len + 1):
            for j0 in self.starts_for(j):
                if (j0, j) not in self.dollar:
                    raise LatticeError(f"missing segment score ({j0}, {j})")
                if j == self.target_len and j0 not in self.eos_final:
                    raise LatticeError(f"missing final segment score ({j0}, {j})")

    @classmethod
    def from_arrays(
        cls,
        target_len: int,
        max_seg_len: int,
        dollar: dict[tuple[int, int], float],
        eos_final: dict[int, float],
    ) -> "SegmentScoreTable":
        table = cls(target_len, max_seg_len)
        dtype = np.float64 if nm.get_precision() == 64 else np.float32
        table.dollar = {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in dollar.items()}
        table.eos_final = {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in eos_final.items()}
        return table


@dataclass
class AlphaLattice:
    """Log-space forward values; cell j is log p(y_1..j | x)."""

    log_alpha: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.log_alpha[-1]


def build_segment_scores(
    params: ModelParams,
    src_ids: list[int],
    tgt_ids: list[int],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> SegmentScoreTable:
    """Score every admissible segment of the target in O(T' * L) decoder work.

    Start positions sharing a window length are scored in one batched
    decoder pass; `params.decoder_token_evals` counts the target tokens
    scored, which comes out to sum_j' min(L, T' - j') exactly.
    """
    if len(tgt_ids) < 1:
        raise LatticeError("cannot score an empty target")
    cfg = params.config
    t_prime = len(tgt_ids)
    table = SegmentScoreTable(target_len=t_prime, max_seg_len=cfg.l_tgt)

    span_table = encode_source_phrases(params, src_ids, train=train, rng=rng)
    prefix_states = encode_target_prefixes(params, tgt_ids, train=train, rng=rng)

    tgt = np.asarray(tgt_ids, dtype=np.int64)
    by_window: dict[int, list[int]] = {}
    for j0 in range(t_prime):
        by_window.setdefault(min(cfg.l_tgt, t_prime - j0), []).append(j0)

    for m, starts in sorted(by_window.items()):
        rows = np.asarray(starts, dtype=np.int64)
        states = nm.take(prefix_states, rows)  # (B, d)
        attn, _ = attend(params, states, span_table)
        windows = tgt[rows[:, None] + np.arange(m)[None, :]]
        cumulative, dollar, eos = segment_prefix_logprobs(params, attn, windows, train=train, rng=rng)
        for b, j0 in enumerate(starts):
            for length in range(1, m + 1):
                j = j0 + length
                table.dollar[(j0, j)] = nm.add(cumulative[b, length - 1], dollar[b, length - 1])
                if j == t_prime:
                    table.eos_final[j0] = nm.add(cumulative[b, length - 1], eos[b, length - 1])
    return table


def forward_lattice(table: SegmentScoreTable) -> AlphaLattice:
    """Run the log-space recursion over the whole table."""
    table.check_complete()
    dtype = np.float64 if nm.get_precision() == 64 else np.float32
    log_alpha: list[Tensor] = [Tensor(np.asarray(0.0, dtype=dtype))]
    for j in range(1, table.target_len + 1):
        terms = []
        for j0 in table.starts_for(j):
            score = table.eos_final[j0] if j == table.target_len else table.dollar[(j0, j)]
            terms.append(nm.reshape(nm.add(log_alpha[j0], score), (1,)))
        log_alpha.append(nm.logsumexp(nm.concat(terms, axis=0)))
    return AlphaLattice(log_alpha)


def alpha_forward(table: SegmentScoreTable) -> Tensor:
    """Log-probability of the full target under the segment marginal."""
    return forward_lattice(table).final


def compositions(total: int, max_part: int) -> Iterator[list[int]]:
    """All ordered ways to write `total` as parts in [1, max_part]."""
    if total == 0:
        yield []
        return
    for first in range(1, min(max_part, total) + 1):
        for rest in compositions(total - first, max_part):
            yield [first] + rest


def brute_force_marginal(table: SegmentScoreTable) -> float:
    """Enumerate every segmentation and sum the linear-space products.

    Guarded to small instances; this is the oracle the recursion is
    checked against, so it deliberately avoids logsumexp and the lattice.
    """
    if table.target_len > 20 or table.max_seg_len > 5:
        raise LatticeError(
            f"instance too large to enumerate: T'={table.target_len}, L={table.max_seg_len}"
        )
    table.check_complete()
    probs = []
    for parts in compositions(table.target_len, table.max_seg_len):
        j0, logp = 0, 0.0
        for n, part in enumerate(parts):
            j = j0 + part
            entry = table.eos_final[j0] if j == table.target_len else table.dollar[(j0, j)]
            logp += float(entry.data)
            j0 = j
        probs.append(math.exp(logp))
    return math.fsum(probs)


def sequence_nll(
    params: ModelParams,
    src_ids: list[int],
    tgt_ids: list[int],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Negative log-likelihood of one sentence pair, differentiable
    through the lattice into every parameter."""
    table = build_segment_scores(params, src_ids, tgt_ids, train=train, rng=rng)
    return nm.neg(alpha_forward(table))
