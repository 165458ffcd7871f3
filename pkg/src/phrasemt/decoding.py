"""Inference: greedy, dictionary-augmented greedy, and word-level beam search.

All decoders share one constrained next-symbol distribution so that
beam size 1 reproduces greedy exactly. The dictionary branch fires only
when the argmax-attended span contains a masked word and its raw surface
is a dictionary key; everything else falls through to neural generation,
so an empty dictionary decodes identically to plain greedy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import BOS_ID, DOLLAR_ID, EOS_ID, PAD_ID, UNK_ID, PhraseDictionary, Vocabulary
from .model import (
    ModelParams,
    attention_state,
    encode_source_phrases,
    encode_target_prefixes,
    next_symbol_logprobs,
)
from .numerics import Tensor


class DecodeError(Exception):
    pass


@dataclass
class TraceSegment:
    span: tuple[int, int]  # attended source span, 0-based inclusive
    weight: float
    from_dictionary: bool
    tokens: list[str]


@dataclass
class DecodeTrace:
    segments: list[TraceSegment] = field(default_factory=list)
    truncated: bool = False

    def output_tokens(self) -> list[str]:
        return [tok for seg in self.segments for tok in seg.tokens]


@dataclass
class DecodeResult:
    tokens: list[str]
    score: float
    truncated: bool
    trace: DecodeTrace | None = None


@dataclass
class BeamHypothesis:
    sentence: tuple[int, ...]  # closed segments, flattened
    segment: tuple[int, ...]  # open segment
    score: float
    attn: Tensor | None = None  # context for the open segment, filled lazily
    finished: bool = False


# ---------------------------------------------------------------------------
# shared stepping machinery
# ---------------------------------------------------------------------------


class SentenceDecoder:
    """Caches the span table of one source sentence across segments."""

    def __init__(self, params: ModelParams, src_ids: list[int]):
        self.params = params
        self.config = params.config
        self.table = encode_source_phrases(params, src_ids)

    def attention_at(self, emitted_ids: list[int]):
        states = encode_target_prefixes(self.params, emitted_ids)
        return attention_state(
            self.params, states[len(emitted_ids), :], self.table, len(emitted_ids)
        )

    def step_logprobs(self, attn_vector: Tensor, segment_ids: list[int]) -> np.ndarray:
        """Constrained next-symbol log-distribution.

        Start-of-sequence and padding are never emitted; the segment
        terminator is banned while the segment is empty (a zero-length
        segment would not advance decoding); once the segment hits the
        trained length bound only the two terminators remain, with their
        mass renormalized.
        """
        dist = next_symbol_logprobs(self.params, attn_vector, segment_ids).astype(np.float64)
        dist[PAD_ID] = -np.inf
        dist[BOS_ID] = -np.inf
        if len(segment_ids) == 0:
            dist[DOLLAR_ID] = -np.inf
        if len(segment_ids) >= self.config.l_tgt:
            pair = np.logaddexp(dist[DOLLAR_ID], dist[EOS_ID])
            keep_dollar, keep_eos = dist[DOLLAR_ID] - pair, dist[EOS_ID] - pair
            dist[:] = -np.inf
            dist[DOLLAR_ID], dist[EOS_ID] = keep_dollar, keep_eos
        return dist


def _segment_logprob(params: ModelParams, attn_vector: Tensor, ids: list[int]) -> float:
    """Log-probability of a fixed token sequence plus its terminator."""
    from .blocks import decoder_stack

    cfg = params.config
    dec_in = np.asarray([BOS_ID] + list(ids), dtype=np.int64).reshape(1, -1)
    emb = nm.take(params.tgt_embed, dec_in)
    memory = nm.reshape(attn_vector, (1, 1, cfg.d))
    hidden = decoder_stack(params.decoder, emb, memory)
    logits = nm.add(nm.matmul(hidden, params.out_w), params.out_b)
    logprobs = nm.log_softmax_last_axis(logits).data[0]
    total = sum(float(logprobs[k, tok]) for k, tok in enumerate(ids))
    return total + float(logprobs[len(ids), DOLLAR_ID])


def score_dictionary_candidates(
    params: ModelParams,
    attn_vector: Tensor,
    candidates: list[tuple[str, ...]],
    tgt_vocab: Vocabulary,
) -> int:
    """Pick the candidate the segment decoder likes best.

    Each candidate is scored as the sum of its token log-probs plus the
    end-of-segment terminator, with out-of-vocabulary words scored
    through the UNK embedding. Ties keep the earliest candidate.
    """
    if not candidates:
        raise DecodeError("empty candidate list")
    scores = [
        _segment_logprob(params, attn_vector, tgt_vocab.encode(list(cand)))
        for cand in candidates
    ]
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# greedy decoding (with or without a dictionary)
# ---------------------------------------------------------------------------


def _greedy_loop(
    params: ModelParams,
    src_tokens: list[str] | None,
    src_ids: list[int],
    dictionary: PhraseDictionary | None,
    tgt_vocab: Vocabulary,
    max_len: int | None,
) -> DecodeResult:
    cfg = params.config
    cap = max_len if max_len is not None else cfg.max_decode_len
    dec = SentenceDecoder(params, src_ids)
    trace = DecodeTrace()
    out_tokens: list[str] = []
    feedback_ids: list[int] = []
    score = 0.0
    finished = False

    while not finished and len(out_tokens) < cap:
        attn = dec.attention_at(feedback_ids)
        best_span_idx = int(np.argmax(attn.weights))
        span = dec.table.spans[best_span_idx]
        weight = float(attn.weights[best_span_idx])

        used_dictionary = False
        if dictionary is not None and src_tokens is not None:
            has_unk = any(src_ids[p] == UNK_ID for p in range(span[0], span[1] + 1))
            surface = tuple(src_tokens[span[0] : span[1] + 1])
            candidates = dictionary.lookup(surface) if has_unk else None
            if has_unk and candidates:
                best = score_dictionary_candidates(params, attn.vector, candidates, tgt_vocab)
                seg_surfaces = list(candidates[best])
                out_tokens.extend(seg_surfaces)
                feedback_ids.extend(tgt_vocab.encode(seg_surfaces))
                score += _segment_logprob(params, attn.vector, tgt_vocab.encode(seg_surfaces))
                trace.segments.append(TraceSegment(span, weight, True, seg_surfaces))
                used_dictionary = True

        if not used_dictionary:
            seg_ids: list[int] = []
            while True:
                dist = dec.step_logprobs(attn.vector, seg_ids)
                sym = int(np.argmax(dist))
                score += float(dist[sym])
                if sym == EOS_ID:
                    finished = True
                    break
                if sym == DOLLAR_ID:
                    break
                seg_ids.append(sym)
                if len(out_tokens) + len(seg_ids) >= cap:
                    break
            seg_surfaces = tgt_vocab.decode(seg_ids)
            out_tokens.extend(seg_surfaces)
            feedback_ids.extend(seg_ids)
            trace.segments.append(TraceSegment(span, weight, False, seg_surfaces))

    trace.truncated = not finished
    return DecodeResult(tokens=out_tokens, score=score, truncated=not finished, trace=trace)


def greedy_decode(
    params: ModelParams,
    src_ids: list[int],
    tgt_vocab: Vocabulary,
    max_len: int | None = None,
) -> DecodeResult:
    """Emit argmax segments until the sentence terminator or the cap."""
    return _greedy_loop(params, None, src_ids, None, tgt_vocab, max_len)


def dict_greedy_decode(
    params: ModelParams,
    src_tokens: list[str],
    src_ids: list[int],
    dictionary: PhraseDictionary,
    tgt_vocab: Vocabulary,
    max_len: int | None = None,
) -> DecodeResult:
    """Greedy decoding that consults a phrase dictionary on masked spans.

    When the argmax-attended span carries an UNK-masked word and its raw
    surface is a dictionary key, the model rescored candidates replace
    neural generation for that segment; the emitted words are kept
    verbatim in the output and fed back as UNK where out-of-vocabulary.
    """
    if len(src_tokens) != len(src_ids):
        raise DecodeError("raw surface and id sequences differ in length")
    return _greedy_loop(params, src_tokens, src_ids, dictionary, tgt_vocab, max_len)


# ---------------------------------------------------------------------------
# word-level beam search
# ---------------------------------------------------------------------------


def beam_search(
    params: ModelParams,
    src_ids: list[int],
    k: int,
    tgt_vocab: Vocabulary,
    horizon: int | None = None,
) -> DecodeResult:
    """Keep the k best appendable hypotheses per emitted symbol.

    The sentence terminator moves a hypothesis to the finished set, the
    segment terminator closes the open segment (the next expansion
    recomputes phrase attention over the longer prefix), any other
    symbol extends the open segment. Without finished hypotheses at the
    horizon the best open one is returned, flagged truncated.
    """
    if k < 1:
        raise DecodeError(f"beam size must be >= 1, got {k}")
    cfg = params.config
    steps = horizon if horizon is not None else 2 * cfg.max_decode_len + 1
    dec = SentenceDecoder(params, src_ids)

    appendable = [BeamHypothesis(sentence=(), segment=(), score=0.0)]
    finished: list[BeamHypothesis] = []

    for _ in range(steps):
        if not appendable:
            break
        expansions: list[BeamHypothesis] = []
        for hyp in appendable:
            if hyp.attn is None:
                hyp.attn = dec.attention_at(list(hyp.sentence)).vector
            dist = dec.step_logprobs(hyp.attn, list(hyp.segment))
            top = np.argsort(-dist, kind="stable")[:k]
            for sym in top:
                logp = float(dist[sym])
                if not math.isfinite(logp):
                    continue
                total = hyp.score + logp
                if sym == EOS_ID:
                    finished.append(
                        BeamHypothesis(
                            sentence=hyp.sentence + hyp.segment,
                            segment=(),
                            score=total,
                            finished=True,
                        )
                    )
                elif sym == DOLLAR_ID:
                    expansions.append(
                        BeamHypothesis(sentence=hyp.sentence + hyp.segment, segment=(), score=total)
                    )
                else:
                    expansions.append(
                        BeamHypothesis(
                            sentence=hyp.sentence,
                            segment=hyp.segment + (int(sym),),
                            score=total,
                            attn=hyp.attn,
                        )
                    )
        expansions.sort(key=lambda h: -h.score)
        appendable = expansions[:k]

    if finished:
        best = max(finished, key=lambda h: h.score)
        ids = list(best.sentence)
        return DecodeResult(tokens=tgt_vocab.decode(ids), score=best.score, truncated=False)
    if not appendable:
        raise DecodeError("no hypotheses survived; check the model and beam size")
    best = max(appendable, key=lambda h: h.score)
    ids = list(best.sentence + best.segment)
    return DecodeResult(tokens=tgt_vocab.decode(ids), score=best.score, truncated=True)


# ---------------------------------------------------------------------------
# trace serialization
# ---------------------------------------------------------------------------


def format_trace(trace: DecodeTrace, sentence_index: int) -> str:
    """Render one trace: a header line, then one tab-separated line per
    segment (1-based span, weight to 6 decimals, dictionary flag, tokens).
    """
    lines = [f"# {sentence_index} truncated={1 if trace.truncated else 0}"]
    for seg in trace.segments:
        lines.append(
            "\t".join(
                [
                    str(seg.span[0] + 1),
                    str(seg.span[1] + 1),
                    f"{seg.weight:.6f}",
                    "1" if seg.from_dictionary else "0",
                    " ".join(seg.tokens),
                ]
            )
        )
    return "\n".join(lines)


def write_traces(traces: list[DecodeTrace], path: str | Path) -> None:
    text = "\n".join(format_trace(t, i) for i, t in enumerate(traces))
    Path(path).write_text(text + "\n" if text else "", encoding="utf-8")


def read_traces(path: str | Path) -> list[DecodeTrace]:
    traces: list[DecodeTrace] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        if line.startswith("#"):
            parts = line.split()
            truncated = parts[-1] == "truncated=1"
            traces.append(DecodeTrace(truncated=truncated))
            continue
        if not traces:
            raise DecodeError(f"{path}:{lineno}: segment line before any sentence header")
        fields = line.split("\t")
        if len(fields) != 5:
            raise DecodeError(f"{path}:{lineno}: expected 5 tab-separated fields")
        traces[-1].segments.append(
            TraceSegment(
                span=(int(fields[0]) - 1, int(fields[1]) - 1),
                weight=float(fields[2]),
                from_dictionary=fields[3] == "1",
                tokens=fields[4].split() if fields[4] else [],
            )
        )
    return traces
