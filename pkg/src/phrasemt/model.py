"""Translation model: span table, phrase attention, segment decoder.

The source sentence is encoded twice: once token-by-token with a
bidirectional recurrent stack, then every bounded-length span of those
states is reduced to a single vector. A target prefix state attends over
all span vectors to produce the context the segment decoder conditions
on (as a length-1 cross-attention memory). One decoder pass scores every
prefix of a window of upcoming target tokens, which is what keeps
training cost linear in target length times the window bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .blocks import (
    BiEncoderLayer,
    DecoderStackParams,
    LstmParams,
    SpanEncoderParams,
    bi_encode,
    decoder_stack,
    encode_spans,
    lstm_run,
    uniform_init,
    zeros_init,
)
from .data import BOS_ID, DOLLAR_ID, EOS_ID, NUM_RESERVED
from .numerics import Tensor


class ModelError(Exception):
    """Configuration or input contract violation."""


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d: int = 64
    l_src: int = 4  # longest source span entered in the table
    l_tgt: int = 4  # longest target segment the lattice admits
    encoder_layers: int = 2
    tgt_encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    max_decode_len: int = 100
    max_positions: int = 512

    def validate(self) -> None:
        if self.l_src < 1 or self.l_tgt < 1:
            raise ModelError("span and segment bounds must be >= 1")
        if self.max_decode_len < 1:
            raise ModelError("max_decode_len must be >= 1")
        if self.d % self.heads != 0:
            raise ModelError(f"width {self.d} not divisible by {self.heads} heads")
        if self.src_vocab_size <= NUM_RESERVED or self.tgt_vocab_size <= NUM_RESERVED:
            raise ModelError("vocab sizes must exceed the reserved ids")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class PhraseEncodingTable:
    """All span vectors of one source sentence.

    `spans` lists 0-based inclusive (i, j) pairs sorted by (i, j);
    `vectors` holds the matching rows of shape (len(spans), d).
    """

    source_len: int
    spans: list[tuple[int, int]]
    vectors: Tensor

    def __len__(self) -> int:
        return len(self.spans)


def admissible_spans(source_len: int, l_src: int) -> list[tuple[int, int]]:
    """Every (i, j) with j - i + 1 <= l_src, 0-based inclusive, (i, j)-sorted."""
    return [
        (i, j)
        for i in range(source_len)
        for j in range(i, min(i + l_src, source_len))
    ]


def span_count(source_len: int, l_src: int) -> int:
    return sum(min(l_src, source_len - i) for i in range(source_len))


@dataclass
class AttentionState:
    """Context for one prefix length; a function of the flat prefix only."""

    prefix_len: int
    weights: np.ndarray  # (num spans,), sums to 1
    vector: Tensor  # (d,)


class ModelParams:
    """Every trainable tensor of the translator, registered exactly once."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.d
        r = 1.0 / np.sqrt(d)
        # Unit-scale embeddings keep the recurrent gates responsive; with
        # 1/sqrt(d) weight inits, smaller embeddings starve the encoders
        # of input signal and attention never differentiates spans.
        self.src_embed = Tensor(rng.standard_normal((config.src_vocab_size, d)), requires_grad=True)
        self.tgt_embed = Tensor(rng.standard_normal((config.tgt_vocab_size, d)), requires_grad=True)
        self.sent_encoder = [
            BiEncoderLayer.create(d, d, rng) for _ in range(config.encoder_layers)
        ]
        self.span_encoder = SpanEncoderParams.create(d, rng)
        self.tgt_encoder = [
            LstmParams.create(d, d, rng) for _ in range(config.tgt_encoder_layers)
        ]
        self.attn_query_w = uniform_init(rng, (d, d), r)
        self.attn_value_w = uniform_init(rng, (d, d), r)
        self.attn_comb_w = uniform_init(rng, (2 * d, d), 1.0 / np.sqrt(2 * d))
        self.attn_comb_b = zeros_init((d,))
        self.decoder = DecoderStackParams.create(
            d, config.decoder_layers, config.heads, config.max_positions, rng
        )
        self.out_w = uniform_init(rng, (d, config.tgt_vocab_size), r)
        self.out_b = zeros_init((config.tgt_vocab_size,))
        # Counts target tokens scored by the segment decoder; the lattice
        # build is linear in this number.
        self.decoder_token_evals = 0

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "src_embed": self.src_embed,
            "tgt_embed": self.tgt_embed,
            "attn.query_w": self.attn_query_w,
            "attn.value_w": self.attn_value_w,
            "attn.comb_w": self.attn_comb_w,
            "attn.comb_b": self.attn_comb_b,
            "out_w": self.out_w,
            "out_b": self.out_b,
        }
        for i, layer in enumerate(self.sent_encoder):
            out.update(layer.named(f"sent{i}"))
        out.update(self.span_encoder.named("span"))
        for i, cell in enumerate(self.tgt_encoder):
            out.update(cell.named(f"tgt{i}"))
        out.update(self.decoder.named("dec"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def reset_counters(self) -> None:
        self.decoder_token_evals = 0


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def encode_source_phrases(
    params: ModelParams,
    src_ids: list[int],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> PhraseEncodingTable:
    """Sentence-level pass, then one span-encoder pass per span length."""
    cfg = params.config
    t = len(src_ids)
    if t < 1:
        raise ModelError("cannot encode an empty source sentence")
    ids = np.asarray(src_ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= cfg.src_vocab_size:
        raise ModelError("source id out of vocabulary range")
    emb = nm.take(params.src_embed, ids.reshape(1, t))
    if train and cfg.dropout > 0.0:
        emb = nm.dropout(emb, cfg.dropout, train=True, rng=rng)
    states = bi_encode(params.sent_encoder, emb)  # (1, t, d)
    states = nm.reshape(states, (t, cfg.d))

    spans = admissible_spans(t, cfg.l_src)
    # Group spans by length so each group is one batched recurrent pass.
    by_len: dict[int, list[int]] = {}
    for pos, (i, j) in enumerate(spans):
        by_len.setdefault(j - i + 1, []).append(pos)
    chunks: list[Tensor] = []
    order: list[int] = []
    for length, positions in sorted(by_len.items()):
        starts = np.array([spans[p][0] for p in positions])
        gather = starts[:, None] + np.arange(length)[None, :]
        windows = nm.take(states, gather)  # (n, length, d)
        chunks.append(encode_spans(params.span_encoder, windows))
        order.extend(positions)
    stacked = nm.concat(chunks, axis=0)
    # Restore canonical (i, j) order.
    perm = np.empty(len(spans), dtype=np.int64)
    perm[np.asarray(order)] = np.arange(len(spans))
    vectors = nm.take(stacked, perm)
    return PhraseEncodingTable(source_len=t, spans=spans, vectors=vectors)


def encode_target_prefixes(
    params: ModelParams,
    tgt_ids: list[int],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal states for prefixes j = 0..T'; row j saw y_1..y_j only.

    The j = 0 row comes from a start-of-sequence embedding, so the output
    always has one more row than the input has tokens.
    """
    cfg = params.config
    ids = np.asarray([BOS_ID] + list(tgt_ids), dtype=np.int64)
    if ids.min() < 0 or ids.max() >= cfg.tgt_vocab_size:
        raise ModelError("target id out of vocabulary range")
    emb = nm.take(params.tgt_embed, ids.reshape(1, -1))
    if train and cfg.dropout > 0.0:
        emb = nm.dropout(emb, cfg.dropout, train=True, rng=rng)
    current = emb
    for cell in params.tgt_encoder:
        hs = lstm_run(cell, current, reverse=False)
        current = nm.stack(hs, axis=1)
    return nm.reshape(current, (len(ids), cfg.d))


# ---------------------------------------------------------------------------
# phrase attention
# ---------------------------------------------------------------------------


def attend(
    params: ModelParams,
    prefix_states: Tensor,
    table: PhraseEncodingTable,
) -> tuple[Tensor, Tensor]:
    """Batched span attention: (B, d) states -> context (B, d), weights (B, S).

    Scaled dot-product between a projected prefix state and each raw span
    vector; the weighted value-projected spans are combined with the
    prefix state and squashed back to model width.
    """
    if len(table) == 0:
        raise ModelError("attention over an empty span table")
    d = params.config.d
    q = nm.matmul(prefix_states, params.attn_query_w)  # (B, d)
    scores = nm.mul(nm.matmul(q, nm.swap_last_axes(table.vectors)), 1.0 / np.sqrt(d))
    weights = nm.softmax(scores)  # (B, S)
    values = nm.matmul(table.vectors, params.attn_value_w)  # (S, d)
    context = nm.matmul(weights, values)  # (B, d)
    combined = nm.concat([context, prefix_states], axis=-1)
    a = nm.tanh(nm.add(nm.matmul(combined, params.attn_comb_w), params.attn_comb_b))
    return a, weights


def attention_state(
    params: ModelParams,
    prefix_state: Tensor,
    table: PhraseEncodingTable,
    prefix_len: int,
) -> AttentionState:
    """Single-prefix convenience wrapper around `attend`."""
    a, w = attend(params, nm.reshape(prefix_state, (1, -1)), table)
    return AttentionState(
        prefix_len=prefix_len,
        weights=w.data[0].copy(),
        vector=nm.reshape(a, (params.config.d,)),
    )


# ---------------------------------------------------------------------------
# segment scoring
# ---------------------------------------------------------------------------


def segment_prefix_logprobs(
    params: ModelParams,
    attn: Tensor,
    windows: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Score every prefix of each window in one decoder pass.

    `attn` is (B, d); `windows` is (B, m) target ids, m <= l_tgt. Returns
    (cumulative, dollar, eos), each (B, m): column l-1 holds the log-prob
    of the first l window tokens, of the end-of-segment symbol after
    them, and of the end-of-sentence symbol after them. Extending a
    window never changes earlier columns (decoder causality).
    """
    cfg = params.config
    b, m = windows.shape
    if m < 1 or m > cfg.l_tgt:
        raise ModelError(f"window length {m} outside [1, {cfg.l_tgt}]")
    dec_in = np.concatenate([np.full((b, 1), BOS_ID, dtype=np.int64), windows], axis=1)
    emb = nm.take(params.tgt_embed, dec_in)  # (B, m+1, d)
    memory = nm.reshape(attn, (b, 1, cfg.d))
    hidden = decoder_stack(
        params.decoder, emb, memory, dropout_rate=cfg.dropout, train=train, rng=rng
    )
    logits = nm.add(nm.matmul(hidden, params.out_w), params.out_b)
    logprobs = nm.log_softmax_last_axis(logits)  # (B, m+1, V)
    token_lp = nm.pick_last_axis(logprobs[:, :m, :], windows)  # (B, m)
    cumulative = nm.cumsum_last_axis(token_lp)
    dollar = logprobs[:, 1 : m + 1, DOLLAR_ID]
    eos = logprobs[:, 1 : m + 1, EOS_ID]
    params.decoder_token_evals += b * m
    return cumulative, dollar, eos


def next_symbol_logprobs(
    params: ModelParams,
    attn: Tensor,
    segment_ids: list[int],
) -> np.ndarray:
    """Next-symbol log-distribution given an open segment (decode path)."""
    cfg = params.config
    ids = np.asarray([BOS_ID] + list(segment_ids), dtype=np.int64).reshape(1, -1)
    emb = nm.take(params.tgt_embed, ids)
    memory = nm.reshape(attn, (1, 1, cfg.d))
    hidden = decoder_stack(params.decoder, emb, memory)
    last = hidden[:, -1, :]
    logits = nm.add(nm.matmul(last, params.out_w), params.out_b)
    return nm.log_softmax_last_axis(logits).data[0]


# ---------------------------------------------------------------------------
# segmentations
# ---------------------------------------------------------------------------


@dataclass
class Segmentation:
    """An ordered split of a target sentence into bounded segments."""

    segments: list[list[int]]

    def flatten(self) -> list[int]:
        return [tok for seg in self.segments for tok in seg]

    def check(self, target: list[int], l_tgt: int) -> None:
        if self.flatten() != list(target):
            raise ModelError("segmentation does not concatenate to the target")
        if any(len(seg) == 0 for seg in self.segments):
            raise ModelError("empty segment")
        if any(len(seg) > l_tgt for seg in self.segments):
            raise ModelError(f"segment longer than {l_tgt}")
