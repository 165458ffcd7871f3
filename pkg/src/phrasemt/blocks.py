"""Recurrent and attention building blocks.

LSTM cells power the sentence, span, and target-prefix encoders; a
pre-norm transformer stack with causal self-attention and cross-attention
is the segment decoder. Everything runs over an explicit leading batch
axis so callers can score many spans or prefixes in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], radius: float) -> Tensor:
    return Tensor(rng.uniform(-radius, radius, size=shape), requires_grad=True)


def zeros_init(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    """Gate weights for one LSTM cell, packed [input, forget, cell, output]."""

    w_x: Tensor  # (d_in, 4d)
    w_h: Tensor  # (d, 4d)
    b: Tensor  # (4d,)

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def create(cls, d_in: int, d: int, rng: np.random.Generator) -> "LstmParams":
        r = 1.0 / math.sqrt(d)
        b = np.zeros(4 * d)
        b[d : 2 * d] = 1.0  # open forget gates at the start of training
        return cls(
            w_x=uniform_init(rng, (d_in, 4 * d), r),
            w_h=uniform_init(rng, (d, 4 * d), r),
            b=Tensor(b, requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}


def lstm_step(params: LstmParams, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """One gated update. `x` is (B, d_in); state tensors are (B, d)."""
    h, c = state
    d = params.hidden_size
    if x.shape[-1] != params.w_x.shape[0] or h.shape[-1] != d:
        raise nm.NumericsError(
            f"lstm_step dimension mismatch: x {x.shape}, h {h.shape}, cell d={d}"
        )
    return nm.lstm_cell(nm.matmul(x, params.w_x), h, c, params.w_h, params.b)


def _zero_state(batch: int, d: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch, d))), Tensor(np.zeros((batch, d)))


def lstm_run(params: LstmParams, xs: Tensor, reverse: bool = False) -> list[Tensor]:
    """Run a cell over (B, T, d_in); returns T hidden states of (B, d).

    The input projection for the whole sequence is one matmul; each step
    is then a single fused cell update.
    """
    batch, steps = xs.shape[0], xs.shape[1]
    xz_all = nm.matmul(xs, params.w_x)  # (B, T, 4d)
    state = _zero_state(batch, params.hidden_size)
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    outputs: list[Tensor | None] = [None] * steps
    for t in order:
        h, c = nm.lstm_cell(xz_all[:, t, :], state[0], state[1], params.w_h, params.b)
        state = (h, c)
        outputs[t] = h
    return outputs  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# bidirectional encoder
# ---------------------------------------------------------------------------


@dataclass
class BiEncoderLayer:
    fwd: LstmParams
    bwd: LstmParams
    proj_w: Tensor  # (2d, d)
    proj_b: Tensor  # (d,)

    @classmethod
    def create(cls, d_in: int, d: int, rng: np.random.Generator) -> "BiEncoderLayer":
        r = 1.0 / math.sqrt(2 * d)
        return cls(
            fwd=LstmParams.create(d_in, d, rng),
            bwd=LstmParams.create(d_in, d, rng),
            proj_w=uniform_init(rng, (2 * d, d), r),
            proj_b=zeros_init((d,)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.named(f"{prefix}.fwd")
        out.update(self.bwd.named(f"{prefix}.bwd"))
        out[f"{prefix}.proj_w"] = self.proj_w
        out[f"{prefix}.proj_b"] = self.proj_b
        return out


def bi_encode(layers: list[BiEncoderLayer], xs: Tensor) -> Tensor:
    """Stacked bidirectional pass over (B, T, d_in) -> (B, T, d).

    Position t carries the forward state at t concatenated with the
    backward state at t, projected back to model width.
    """
    if xs.shape[1] < 1:
        raise nm.NumericsError("bi_encode requires a non-empty sequence")
    current = xs
    for layer in layers:
        f_states = lstm_run(layer.fwd, current, reverse=False)
        b_states = lstm_run(layer.bwd, current, reverse=True)
        per_pos = [nm.concat([f, b], axis=-1) for f, b in zip(f_states, b_states)]
        merged = nm.stack(per_pos, axis=1)  # (B, T, 2d)
        current = nm.add(nm.matmul(merged, layer.proj_w), layer.proj_b)
    return current


@dataclass
class SpanEncoderParams:
    """Reduces a span of states to one vector: bi-recurrence, final states
    of both directions concatenated and projected to model width."""

    fwd: LstmParams
    bwd: LstmParams
    proj_w: Tensor  # (2d, d)
    proj_b: Tensor  # (d,)

    @classmethod
    def create(cls, d: int, rng: np.random.Generator) -> "SpanEncoderParams":
        r = 1.0 / math.sqrt(2 * d)
        return cls(
            fwd=LstmParams.create(d, d, rng),
            bwd=LstmParams.create(d, d, rng),
            proj_w=uniform_init(rng, (2 * d, d), r),
            proj_b=zeros_init((d,)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.named(f"{prefix}.fwd")
        out.update(self.bwd.named(f"{prefix}.bwd"))
        out[f"{prefix}.proj_w"] = self.proj_w
        out[f"{prefix}.proj_b"] = self.proj_b
        return out


def encode_spans(params: SpanEncoderParams, spans: Tensor) -> Tensor:
    """(S, len, d) batch of equal-length spans -> (S, d) span vectors."""
    f_last = lstm_run(params.fwd, spans, reverse=False)[-1]
    b_first = lstm_run(params.bwd, spans, reverse=True)[0]
    merged = nm.concat([f_last, b_first], axis=-1)
    return nm.add(nm.matmul(merged, params.proj_w), params.proj_b)


# ---------------------------------------------------------------------------
# multi-head attention and the decoder stack
# ---------------------------------------------------------------------------


@dataclass
class MultiHeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def create(cls, d: int, rng: np.random.Generator) -> "MultiHeadParams":
        r = 1.0 / math.sqrt(d)
        return cls(*(uniform_init(rng, (d, d), r) for _ in range(4)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
        }


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return nm.transpose(nm.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def multi_head_attention(
    params: MultiHeadParams,
    queries: Tensor,
    memory: Tensor,
    heads: int,
    causal: bool = False,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention; queries (B, Tq, d), memory (B, Tk, d)."""
    d = queries.shape[-1]
    if d % heads != 0:
        raise nm.NumericsError(f"width {d} not divisible by {heads} heads")
    q = _split_heads(nm.matmul(queries, params.wq), heads)
    k = _split_heads(nm.matmul(memory, params.wk), heads)
    v = _split_heads(nm.matmul(memory, params.wv), heads)
    scores = nm.mul(nm.matmul(q, nm.swap_last_axes(k)), 1.0 / math.sqrt(d // heads))
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        mask = np.triu(np.full((tq, tk), nm.MASK_VALUE), k=1)
        scores = nm.add(scores, Tensor(np.broadcast_to(mask, scores.shape).copy()))
    weights = nm.softmax(scores)
    attn = weights
    if train and dropout_rate > 0.0:
        attn = nm.dropout(weights, dropout_rate, train=True, rng=rng)
    out = nm.matmul(_merge_heads(nm.matmul(attn, v)), params.wo)
    if return_weights:
        return out, weights
    return out


@dataclass
class DecoderLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    self_attn: MultiHeadParams
    ln2_g: Tensor
    ln2_b: Tensor
    cross_attn: MultiHeadParams
    ln3_g: Tensor
    ln3_b: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    @classmethod
    def create(cls, d: int, ff: int, rng: np.random.Generator) -> "DecoderLayerParams":
        r1, r2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(ff)
        return cls(
            ln1_g=Tensor(np.ones(d), requires_grad=True),
            ln1_b=zeros_init((d,)),
            self_attn=MultiHeadParams.create(d, rng),
            ln2_g=Tensor(np.ones(d), requires_grad=True),
            ln2_b=zeros_init((d,)),
            cross_attn=MultiHeadParams.create(d, rng),
            ln3_g=Tensor(np.ones(d), requires_grad=True),
            ln3_b=zeros_init((d,)),
            ff_w1=uniform_init(rng, (d, ff), r1),
            ff_b1=zeros_init((ff,)),
            ff_w2=uniform_init(rng, (ff, d), r2),
            ff_b2=zeros_init((d,)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.ln1_g": self.ln1_g,
            f"{prefix}.ln1_b": self.ln1_b,
            f"{prefix}.ln2_g": self.ln2_g,
            f"{prefix}.ln2_b": self.ln2_b,
            f"{prefix}.ln3_g": self.ln3_g,
            f"{prefix}.ln3_b": self.ln3_b,
            f"{prefix}.ff_w1": self.ff_w1,
            f"{prefix}.ff_b1": self.ff_b1,
            f"{prefix}.ff_w2": self.ff_w2,
            f"{prefix}.ff_b2": self.ff_b2,
        }
        out.update(self.self_attn.named(f"{prefix}.self"))
        out.update(self.cross_attn.named(f"{prefix}.cross"))
        return out


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    """Fixed position encodings; row t is a function of t alone."""
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table


@dataclass
class DecoderStackParams:
    """Causal self-attention decoder with cross-attention to a memory."""

    layers: list[DecoderLayerParams]
    final_g: Tensor
    final_b: Tensor
    heads: int
    positions: np.ndarray = field(repr=False)

    @classmethod
    def create(
        cls, d: int, n_layers: int, heads: int, max_len: int, rng: np.random.Generator
    ) -> "DecoderStackParams":
        if d % heads != 0:
            raise nm.NumericsError(f"width {d} not divisible by {heads} heads")
        return cls(
            layers=[DecoderLayerParams.create(d, 2 * d, rng) for _ in range(n_layers)],
            final_g=Tensor(np.ones(d), requires_grad=True),
            final_b=zeros_init((d,)),
            heads=heads,
            positions=sinusoid_table(max_len, d),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {f"{prefix}.final_g": self.final_g, f"{prefix}.final_b": self.final_b}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layer{i}"))
        return out


def decoder_stack(
    params: DecoderStackParams,
    prefix: Tensor,
    memory: Tensor,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm decoder pass: (B, T, d) embeddings -> (B, T, d).

    Output at position t depends only on prefix positions <= t and the
    full memory, so one pass scores every prefix length at once.
    """
    b, t, d = prefix.shape
    if t < 1:
        raise nm.NumericsError("decoder_stack requires a non-empty prefix")
    if t > params.positions.shape[0]:
        raise nm.NumericsError(f"prefix length {t} exceeds position table")
    pos = np.broadcast_to(params.positions[:t], (b, t, d)).astype(prefix.data.dtype)
    x = nm.add(prefix, Tensor(pos))
    if train and dropout_rate > 0.0:
        x = nm.dropout(x, dropout_rate, train=True, rng=rng)
    for layer in params.layers:
        normed = nm.layer_norm(x, layer.ln1_g, layer.ln1_b)
        x = nm.add(
            x,
            multi_head_attention(
                layer.self_attn, normed, normed, params.heads, causal=True,
                dropout_rate=dropout_rate, train=train, rng=rng,
            ),
        )
        normed = nm.layer_norm(x, layer.ln2_g, layer.ln2_b)
        x = nm.add(
            x,
            multi_head_attention(
                layer.cross_attn, normed, memory, params.heads, causal=False,
                dropout_rate=dropout_rate, train=train, rng=rng,
            ),
        )
        normed = nm.layer_norm(x, layer.ln3_g, layer.ln3_b)
        hidden = nm.relu(nm.add(nm.matmul(normed, layer.ff_w1), layer.ff_b1))
        if train and dropout_rate > 0.0:
            hidden = nm.dropout(hidden, dropout_rate, train=True, rng=rng)
        x = nm.add(x, nm.add(nm.matmul(hidden, layer.ff_w2), layer.ff_b2))
    return nm.layer_norm(x, params.final_g, params.final_b)
