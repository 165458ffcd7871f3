"""Optimization loop, learning-rate schedule, and checkpointing.

The schedule ramps linearly to the maximum rate, holds it until halfway
through training, then decays linearly to zero. Adam couples weight
decay through the gradient by default (the classical L2 form); a switch
selects the decoupled variant. Losses are normalized per target token
so the rate is comparable across sentence lengths.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import Vocabulary
from .lattice import sequence_nll
from .model import ModelConfig, ModelParams
from .numerics import Tensor

logger = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass
class ScheduleConfig:
    total_steps: int
    max_lr: float = 1e-3
    warmup_fraction: float = 0.1

    def validate(self) -> None:
        if self.total_steps < 1:
            raise TrainingError("schedule needs at least one step")
        if not 0.0 < self.warmup_fraction < 0.5:
            raise TrainingError(f"warmup fraction must be in (0, 0.5), got {self.warmup_fraction}")
        if self.max_lr <= 0.0:
            raise TrainingError("max learning rate must be positive")


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    """Piecewise-linear rate: ramp to max, hold to 50% progress, decay to 0."""
    schedule.validate()
    if not 0 <= step <= schedule.total_steps:
        raise TrainingError(f"step {step} outside [0, {schedule.total_steps}]")
    warm_end = schedule.warmup_fraction * schedule.total_steps
    half = 0.5 * schedule.total_steps
    if step <= warm_end:
        return schedule.max_lr * step / warm_end
    if step <= half:
        return schedule.max_lr
    return schedule.max_lr * (schedule.total_steps - step) / (schedule.total_steps - half)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled_decay: bool = False
    skipped_steps: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor], **kwargs) -> "OptimizerState":
        return cls(
            m=[np.zeros_like(p.data, dtype=np.float64) for p in params],
            v=[np.zeros_like(p.data, dtype=np.float64) for p in params],
            **kwargs,
        )


def adam_step(state: OptimizerState, params: list[Tensor], lr: float) -> None:
    """Bias-corrected Adam update in place; reads `p.grad` of every param.

    Non-finite gradients raise in verification mode and skip the update
    (with a warning) otherwise.
    """
    if len(params) != len(state.m):
        raise TrainingError("optimizer state does not match parameter list")
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        grads.append(np.asarray(g, dtype=np.float64))
    if not all(np.all(np.isfinite(g)) for g in grads):
        if nm.verification_enabled():
            raise TrainingError("non-finite gradient")
        state.skipped_steps += 1
        logger.warning("skipping optimizer step %d: non-finite gradient", state.step + 1)
        return

    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for i, p in enumerate(params):
        g = grads[i]
        theta = np.asarray(p.data, dtype=np.float64)
        if state.weight_decay and not state.decoupled_decay:
            g = g + state.weight_decay * theta
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        if state.weight_decay and state.decoupled_decay:
            update = update + lr * state.weight_decay * theta
        p.data[...] = (theta - update).astype(p.data.dtype)


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`."""
    norm = nm.global_grad_norm(params)
    if max_norm > 0.0 and norm > max_norm and np.isfinite(norm):
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    max_lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    seed: int = 0
    decoupled_decay: bool = False
    log_every: int = 0  # batches; 0 disables progress logging


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)  # nats per target token
    dev_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    skipped_steps: int = 0


def _batches(corpus, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Length-bucketed batches in a seeded random order."""
    order = sorted(
        range(len(corpus)),
        key=lambda i: (len(corpus.source[i].ids), len(corpus.target[i].ids), i),
    )
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)
    return chunks


def corpus_loss(params: ModelParams, corpus, indices=None) -> float:
    """Mean NLL per target token in eval mode (no dropout, no tape)."""
    idx = range(len(corpus)) if indices is None else indices
    total_nll, total_tokens = 0.0, 0
    for i in idx:
        src, tgt = corpus.source[i].ids, corpus.target[i].ids
        total_nll += sequence_nll(params, src, tgt, train=False).item()
        total_tokens += len(tgt)
    return total_nll / max(total_tokens, 1)


def train(
    params: ModelParams,
    train_corpus,
    config: TrainConfig,
    dev_corpus=None,
    checkpoint_path: str | Path | None = None,
    src_vocab: Vocabulary | None = None,
    tgt_vocab: Vocabulary | None = None,
) -> TrainHistory:
    """Adam over per-token sequence NLL with the three-stage schedule.

    Keeps the parameters of the best dev epoch (restored before
    returning, and written to `checkpoint_path` when given); without a
    dev corpus the final parameters stand.
    """
    if len(train_corpus) == 0:
        raise TrainingError("empty training corpus")
    for sent in train_corpus.source + train_corpus.target:
        if sent.ids is None:
            raise TrainingError("corpus must be masked before training")

    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(int(rng.integers(2**32)))
    batch_rng = np.random.default_rng(int(rng.integers(2**32)))

    param_list = params.parameters()
    opt = OptimizerState.for_params(
        param_list, weight_decay=config.weight_decay, decoupled_decay=config.decoupled_decay
    )
    steps_per_epoch = (len(train_corpus) + config.batch_size - 1) // config.batch_size
    schedule = ScheduleConfig(
        total_steps=max(config.epochs * steps_per_epoch, 1),
        max_lr=config.max_lr,
        warmup_fraction=config.warmup_fraction,
    )

    history = TrainHistory()
    best_dev = np.inf
    best_snapshot: list[np.ndarray] | None = None
    step = 0

    for epoch in range(config.epochs):
        epoch_nll, epoch_tokens = 0.0, 0
        for batch_no, batch in enumerate(_batches(train_corpus, config.batch_size, batch_rng)):
            params.zero_grad()
            batch_tokens = sum(len(train_corpus.target[i].ids) for i in batch)
            batch_nll = 0.0
            with nm.recording() as tape:
                for i in batch:
                    nll = sequence_nll(
                        params,
                        train_corpus.source[i].ids,
                        train_corpus.target[i].ids,
                        train=True,
                        rng=dropout_rng,
                    )
                    batch_nll += nll.item()
                    # Per-token normalization folded into the seed gradient.
                    tape.backward(nm.mul(nll, 1.0 / batch_tokens))
            clip_gradients(param_list, config.clip_norm)
            step += 1
            adam_step(opt, param_list, lr_at(schedule, step))
            epoch_nll += batch_nll
            epoch_tokens += batch_tokens
            if config.log_every and (batch_no + 1) % config.log_every == 0:
                logger.info(
                    "epoch %d batch %d loss %.4f", epoch + 1, batch_no + 1, batch_nll / batch_tokens
                )
        history.train_loss.append(epoch_nll / max(epoch_tokens, 1))

        if dev_corpus is not None and len(dev_corpus) > 0:
            dev = corpus_loss(params, dev_corpus)
            history.dev_loss.append(dev)
            if dev < best_dev:
                best_dev = dev
                history.best_epoch = epoch
                best_snapshot = [p.data.copy() for p in param_list]
        logger.info(
            "epoch %d: train %.4f%s",
            epoch + 1,
            history.train_loss[-1],
            f" dev {history.dev_loss[-1]:.4f}" if history.dev_loss else "",
        )

    if best_snapshot is not None:
        for p, snap in zip(param_list, best_snapshot):
            p.data[...] = snap
    history.skipped_steps = opt.skipped_steps
    if checkpoint_path is not None:
        if src_vocab is None or tgt_vocab is None:
            raise TrainingError("checkpointing requires both vocabularies")
        save_checkpoint(checkpoint_path, params, src_vocab, tgt_vocab)
    return history


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"NP2M"
FORMAT_VERSION = 1


class CheckpointError(TrainingError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> None:
    """Single self-describing file: magic, version, JSON header (config,
    vocabularies, array manifest), then raw little-endian arrays."""
    named = params.named_parameters()
    manifest = []
    blobs = []
    for name, tensor in named.items():
        arr = np.ascontiguousarray(tensor.data)
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(arr.astype(dtype).tobytes())
    header = {
        "config": params.config.to_dict(),
        "src_vocab": src_vocab.tokens,
        "tgt_vocab": tgt_vocab.tokens,
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Vocabulary, Vocabulary]:
    """Inverse of `save_checkpoint`, with distinct errors for corruption,
    version drift, and manifest/config disagreement."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        src_vocab = Vocabulary(header["src_vocab"])
        tgt_vocab = Vocabulary(header["tgt_vocab"])
        manifest = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc

    params = ModelParams(config, np.random.default_rng(0))
    named = params.named_parameters()
    if {m["name"] for m in manifest} != set(named):
        raise ShapeMismatchError(f"{path}: stored arrays do not match the configuration")
    offset = 16 + header_len
    for entry in manifest:
        tensor = named[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise ShapeMismatchError(
                f"{path}: {entry['name']} has shape {shape}, config wants {tensor.shape}"
            )
        dtype = np.dtype(entry["dtype"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(f"{path}: truncated array data for {entry['name']}")
        offset += nbytes
        tensor.data = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(tensor.data.dtype).copy()
    if offset != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, src_vocab, tgt_vocab
