"""Command-line entry points: prep, train, translate, eval."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import (
    DataError,
    Vocabulary,
    apply_unk_mask,
    build_vocab,
    load_dictionary,
    load_parallel_corpus,
    oov_rate,
)
from .decoding import (
    DecodeError,
    beam_search,
    dict_greedy_decode,
    greedy_decode,
    read_traces,
    write_traces,
)
from .lattice import LatticeError
from .metrics import EvalReport, MetricsError, bleu_score, lookup_ratio
from .model import ModelConfig, ModelError, ModelParams
from .training import TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

USER_ERRORS = (DataError, DecodeError, LatticeError, MetricsError, ModelError, TrainingError, OSError)


def _add_precision_flag(parser):
    parser.add_argument("--precision", type=int, choices=(32, 64), default=32)


def _read_sentences(path: str) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.split() for line in lines]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prep(args) -> int:
    corpus = load_parallel_corpus(args.src, args.tgt, max_len=args.max_len)
    src_vocab = build_vocab([s.raw for s in corpus.source], args.vocab_threshold)
    tgt_vocab = build_vocab([s.raw for s in corpus.target], args.vocab_threshold)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src_vocab.save(out_dir / "src.vocab")
    tgt_vocab.save(out_dir / "tgt.vocab")
    apply_unk_mask(corpus, src_vocab, tgt_vocab)
    # Visible-text form of the masked corpus: what the model will see.
    with open(out_dir / "masked.src", "w", encoding="utf-8") as fh:
        for sent in corpus.source:
            fh.write(" ".join(src_vocab.decode(sent.ids)) + "\n")
    with open(out_dir / "masked.tgt", "w", encoding="utf-8") as fh:
        for sent in corpus.target:
            fh.write(" ".join(tgt_vocab.decode(sent.ids)) + "\n")
    print(f"pairs\t{len(corpus)}")
    print(f"src_vocab\t{len(src_vocab)}")
    print(f"tgt_vocab\t{len(tgt_vocab)}")
    print(f"src_oov_rate\t{oov_rate([s.raw for s in corpus.source], src_vocab):.6f}")
    print(f"tgt_oov_rate\t{oov_rate([s.raw for s in corpus.target], tgt_vocab):.6f}")
    return 0


def cmd_train(args) -> int:
    nm.set_precision(args.precision)
    corpus = load_parallel_corpus(args.src, args.tgt, max_len=args.max_len)
    src_vocab = build_vocab([s.raw for s in corpus.source], args.vocab_threshold)
    tgt_vocab = build_vocab([s.raw for s in corpus.target], args.vocab_threshold)
    apply_unk_mask(corpus, src_vocab, tgt_vocab)

    dev_corpus = None
    if args.dev_src and args.dev_tgt:
        dev_corpus = load_parallel_corpus(args.dev_src, args.dev_tgt, max_len=args.max_len)
        apply_unk_mask(dev_corpus, src_vocab, tgt_vocab)

    config = ModelConfig(
        src_vocab_size=len(src_vocab),
        tgt_vocab_size=len(tgt_vocab),
        d=args.d,
        l_src=args.l_src,
        l_tgt=args.l_tgt,
        encoder_layers=args.encoder_layers,
        tgt_encoder_layers=args.tgt_encoder_layers,
        decoder_layers=args.decoder_layers,
        heads=args.heads,
        dropout=args.dropout,
        max_decode_len=args.max_decode_len,
    )
    params = ModelParams(config, np.random.default_rng(args.seed))
    history = train(
        params,
        corpus,
        TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch,
            max_lr=args.lr,
            warmup_fraction=args.warmup,
            weight_decay=args.weight_decay,
            clip_norm=args.clip,
            seed=args.seed,
            log_every=args.log_every,
        ),
        dev_corpus=dev_corpus,
        checkpoint_path=args.model,
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
    )
    for epoch, loss in enumerate(history.train_loss, start=1):
        dev = f"\t{history.dev_loss[epoch - 1]:.6f}" if history.dev_loss else ""
        print(f"epoch\t{epoch}\t{loss:.6f}{dev}")
    return 0


def cmd_translate(args) -> int:
    nm.set_precision(args.precision)
    params, src_vocab, tgt_vocab = load_checkpoint(args.model)
    sentences = _read_sentences(args.src)
    dictionary = None
    if args.mode == "dict":
        if not args.dict:
            print("error: --mode dict requires --dict", file=sys.stderr)
            return 2
        dictionary = load_dictionary(args.dict)

    results = []
    for raw in sentences:
        if not raw:
            raise DataError("empty line in translation input")
        ids = src_vocab.encode(raw)
        if args.mode == "beam":
            results.append(beam_search(params, ids, args.beam, tgt_vocab))
        elif args.mode == "dict":
            results.append(dict_greedy_decode(params, raw, ids, dictionary, tgt_vocab, max_len=args.max_len))
        else:
            results.append(greedy_decode(params, ids, tgt_vocab, max_len=args.max_len))

    out_path = Path(args.out) if args.out else None
    lines = [" ".join(r.tokens) for r in results]
    if out_path:
        out_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    else:
        for line in lines:
            print(line)
    if args.trace:
        traces = [r.trace for r in results]
        if any(t is None for t in traces):
            logger.warning("beam search records no trace; skipping %s", args.trace)
        else:
            write_traces(traces, args.trace)
    return 0


def cmd_eval(args) -> int:
    hyps = _read_sentences(args.hyp)
    refs = _read_sentences(args.ref)
    report = EvalReport(
        bleu=bleu_score(hyps, refs, smooth=args.smooth),
        sentences=len(hyps),
    )
    if args.model:
        _, src_vocab, tgt_vocab = load_checkpoint(args.model)
        if args.src:
            report.src_oov_rate = oov_rate(_read_sentences(args.src), src_vocab)
        report.tgt_oov_rate = oov_rate(refs, tgt_vocab)
    if args.trace:
        traces = read_traces(args.trace)
        report.lookup = lookup_ratio(traces)
        report.truncated = sum(1 for t in traces if t.truncated)
    for line in report.to_lines():
        print(line)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phrasemt",
        description="Phrase-to-phrase neural translation: prep, train, translate, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="build vocabularies and masked corpora")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--vocab-threshold", type=int, default=1)
    p.add_argument("--max-len", type=int, default=175)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--dev-src")
    p.add_argument("--dev-tgt")
    p.add_argument("--model", required=True, help="checkpoint output path")
    p.add_argument("--vocab-threshold", type=int, default=1)
    p.add_argument("--max-len", type=int, default=175)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--l-src", type=int, default=4)
    p.add_argument("--l-tgt", type=int, default=4)
    p.add_argument("--encoder-layers", type=int, default=2)
    p.add_argument("--tgt-encoder-layers", type=int, default=2)
    p.add_argument("--decoder-layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--max-decode-len", type=int, default=100)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    _add_precision_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a source file")
    p.add_argument("--src", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="hypothesis output path (default: stdout)")
    p.add_argument("--mode", choices=("greedy", "beam", "dict"), default="greedy")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--dict", help="phrase dictionary TSV (for --mode dict)")
    p.add_argument("--trace", help="write per-segment decode traces here")
    p.add_argument("--max-len", type=int, default=None, help="decode length cap")
    p.add_argument("--seed", type=int, default=0)
    _add_precision_flag(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--src", help="source file for OOV reporting")
    p.add_argument("--model", help="checkpoint supplying vocabularies for OOV rates")
    p.add_argument("--trace", help="decode trace file for lookup ratio")
    p.add_argument("--smooth", action="store_true", help="add-one smoothing for tiny corpora")
    p.set_defaults(func=cmd_eval)

    return parser


def cli_dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
