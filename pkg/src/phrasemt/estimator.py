"""Scikit-learn style front door for the translator.

`PhraseTranslator` is a `BaseEstimator`: constructor arguments are stored
verbatim (so `get_params` / `set_params` and grid search work), `fit`
takes aligned lists of pre-tokenized sentences, and `predict` returns
translations. The heavy lifting lives in the surrounding modules; this
class just packages corpus prep, training, and decoding.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import (
    ParallelCorpus,
    PhraseDictionary,
    apply_unk_mask,
    build_vocab,
)
from .decoding import beam_search, dict_greedy_decode, greedy_decode
from .metrics import bleu_score
from .model import ModelConfig, ModelParams
from .training import TrainConfig, train


def _as_token_lists(sentences, name: str) -> list[list[str]]:
    """Accept strings (whitespace-split) or token lists; reject empties."""
    if sentences is None or isinstance(sentences, (str, bytes)):
        raise ValueError(f"{name} must be a sequence of sentences")
    out = []
    for i, sent in enumerate(sentences):
        tokens = sent.split() if isinstance(sent, str) else list(sent)
        if not tokens:
            raise ValueError(f"{name}[{i}] is empty")
        if not all(isinstance(t, str) for t in tokens):
            raise ValueError(f"{name}[{i}] contains non-string tokens")
        out.append(tokens)
    if not out:
        raise ValueError(f"{name} is empty")
    return out


class PhraseTranslator(BaseEstimator):
    """Phrase-to-phrase translator with a fit/predict surface.

    Parameters mirror the model and trainer configuration; `mode`
    selects greedy, beam, or dictionary-augmented greedy decoding at
    predict time. `score` returns corpus BLEU (0-100).
    """

    def __init__(
        self,
        d: int = 64,
        l_src: int = 4,
        l_tgt: int = 4,
        encoder_layers: int = 1,
        tgt_encoder_layers: int = 1,
        decoder_layers: int = 1,
        heads: int = 4,
        dropout: float = 0.1,
        vocab_threshold: int = 1,
        epochs: int = 10,
        batch_size: int = 16,
        max_lr: float = 1e-3,
        weight_decay: float = 1e-4,
        max_decode_len: int = 50,
        mode: str = "greedy",
        beam: int = 4,
        dictionary: PhraseDictionary | None = None,
        seed: int = 0,
    ):
        self.d = d
        self.l_src = l_src
        self.l_tgt = l_tgt
        self.encoder_layers = encoder_layers
        self.tgt_encoder_layers = tgt_encoder_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.dropout = dropout
        self.vocab_threshold = vocab_threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.max_decode_len = max_decode_len
        self.mode = mode
        self.beam = beam
        self.dictionary = dictionary
        self.seed = seed

    # ------------------------------------------------------------------

    def fit(self, X, y, dev_X=None, dev_y=None):
        """Train on aligned source (X) and target (y) sentences."""
        src = _as_token_lists(X, "X")
        tgt = _as_token_lists(y, "y")
        if len(src) != len(tgt):
            raise ValueError(f"X and y lengths differ: {len(src)} vs {len(tgt)}")
        if self.mode not in ("greedy", "beam", "dict"):
            raise ValueError(f"unknown mode {self.mode!r}")

        corpus = ParallelCorpus.from_token_pairs(list(zip(src, tgt)))
        self.src_vocab_ = build_vocab(src, self.vocab_threshold)
        self.tgt_vocab_ = build_vocab(tgt, self.vocab_threshold)
        apply_unk_mask(corpus, self.src_vocab_, self.tgt_vocab_)

        dev_corpus = None
        if dev_X is not None and dev_y is not None:
            dev_corpus = ParallelCorpus.from_token_pairs(
                list(zip(_as_token_lists(dev_X, "dev_X"), _as_token_lists(dev_y, "dev_y")))
            )
            apply_unk_mask(dev_corpus, self.src_vocab_, self.tgt_vocab_)

        self.config_ = ModelConfig(
            src_vocab_size=len(self.src_vocab_),
            tgt_vocab_size=len(self.tgt_vocab_),
            d=self.d,
            l_src=self.l_src,
            l_tgt=self.l_tgt,
            encoder_layers=self.encoder_layers,
            tgt_encoder_layers=self.tgt_encoder_layers,
            decoder_layers=self.decoder_layers,
            heads=self.heads,
            dropout=self.dropout,
            max_decode_len=self.max_decode_len,
        )
        self.params_ = ModelParams(self.config_, np.random.default_rng(self.seed))
        self.history_ = train(
            self.params_,
            corpus,
            TrainConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                max_lr=self.max_lr,
                weight_decay=self.weight_decay,
                seed=self.seed,
            ),
            dev_corpus=dev_corpus,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("this PhraseTranslator is not fitted yet; call fit first")

    def predict(self, X) -> list[str]:
        """Translate each sentence; returns space-joined token strings."""
        return [" ".join(tokens) for tokens in self.predict_tokens(X)]

    def predict_tokens(self, X) -> list[list[str]]:
        self._check_fitted()
        sentences = _as_token_lists(X, "X")
        out = []
        for raw in sentences:
            ids = self.src_vocab_.encode(raw)
            if self.mode == "beam":
                result = beam_search(self.params_, ids, self.beam, self.tgt_vocab_)
            elif self.mode == "dict":
                dictionary = self.dictionary if self.dictionary is not None else PhraseDictionary()
                result = dict_greedy_decode(self.params_, raw, ids, dictionary, self.tgt_vocab_)
            else:
                result = greedy_decode(self.params_, ids, self.tgt_vocab_)
            out.append(result.tokens)
        return out

    def score(self, X, y) -> float:
        """Corpus BLEU of the predictions against y, on the 0-100 scale."""
        refs = _as_token_lists(y, "y")
        hyps = self.predict_tokens(X)
        return bleu_score(hyps, refs, smooth=True)
