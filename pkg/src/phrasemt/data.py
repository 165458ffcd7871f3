"""Corpus loading, vocabularies, UNK masking, and phrase dictionaries.

Tokenization is whitespace splitting of pre-tokenized text. Masking never
destroys raw surfaces: the decoder's dictionary branch and the evaluation
scripts both need the original words next to the masked ids.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

# Reserved vocabulary slots, fixed across every model and file format.
PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
DOLLAR_ID = 3  # end-of-segment symbol
EOS_ID = 4

RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<$>", "<eos>")
NUM_RESERVED = len(RESERVED_TOKENS)

DEFAULT_MAX_SENTENCE_LEN = 175


class DataError(Exception):
    """Malformed corpus or dictionary input."""


@dataclass
class Vocabulary:
    """Token/id bijection with fixed reserved ids in front."""

    tokens: list[str]  # non-reserved tokens, id = NUM_RESERVED + position
    _ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._ids = {tok: NUM_RESERVED + i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")
        for tok in RESERVED_TOKENS:
            if tok in self._ids:
                raise DataError(f"reserved surface {tok!r} used as a corpus token")

    def __len__(self) -> int:
        return NUM_RESERVED + len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids or token in RESERVED_TOKENS

    def to_id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def to_token(self, idx: int) -> str:
        if idx < NUM_RESERVED:
            return RESERVED_TOKENS[idx]
        return self.tokens[idx - NUM_RESERVED]

    def encode(self, words: list[str]) -> list[int]:
        return [self.to_id(w) for w in words]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.to_token(i) for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + ("\n" if self.tokens else ""), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.splitlines() if line])


def build_vocab(sentences: list[list[str]], threshold: int = 1) -> Vocabulary:
    """Keep tokens seen at least `threshold` times, most frequent first.

    Ties break lexicographically so the same corpus always yields the
    same id assignment.
    """
    if threshold < 1:
        raise DataError(f"threshold must be >= 1, got {threshold}")
    if not sentences:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for sent in sentences for tok in sent)
    kept = [tok for tok, n in counts.items() if n >= threshold]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept)


@dataclass
class Sentence:
    raw: list[str]
    ids: list[int] | None = None


@dataclass
class ParallelCorpus:
    """Aligned sentence pairs; raw tokens survive masking."""

    source: list[Sentence]
    target: list[Sentence]

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise DataError(
                f"side lengths differ: {len(self.source)} source vs {len(self.target)} target"
            )

    def __len__(self) -> int:
        return len(self.source)

    @classmethod
    def from_token_pairs(cls, pairs: list[tuple[list[str], list[str]]]) -> "ParallelCorpus":
        src, tgt = [], []
        for s, t in pairs:
            if not s or not t:
                raise DataError("empty sentence in corpus")
            src.append(Sentence(list(s)))
            tgt.append(Sentence(list(t)))
        return cls(src, tgt)


def load_parallel_corpus(
    src_path: str | Path,
    tgt_path: str | Path,
    max_len: int = DEFAULT_MAX_SENTENCE_LEN,
) -> ParallelCorpus:
    """Read aligned one-sentence-per-line files; drop over-length pairs."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"line counts differ: {len(src_lines)} in {src_path}, {len(tgt_lines)} in {tgt_path}"
        )
    src, tgt, dropped = [], [], 0
    for lineno, (s_line, t_line) in enumerate(zip(src_lines, tgt_lines), start=1):
        s_toks, t_toks = s_line.split(), t_line.split()
        if not s_toks or not t_toks:
            raise DataError(f"empty sentence at line {lineno}")
        if len(s_toks) > max_len or len(t_toks) > max_len:
            dropped += 1
            continue
        src.append(Sentence(s_toks))
        tgt.append(Sentence(t_toks))
    if dropped:
        logger.warning("dropped %d sentence pairs longer than %d tokens", dropped, max_len)
    return ParallelCorpus(src, tgt)


def apply_unk_mask(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> ParallelCorpus:
    """Fill in vocabulary ids; out-of-vocabulary tokens map to UNK."""
    for sent in corpus.source:
        sent.ids = src_vocab.encode(sent.raw)
    for sent in corpus.target:
        sent.ids = tgt_vocab.encode(sent.raw)
    return corpus


def oov_rate(sentences: list[list[str]], vocab: Vocabulary) -> float:
    """Fraction of tokens that map to UNK under `vocab`."""
    total = sum(len(s) for s in sentences)
    if total == 0:
        raise DataError("oov_rate of an empty corpus side")
    unk = sum(1 for s in sentences for tok in s if vocab.to_id(tok) == UNK_ID)
    return unk / total


# ---------------------------------------------------------------------------
# phrase dictionary
# ---------------------------------------------------------------------------


@dataclass
class PhraseDictionary:
    """Exact-match map from source phrases to candidate target phrases.

    Multiple candidates per key keep file order; decoding breaks score
    ties by that order.
    """

    entries: dict[tuple[str, ...], list[tuple[str, ...]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, phrase: tuple[str, ...]) -> bool:
        return tuple(phrase) in self.entries

    def lookup(self, phrase) -> list[tuple[str, ...]] | None:
        return self.entries.get(tuple(phrase))

    def add(self, source: tuple[str, ...], target: tuple[str, ...]) -> None:
        if not source or not target:
            raise DataError("empty phrase in dictionary entry")
        self.entries.setdefault(tuple(source), []).append(tuple(target))


def load_dictionary(path: str | Path) -> PhraseDictionary:
    """Parse a TSV of `source phrase<TAB>target phrase[<TAB>score]` lines.

    The optional score field is parsed but ignored: candidate choice is
    done by model rescoring, not by the extraction tool's score.
    """
    d = PhraseDictionary()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            src_phrase = tuple(fields[0].split())
            tgt_phrase = tuple(fields[1].split())
            if not src_phrase or not tgt_phrase:
                raise DataError(f"{path}:{lineno}: empty phrase")
            if len(fields) == 3:
                try:
                    float(fields[2])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad score field {fields[2]!r}") from exc
            d.add(src_phrase, tgt_phrase)
    return d


def save_dictionary(d: PhraseDictionary, path: str | Path) -> None:
    """Write entries back out in stored order (canonical two-field form)."""
    with open(path, "w", encoding="utf-8") as fh:
        for src_phrase, candidates in d.entries.items():
            for cand in candidates:
                fh.write(f"{' '.join(src_phrase)}\t{' '.join(cand)}\n")
