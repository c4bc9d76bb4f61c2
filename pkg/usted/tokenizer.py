"""
Subword vocabularies shared by every task.

Ids 0-4 are reserved for PAD, BOS, EOS, MASK and UNK. Each word is prefixed
with the word marker so decoding restores single-space-separated text
exactly. Two schemes are supported: `char` (alphabet only) and `bpe`
(byte-pair merges learned on top of the alphabet).
"""

import hashlib
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from usted.constants import BOS, EOS, MASK, MASK_WORD, PAD, SPECIAL_TOKENS, UNK, WORD_MARKER
from usted.enum import CodableEnum

logger = logging.getLogger(__name__)

TokenSequence = List[int]

_HEADER = "#usted-vocab"


class TokenizerError(ValueError):
    """Vocabulary training, file or lookup failure."""


class Scheme(CodableEnum):
    CHAR = "char"
    BPE = "bpe"


def corpus_hash(lines: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def _symbols(word: str) -> Tuple[str, ...]:
    return (WORD_MARKER, *word)


class Vocabulary:
    """
    Bijective token <-> id mapping plus the ordered merge list for `bpe`.

    Immutable after construction; `encode` and `decode` are safe to call
    from several threads.
    """

    def __init__(
        self,
        tokens: Sequence[str],
        scheme: Scheme = Scheme.CHAR,
        merges: Sequence[Tuple[str, str]] = (),
        source_hash: str = "",
    ):
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise TokenizerError(f"vocabulary must start with the reserved tokens {SPECIAL_TOKENS}")
        self._tokens = tuple(tokens)
        self._ids: Dict[str, int] = {}
        for i, token in enumerate(self._tokens):
            if token in self._ids:
                raise TokenizerError(f"duplicate token {token!r} at ids {self._ids[token]} and {i}")
            self._ids[token] = i
        self.scheme = Scheme(scheme)
        self._merges = tuple((str(a), str(b)) for a, b in merges)
        self._ranks = {pair: rank for rank, pair in enumerate(self._merges)}
        for a, b in self._merges:
            if a + b not in self._ids:
                raise TokenizerError(f"merge ({a!r}, {b!r}) produces {a + b!r}, which is not in the vocabulary")
        self.source_hash = source_hash
        self._cache: Dict[str, Tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens \
            and self._merges == other._merges and self.scheme == other.scheme

    def __repr__(self) -> str:
        return f"Vocabulary(scheme={self.scheme.value}, size={len(self)})"

    @property
    def tokens(self) -> Tuple[str, ...]:
        return self._tokens

    @property
    def merges(self) -> Tuple[Tuple[str, str], ...]:
        return self._merges

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise TokenizerError(f"token id {token_id} out of range for vocabulary of size {len(self)}")
        return self._tokens[token_id]

    # ---------------------------------------------------------------------------- #
    #                                   Encoding                                   #
    # ---------------------------------------------------------------------------- #
    def segment(self, word: str) -> List[str]:
        """Subword pieces of one word (marker included); unknown characters stay single pieces."""
        symbols = list(_symbols(word))
        while len(symbols) > 1:
            ranked = [
                (self._ranks[pair], i)
                for i, pair in enumerate(zip(symbols, symbols[1:]))
                if pair in self._ranks
            ]
            if not ranked:
                break
            best = min(ranked)[0]
            pair = self._merges[best]
            merged, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def _encode_word(self, word: str) -> Tuple[int, ...]:
        ids = self._cache.get(word)
        if ids is None:
            ids = tuple(self._ids.get(piece, UNK) for piece in self.segment(word))
            self._cache[word] = ids
        return ids

    def encode(self, text: str) -> TokenSequence:
        return self.encode_words(text.split())

    def encode_words(self, words: Sequence[str], mask_word: Optional[str] = None) -> TokenSequence:
        """Encode pre-split words; entries equal to `mask_word`, when given, become a single MASK id."""
        ids: TokenSequence = []
        for word in words:
            if mask_word is not None and word == mask_word:
                ids.append(MASK)
            else:
                ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        pieces = []
        for token_id in ids:
            token_id = int(token_id)
            if token_id in (PAD, BOS, EOS):
                continue
            if token_id == MASK:
                pieces.append(WORD_MARKER + MASK_WORD)
            else:
                pieces.append(self.token_of(token_id))
        return " ".join("".join(pieces).replace(WORD_MARKER, " ").split())

    # ---------------------------------------------------------------------------- #
    #                                  Persistence                                 #
    # ---------------------------------------------------------------------------- #
    def dumps(self) -> str:
        lines = [f"{_HEADER} scheme={self.scheme.value} size={len(self)} corpus={self.source_hash}"]
        products = {a + b: (a, b) for a, b in self._merges}
        for token in self._tokens:
            if token in products:
                a, b = products[token]
                lines.append(f"{token}\t{a}\t{b}")
            else:
                lines.append(token)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.rstrip("\n").split("\n")
        header = lines[0].split()
        if not header or header[0] != _HEADER:
            raise TokenizerError(f"not a vocabulary file: header must start with {_HEADER!r}")
        fields = dict(item.split("=", 1) for item in header[1:])
        tokens, merges = [], []
        for line in lines[1:]:
            parts = line.split("\t")
            tokens.append(parts[0])
            if len(parts) == 3:
                merges.append((parts[1], parts[2]))
            elif len(parts) != 1:
                raise TokenizerError(f"malformed vocabulary line {line!r}")
        if int(fields.get("size", len(tokens))) != len(tokens):
            raise TokenizerError(f"header declares size {fields['size']}, file holds {len(tokens)} tokens")
        # merges are listed in rank order because merge tokens are appended in training order
        return cls(tokens, Scheme(fields.get("scheme", "char")), merges, fields.get("corpus", ""))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------- #
#                                   Training                                   #
# ---------------------------------------------------------------------------- #
def train_subword(
    corpus: Sequence[str],
    target_size: int,
    scheme: Union[Scheme, str] = Scheme.BPE,
    allow_smaller: bool = False,
) -> Vocabulary:
    """
    Learn a vocabulary from text lines.

    `char` yields the specials plus the alphabet (marker included). `bpe`
    then adds the most frequent adjacent pair as a new token until the
    vocabulary holds exactly `target_size` entries; ties go to the
    lexicographically smallest pair. Pairs whose concatenation already is a
    token are never merged, which keeps the mapping bijective.

    With `allow_smaller`, an unreachable target yields the largest
    vocabulary the corpus supports instead of an error.
    """
    scheme = Scheme(scheme) if not isinstance(scheme, Scheme) else scheme
    lines = [" ".join(line.split()) for line in corpus]
    counts = Counter(word for line in lines for word in line.split())
    if not counts:
        raise TokenizerError("cannot train a vocabulary on an empty corpus")

    alphabet = sorted({ch for word in counts for ch in word} | {WORD_MARKER})
    tokens = list(SPECIAL_TOKENS) + alphabet
    source = corpus_hash(lines)
    if scheme is Scheme.CHAR:
        logger.info("char vocabulary: %d entries", len(tokens))
        return Vocabulary(tokens, scheme, (), source)

    if target_size < len(tokens):
        raise TokenizerError(
            f"target size {target_size} must exceed the {len(alphabet)} alphabet symbols plus "
            f"{len(SPECIAL_TOKENS)} reserved tokens"
        )

    known = set(tokens)
    words = {word: _symbols(word) for word in counts}
    merges: List[Tuple[str, str]] = []
    while len(tokens) < target_size:
        pairs: Counter = Counter()
        for word, symbols in words.items():
            for pair in zip(symbols, symbols[1:]):
                if pair[0] + pair[1] not in known:
                    pairs[pair] += counts[word]
        if not pairs:
            if allow_smaller:
                logger.warning("corpus supports only %d of %d requested entries", len(tokens), target_size)
                break
            raise TokenizerError(
                f"target size {target_size} is unreachable: this corpus supports at most {len(tokens)} entries"
            )
        best = min(pairs, key=lambda pair: (-pairs[pair], pair))
        merged = best[0] + best[1]
        merges.append(best)
        tokens.append(merged)
        known.add(merged)
        for word, symbols in words.items():
            words[word] = _merge_pair(symbols, best)

    logger.info("bpe vocabulary: %d entries, %d merges", len(tokens), len(merges))
    return Vocabulary(tokens, scheme, merges, source)


def _merge_pair(symbols: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)
