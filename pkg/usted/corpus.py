"""
Synthetic text corpora: a weighted template grammar, word-substitution
ciphers that act as toy translation pairs, whole-word MLM corruption, and
tab-separated corpus manifests.
"""

import csv
import logging
import zlib
from dataclasses import field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from usted.constants import MASK_WORD
from usted.enum import CodableEnum
from usted.features import DataError
from usted.struct import structure

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------- #
#                                    Grammar                                   #
# ---------------------------------------------------------------------------- #
@structure
class Template:
    """Space-separated slots; a slot naming a lexicon category is filled, anything else is literal."""

    pattern: str
    weight: float = 1.0


@structure
class LexEntry:
    word: str
    weight: float = 1.0


@structure
class Grammar:
    templates: list[Template]
    lexicon: dict[str, list[LexEntry]]

    def validate(self) -> "Grammar":
        if not self.templates:
            raise DataError("grammar has no templates")
        for t in self.templates:
            if t.weight <= 0 or not t.pattern.split():
                raise DataError(f"template {t.pattern!r} needs a positive weight and at least one slot")
        for category, entries in self.lexicon.items():
            if not entries or any(e.weight <= 0 for e in entries):
                raise DataError(f"category {category!r} needs entries with positive weights")
        return self

    def template_probabilities(self) -> np.ndarray:
        w = np.array([t.weight for t in self.templates], dtype=np.float64)
        return w / w.sum()

    def category(self, name: str) -> Tuple[List[str], np.ndarray]:
        entries = self.lexicon[name]
        w = np.array([e.weight for e in entries], dtype=np.float64)
        return [e.word for e in entries], w / w.sum()

    def words(self) -> List[str]:
        """Every word the grammar can emit, sorted."""
        out = {e.word for entries in self.lexicon.values() for e in entries}
        for t in self.templates:
            out.update(slot for slot in t.pattern.split() if slot not in self.lexicon)
        return sorted(out)

    def unigram_distribution(self) -> Dict[str, float]:
        """Expected relative word frequency of a large generated corpus."""
        self.validate()
        expected: Dict[str, float] = {}
        mean_length = 0.0
        for p_t, t in zip(self.template_probabilities(), self.templates):
            slots = t.pattern.split()
            mean_length += p_t * len(slots)
            for slot in slots:
                if slot in self.lexicon:
                    words, p = self.category(slot)
                    for word, p_w in zip(words, p):
                        expected[word] = expected.get(word, 0.0) + p_t * p_w
                else:
                    expected[slot] = expected.get(slot, 0.0) + p_t
        return {word: value / mean_length for word, value in sorted(expected.items())}


def _zipf(words: str) -> list[LexEntry]:
    return [LexEntry(word, 1.0 / (rank + 1)) for rank, word in enumerate(words.split())]


def default_grammar() -> Grammar:
    """About a hundred lowercase words over seven categories."""
    return Grammar(
        templates=[
            Template("DET NOUN VERB DET NOUN", 3.0),
            Template("DET ADJ NOUN VERB DET NOUN", 2.0),
            Template("PRON VERB DET ADJ NOUN", 2.0),
            Template("DET NOUN VERB PREP DET NOUN", 2.0),
            Template("PRON VERB ADV", 1.0),
            Template("DET ADJ NOUN VERB ADV PREP DET NOUN", 1.0),
        ],
        lexicon={
            "DET": _zipf("the a this that every some my your"),
            "PRON": _zipf("she he they we you it i"),
            "ADJ": _zipf(
                "small red old quiet bright cold green happy tall dark "
                "young heavy soft loud warm"
            ),
            "NOUN": _zipf(
                "cat dog house river tree child bird garden window road "
                "teacher apple city boat letter song friend door table stone "
                "market horse lamp field mountain forest kitchen book"
            ),
            "VERB": _zipf(
                "sees likes finds takes holds moves opens reads wants builds "
                "follows paints carries watches helps calls visits keeps"
            ),
            "ADV": _zipf("slowly often today quickly again gently there now"),
            "PREP": _zipf("near under behind over with from into beside"),
        },
    )


# ---------------------------------------------------------------------------- #
#                                    Ciphers                                   #
# ---------------------------------------------------------------------------- #
class Reorder(CodableEnum):
    SWAP = "swap"
    SWAP_OFFSET = "swap-offset"


@structure
class CipherConfig:
    language: str = "xx"
    seed: int = 0
    reorder: Reorder = Reorder.SWAP


def _reorder(words: Sequence[str], rule: Reorder) -> List[str]:
    # swapping disjoint adjacent pairs is an involution
    out = list(words)
    for i in range(0 if rule is Reorder.SWAP else 1, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


class Cipher:
    """
    Word-substitution-plus-local-reordering map from English to a pseudo-language.

    Each English word maps to a distinct pseudo-word spelled from a
    language-specific syllable inventory. `decipher(encipher(s)) == s`.
    """

    CONSONANTS = "bcdfghjklmnprstvwz"
    VOWELS = "aeiou"

    def __init__(self, config: CipherConfig, words: Iterable[str]):
        self.config = config
        rng = np.random.default_rng([config.seed, zlib.crc32(config.language.encode("utf-8"))])
        consonants = sorted(rng.choice(list(self.CONSONANTS), size=10, replace=False))
        vowels = sorted(rng.choice(list(self.VOWELS), size=3, replace=False))

        self._forward: Dict[str, str] = {}
        used = set()
        for word in sorted(set(words)):
            syllables = 1 + len(word) // 3
            while True:
                pseudo = "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(syllables))
                if pseudo not in used:
                    break
                syllables += 1
            used.add(pseudo)
            self._forward[word] = pseudo
        self._inverse = {v: k for k, v in self._forward.items()}

    @property
    def language(self) -> str:
        return self.config.language

    def vocabulary(self) -> List[str]:
        return sorted(self._inverse)

    def _lookup(self, table: Dict[str, str], word: str) -> str:
        try:
            return table[word]
        except KeyError:
            raise DataError(f"cipher {self.language!r} has no entry for word {word!r}") from None

    def encipher(self, sentence: str) -> str:
        words = [self._lookup(self._forward, w) for w in sentence.split()]
        return " ".join(_reorder(words, self.config.reorder))

    def decipher(self, sentence: str) -> str:
        words = _reorder(sentence.split(), self.config.reorder)
        return " ".join(self._lookup(self._inverse, w) for w in words)


class SynthCorpus(NamedTuple):
    english: List[str]
    foreign: Optional[List[str]] = None


def synth_text_corpus(
    seed: int,
    n: int,
    grammar: Optional[Grammar] = None,
    cipher: Optional[Cipher] = None,
) -> SynthCorpus:
    """
    Draw `n` sentences from the grammar; with a cipher, also return the
    enciphered side aligned line by line.
    """
    grammar = (grammar or default_grammar()).validate()
    if n < 0:
        raise ValueError(f"sentence count must be non-negative, got {n}")
    rng = np.random.default_rng(seed)
    choice = rng.choice(len(grammar.templates), size=n, p=grammar.template_probabilities())
    sentences: List[Optional[str]] = [None] * n

    for t_index, template in enumerate(grammar.templates):
        rows = np.flatnonzero(choice == t_index)
        columns = []
        for slot in template.pattern.split():
            if slot in grammar.lexicon:
                words, p = grammar.category(slot)
                columns.append([words[k] for k in rng.choice(len(words), size=len(rows), p=p)])
            else:
                columns.append([slot] * len(rows))
        for j, row in enumerate(rows):
            sentences[row] = " ".join(column[j] for column in columns)

    english = [s for s in sentences if s is not None]
    foreign = [cipher.encipher(s) for s in english] if cipher is not None else None
    logger.debug("generated %d sentences (seed=%d)", n, seed)
    return SynthCorpus(english, foreign)


# ---------------------------------------------------------------------------- #
#                                  MLM masking                                 #
# ---------------------------------------------------------------------------- #
@structure
class CorruptionConfig:
    mask_rate: float = 0.4
    seed: int = field(default=0, metadata={"name": "rng_seed"})

    def __post_init__(self):
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError(f"mask_rate must lie in [0, 1], got {self.mask_rate}")


def corrupt_mlm(
    words: Sequence[str], cfg: CorruptionConfig, rng: np.random.Generator
) -> Tuple[List[str], List[str]]:
    """Replace each word by the mask word with probability `mask_rate`; the target is the original."""
    if not words:
        raise DataError("cannot corrupt an empty word sequence")
    masked = rng.random(len(words)) < cfg.mask_rate
    corrupted = [MASK_WORD if m else w for w, m in zip(words, masked)]
    return corrupted, list(words)


# ---------------------------------------------------------------------------- #
#                                   Manifests                                  #
# ---------------------------------------------------------------------------- #
class ManifestRow(NamedTuple):
    task: str
    input: str
    target: str


def write_manifest(path: Union[str, Path], rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", quoting=csv.QUOTE_NONE, lineterminator="\n")
        for row in rows:
            writer.writerow(row)


def read_manifest(path: Union[str, Path]) -> List[ManifestRow]:
    """Rows of (task, input, target); blank lines and `#` comments are skipped."""
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, fields_ in enumerate(csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
            if not fields_ or (len(fields_) == 1 and not fields_[0].strip()) or fields_[0].startswith("#"):
                continue
            if len(fields_) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields_)}")
            rows.append(ManifestRow(*fields_))
    return rows


def resolve_input(manifest: Union[str, Path], value: str) -> Path:
    """Feature paths in a manifest are relative to the manifest's directory."""
    path = Path(value)
    return path if path.is_absolute() else Path(manifest).parent / path
