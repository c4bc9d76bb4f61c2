"""
Scoring: edit-distance error rates, corpus BLEU, model perplexity, and the
hypothesis / score-report files.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Hashable, Iterable, List, NamedTuple, Sequence, Union

import editdistance
from sacrebleu.metrics import BLEU

from usted.model import Model
from usted.tasks import Batch

logger = logging.getLogger(__name__)

Words = Union[str, Sequence[Hashable]]


class MetricError(ValueError):
    """Scoring inputs violate a metric's preconditions."""


def _units(seq: Words) -> List[Hashable]:
    return seq.split() if isinstance(seq, str) else list(seq)


def edit_distance(ref: Words, hyp: Words) -> int:
    """Minimal substitutions + deletions + insertions turning `ref` into `hyp`."""
    return int(editdistance.eval(_units(ref), _units(hyp)))


def wer(ref: Words, hyp: Words) -> float:
    """Word error rate; strings are split on whitespace."""
    ref_units = _units(ref)
    if not ref_units:
        raise MetricError("word error rate is undefined for an empty reference")
    return edit_distance(ref_units, hyp) / len(ref_units)


def token_error_rate(ref: Sequence[int], hyp: Sequence[int]) -> float:
    if len(ref) == 0:
        raise MetricError("token error rate is undefined for an empty reference")
    return edit_distance(list(ref), list(hyp)) / len(ref)


class ErrorRate:
    """Running corpus error rate: total edits over total reference length."""

    def __init__(self):
        self.edits = 0
        self.length = 0

    def update(self, ref: Words, hyp: Words) -> None:
        ref_units = _units(ref)
        self.edits += edit_distance(ref_units, hyp)
        self.length += len(ref_units)

    def score(self) -> float:
        if self.length == 0:
            raise MetricError("corpus error rate is undefined for empty references")
        return self.edits / self.length

    def reset(self) -> None:
        self.edits = 0
        self.length = 0


def corpus_wer(refs: Sequence[Words], hyps: Sequence[Words]) -> float:
    if len(refs) != len(hyps):
        raise MetricError(f"{len(refs)} references but {len(hyps)} hypotheses")
    rate = ErrorRate()
    for ref, hyp in zip(refs, hyps):
        rate.update(ref, hyp)
    return rate.score()


def bleu(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """
    Single-reference corpus BLEU in [0, 100] over whitespace tokens.

    1- to 4-gram clipped precisions, add-one smoothing on the 2- to 4-gram
    precisions, brevity penalty exp(1 - r/c) when the hypotheses are shorter.
    """
    if len(refs) != len(hyps):
        raise MetricError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise MetricError("BLEU needs at least one sentence pair")
    scorer = BLEU(tokenize="none", smooth_method="add-k", smooth_value=1, force=True)
    hyps = [" ".join(_units(h)) for h in hyps]
    refs = [" ".join(_units(r)) for r in refs]
    return float(scorer.corpus_score(hyps, [refs]).score)


def perplexity(model: Model, batches: Iterable[Batch]) -> float:
    """exp of the mean per-token NLL over the batches' targets (EOS included)."""
    nll, tokens = 0.0, 0
    for batch in batches:
        nll += float(model.forward_nll(batch).per_sample.sum())
        tokens += batch.token_count
    if tokens == 0:
        raise MetricError("perplexity needs at least one target token")
    return math.exp(nll / tokens)


# ---------------------------------------------------------------------------- #
#                                     Files                                    #
# ---------------------------------------------------------------------------- #
class Score(NamedTuple):
    metric: str
    dataset: str
    value: float


def write_hypotheses(path: Union[str, Path], lines: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def read_hypotheses(path: Union[str, Path]) -> List[str]:
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]


def write_score_report(path: Union[str, Path], scores: Iterable[Score]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(Score._fields)
        for s in scores:
            writer.writerow([s.metric, s.dataset, f"{s.value:.6f}"])
