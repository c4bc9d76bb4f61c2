"""
Autoregressive decoding: beam search over any step function, model-bound
beam and batched greedy decoding, and a thread fan-out over samples.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from usted.constants import BOS, EOS
from usted.features import FrameSequence
from usted.model import Model
from usted.struct import structure
from usted.tasks import Modality, Sample

logger = logging.getLogger(__name__)

StepFn = Callable[[Any, np.ndarray], Tuple[np.ndarray, Any]]
SelectFn = Callable[[Any, Sequence[int]], Any]


class DecodeError(ValueError):
    """Input cannot be decoded."""


@structure
class DecodeConfig:
    beam: int = 1
    # 0 selects 2 * input length + 10
    max_length: int = 0
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError(f"beam width must be at least 1, got {self.beam}")
        if self.max_length < 0:
            raise ValueError(f"max_length must be non-negative, got {self.max_length}")

    def limit(self, input_length: int) -> int:
        return self.max_length or 2 * input_length + 10


class Hypothesis(NamedTuple):
    tokens: Tuple[int, ...]
    score: float
    finished: bool = False

    def normalized(self, length_penalty: float) -> float:
        return self.score + length_penalty * len(self.tokens)

    def ids(self) -> List[int]:
        """Tokens without the closing EOS."""
        return list(self.tokens[:-1] if self.finished else self.tokens)


def _rank(h: Hypothesis, length_penalty: float):
    return -h.normalized(length_penalty), h.tokens


def beam_search(
    step: StepFn,
    state: Any,
    select: SelectFn,
    width: int,
    max_length: int,
    length_penalty: float = 0.0,
    bos: int = BOS,
    eos: int = EOS,
) -> Hypothesis:
    """
    Fixed-width beam search.

    `step(state, prev)` maps the live rows' previous tokens to a rows x V
    log-probability matrix and the next state; `select(state, rows)` keeps
    the given rows. Scores are summed log-probabilities plus
    `length_penalty` per emitted token; equal scores go to the lower token
    sequence. Hypotheses still open at `max_length` compete unfinished.
    """
    if width < 1:
        raise ValueError(f"beam width must be at least 1, got {width}")
    live = [Hypothesis((), 0.0)]
    finished: List[Hypothesis] = []
    prev = np.array([bos], dtype=np.int64)

    for _ in range(max_length):
        log_probs, state = step(state, prev)
        candidates = []
        for row, hyp in enumerate(live):
            for token, lp in enumerate(log_probs[row]):
                candidates.append((Hypothesis(hyp.tokens + (token,), hyp.score + float(lp), token == eos), row))
        candidates.sort(key=lambda c: _rank(c[0], length_penalty))

        live, rows = [], []
        for hyp, row in candidates[:width]:
            if hyp.finished:
                finished.append(hyp)
            else:
                live.append(hyp)
                rows.append(row)
        if not live:
            break
        if finished and length_penalty <= 0:
            best_done = min(_rank(h, length_penalty) for h in finished)
            if best_done[0] <= -live[0].normalized(length_penalty):
                break
        state = select(state, rows)
        prev = np.array([h.tokens[-1] for h in live], dtype=np.int64)

    pool = finished + live
    return min(pool, key=lambda h: _rank(h, length_penalty))


def nested_beam_search(step_factory: Callable[[], Tuple[StepFn, Any, SelectFn]], width: int, max_length: int,
                       length_penalty: float = 0.0) -> Hypothesis:
    """Best hypothesis over searches of width 1..`width`, so the result never worsens as width grows."""
    best: Optional[Hypothesis] = None
    for w in range(1, width + 1):
        step, state, select = step_factory()
        hyp = beam_search(step, state, select, w, max_length, length_penalty)
        if best is None or _rank(hyp, length_penalty) < _rank(best, length_penalty):
            best = hyp
    return best


# ---------------------------------------------------------------------------- #
#                                 Model-bound                                  #
# ---------------------------------------------------------------------------- #
def _single_input(model: Model, q: int, source) -> Tuple[np.ndarray, np.ndarray]:
    if model.slot(q).modality is Modality.NONE:
        return np.zeros((1, 0), dtype=np.int64), np.zeros(1, dtype=np.int64)
    if isinstance(source, FrameSequence):
        inputs = source.frames[None]
    else:
        inputs = np.asarray(source, dtype=np.int64).reshape(1, -1)
    if inputs.shape[1] == 0:
        raise DecodeError(f"task {model.slot(q).name!r}: nothing to decode from an empty input")
    return inputs, np.array([inputs.shape[1]], dtype=np.int64)


def beam_decode(model: Model, q: int, source, cfg: DecodeConfig = DecodeConfig()) -> Hypothesis:
    """Decode one input (stacked frames or token ids) of task q."""
    inputs, lengths = _single_input(model, q, source)
    memory = model.encode(q, inputs, lengths)

    def step(state, prev):
        dec, mem = state
        log_probs, dec, _ = model.decode_step(dec, prev, mem)
        return log_probs.data, (dec, mem)

    def select(state, rows):
        dec, mem = state
        return dec.select(rows), mem.select(rows)

    def factory():
        return step, (model.initial_state(1), memory), select

    return nested_beam_search(factory, cfg.beam, cfg.limit(int(lengths[0])), cfg.length_penalty)


def greedy_decode_batch(model: Model, q: int, inputs: np.ndarray, lengths: np.ndarray,
                        max_length: int = 0) -> List[List[int]]:
    """Stepwise argmax for a whole batch; per-sample limit 2 * length + 10 unless `max_length` is set."""
    lengths = np.asarray(lengths, dtype=np.int64)
    memory = model.encode(q, inputs, lengths)
    limits = np.full(len(lengths), max_length) if max_length else 2 * lengths + 10
    state = model.initial_state(len(lengths))
    prev = np.full(len(lengths), BOS, dtype=np.int64)
    outputs: List[List[int]] = [[] for _ in lengths]
    done = np.zeros(len(lengths), dtype=bool)
    for _ in range(int(limits.max())):
        log_probs, state, _ = model.decode_step(state, prev, memory)
        prev = np.argmax(log_probs.data, axis=-1)
        for b in np.flatnonzero(~done):
            if prev[b] == EOS:
                done[b] = True
            else:
                outputs[b].append(int(prev[b]))
                if len(outputs[b]) >= limits[b]:
                    done[b] = True
        if done.all():
            break
    return outputs


def decode_samples(model: Model, samples: Sequence[Sample], cfg: DecodeConfig = DecodeConfig(),
                   workers: int = 1) -> List[List[int]]:
    """Beam-decode samples on up to `workers` threads; output order follows `samples`."""
    def run(sample: Sample) -> List[int]:
        return beam_decode(model, sample.task, sample.input, cfg).ids()

    if workers <= 1:
        return [run(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="usted-decode") as pool:
        return list(pool.map(run, samples))


def decode_dataset(model: Model, dataset, cfg: DecodeConfig = DecodeConfig(), workers: int = 1,
                   seed: int = 0) -> List[List[int]]:
    """
    Beam-decode every sample of a dataset against a frozen snapshot of the
    parameters. Corrupted text inputs are drawn with one generator per index.
    """
    frozen = model.snapshot()
    samples = [dataset.sample(i, np.random.default_rng([seed, i])) for i in range(len(dataset))]
    logger.info("decoding %d samples of task %s (beam %d, %d workers)",
                len(samples), frozen.slot(dataset.task).name, cfg.beam, workers)
    return decode_samples(frozen, samples, cfg, workers)
