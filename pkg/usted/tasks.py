"""
Task registry, per-task datasets, padded batches and uniform single-task
batch sampling.

A batch always holds samples of one task. The sampler draws the task
uniformly with replacement and walks an epoch-shuffled order inside each
task, dropping the remainder at the end of an epoch.
"""

import logging
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from usted.constants import BOS, EOS, MASK_WORD, PAD, STACK_FRAMES, STACK_STRIDE
from usted.corpus import CorruptionConfig, corrupt_mlm, read_manifest, resolve_input
from usted.enum import CodableEnum
from usted.features import DataError, FrameSequence, read_features, stack_downsample
from usted.struct import structure
from usted.tokenizer import Vocabulary

logger = logging.getLogger(__name__)

__all__ = [
    "Batch", "BatchPlan", "BatchSampler", "BatchStream", "DataError", "Modality", "Sample",
    "SpeechDataset", "TaskRegistry", "TaskSpec", "TextDataset", "encode_target", "load_datasets",
]


class Modality(CodableEnum):
    SPEECH = "speech"
    TEXT = "text"
    # decoder-only language modelling: empty input, zero context
    NONE = "none"


@structure
class TaskSpec:
    name: str
    modality: Modality
    vocabulary: Optional[str] = None
    corruption: Optional[CorruptionConfig] = None
    loss_weight: float = 1.0

    def __post_init__(self):
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ValueError(f"task name must be a non-empty word, got {self.name!r}")
        if self.loss_weight < 0:
            raise ValueError(f"task {self.name!r}: loss weight must be non-negative, got {self.loss_weight}")
        if self.modality is Modality.TEXT and not self.vocabulary:
            raise ValueError(f"text task {self.name!r} needs an input vocabulary")
        if self.modality is not Modality.TEXT and self.vocabulary:
            raise ValueError(f"{self.modality.value} task {self.name!r} takes no input vocabulary")
        if self.corruption is not None and self.modality is not Modality.TEXT:
            raise ValueError(f"only text tasks can be corrupted, {self.name!r} is {self.modality.value}")


class TaskRegistry:
    """Ordered task specs; a task's id is its position."""

    def __init__(self, specs: Sequence[TaskSpec]):
        if not specs:
            raise DataError("a task registry needs at least one task")
        self._specs = tuple(specs)
        self._index: Dict[str, int] = {}
        for q, spec in enumerate(self._specs):
            if spec.name in self._index:
                raise DataError(f"duplicate task name {spec.name!r}")
            self._index[spec.name] = q

    def __len__(self) -> int:
        return len(self._specs)

    def __iter__(self) -> Iterator[TaskSpec]:
        return iter(self._specs)

    def __getitem__(self, q: int) -> TaskSpec:
        if not 0 <= q < len(self._specs):
            raise DataError(f"unknown task id {q}; registry holds {len(self._specs)} tasks")
        return self._specs[q]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown task {name!r}; known tasks: {sorted(self._index)}") from None

    @property
    def names(self) -> List[str]:
        return [s.name for s in self._specs]


# ---------------------------------------------------------------------------- #
#                               Samples & batches                              #
# ---------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Sample:
    task: int
    input: Union[FrameSequence, np.ndarray]
    target: np.ndarray

    def __post_init__(self):
        target = np.asarray(self.target, dtype=np.int64)
        if target.ndim != 1 or target.size < 1 or target[-1] != EOS:
            raise DataError("a target must be a non-empty id sequence ending in EOS")
        object.__setattr__(self, "target", target)
        if not isinstance(self.input, FrameSequence):
            ids = np.asarray(self.input, dtype=np.int64).reshape(-1)
            if np.isin(ids, (PAD, BOS, EOS)).any():
                raise DataError("input tokens must not contain PAD, BOS or EOS")
            object.__setattr__(self, "input", ids)

    @property
    def input_length(self) -> int:
        return len(self.input)


def encode_target(vocab: Vocabulary, text: str) -> np.ndarray:
    return np.asarray(vocab.encode(text) + [EOS], dtype=np.int64)


@dataclass(frozen=True)
class Batch:
    """
    Padded block of one task's samples.

    Speech inputs are B x N x D floats (zero padded), token inputs B x N ids
    (PAD padded), decoder-only inputs B x 0. Targets are B x U ids padded
    with PAD; lengths count real positions only.
    """

    task: int
    inputs: np.ndarray
    input_lengths: np.ndarray
    targets: np.ndarray
    target_lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    @property
    def is_speech(self) -> bool:
        return self.inputs.ndim == 3

    @property
    def token_count(self) -> int:
        return int(self.target_lengths.sum())

    def input_mask(self) -> np.ndarray:
        return np.arange(self.inputs.shape[1])[None, :] < self.input_lengths[:, None]

    def target_mask(self) -> np.ndarray:
        return np.arange(self.targets.shape[1])[None, :] < self.target_lengths[:, None]

    @classmethod
    def collate(cls, task: int, samples: Sequence[Sample], input_pad_to: int = 0, target_pad_to: int = 0) -> "Batch":
        if not samples:
            raise DataError("cannot collate an empty batch")
        if any(s.task != task for s in samples):
            raise DataError(f"batch for task {task} contains samples of other tasks")

        input_lengths = np.array([s.input_length for s in samples], dtype=np.int64)
        target_lengths = np.array([len(s.target) for s in samples], dtype=np.int64)
        n = max(int(input_lengths.max()), input_pad_to)
        u = max(int(target_lengths.max()), target_pad_to)

        if isinstance(samples[0].input, FrameSequence):
            dim = samples[0].input.dim
            inputs = np.zeros((len(samples), n, dim))
            for b, s in enumerate(samples):
                if not isinstance(s.input, FrameSequence) or s.input.dim != dim:
                    raise DataError("speech batch mixes frame widths or input kinds")
                inputs[b, :len(s.input)] = s.input.frames
        else:
            inputs = np.full((len(samples), n), PAD, dtype=np.int64)
            for b, s in enumerate(samples):
                inputs[b, :len(s.input)] = s.input

        targets = np.full((len(samples), u), PAD, dtype=np.int64)
        for b, s in enumerate(samples):
            targets[b, :len(s.target)] = s.target
        return cls(task, inputs, input_lengths, targets, target_lengths)

    def padded(self, extra_inputs: int = 0, extra_targets: int = 0) -> "Batch":
        """Same batch with additional padding positions appended."""
        if self.is_speech:
            inputs = np.pad(self.inputs, ((0, 0), (0, extra_inputs), (0, 0)))
        else:
            inputs = np.pad(self.inputs, ((0, 0), (0, extra_inputs)), constant_values=PAD)
        targets = np.pad(self.targets, ((0, 0), (0, extra_targets)), constant_values=PAD)
        return Batch(self.task, inputs, self.input_lengths, targets, self.target_lengths)

    def subset(self, indices: Sequence[int]) -> "Batch":
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.task, self.inputs[idx], self.input_lengths[idx], self.targets[idx], self.target_lengths[idx])


# ---------------------------------------------------------------------------- #
#                                   Datasets                                   #
# ---------------------------------------------------------------------------- #
class SpeechDataset:
    """Feature sequences paired with transcripts; frames are stacked once at construction."""

    modality = Modality.SPEECH

    def __init__(
        self,
        task: int,
        features: Sequence[FrameSequence],
        transcripts: Sequence[str],
        output_vocab: Vocabulary,
        stack: int = STACK_FRAMES,
        stride: int = STACK_STRIDE,
    ):
        if len(features) != len(transcripts):
            raise DataError(f"{len(features)} feature sequences but {len(transcripts)} transcripts")
        self.task = task
        self.inputs = [stack_downsample(f, stack, stride) for f in features]
        self.transcripts = list(transcripts)
        self.targets = [encode_target(output_vocab, t) for t in self.transcripts]

    def __len__(self) -> int:
        return len(self.inputs)

    def sample(self, index: int, rng: Optional[np.random.Generator] = None) -> Sample:
        return Sample(self.task, self.inputs[index], self.targets[index])


class TextDataset:
    """
    Text-to-text pairs. Without an input vocabulary the task is decoder-only
    and inputs are empty; with a corruption config the input side is masked
    word by word each time a sample is drawn.
    """

    def __init__(
        self,
        task: int,
        inputs: Sequence[str],
        targets: Sequence[str],
        output_vocab: Vocabulary,
        input_vocab: Optional[Vocabulary] = None,
        corruption: Optional[CorruptionConfig] = None,
    ):
        if len(inputs) != len(targets):
            raise DataError(f"{len(inputs)} inputs but {len(targets)} targets")
        if corruption is not None and input_vocab is None:
            raise DataError("a corrupted text task needs an input vocabulary")
        self.task = task
        self.modality = Modality.TEXT if input_vocab is not None else Modality.NONE
        self.input_vocab = input_vocab
        self.corruption = corruption
        self.words = [line.split() for line in inputs]
        self.transcripts = list(targets)
        self.targets = [encode_target(output_vocab, t) for t in self.transcripts]
        if self.modality is Modality.TEXT:
            if any(not w for w in self.words):
                raise DataError("text task inputs must be non-empty")
            self._clean = [np.asarray(input_vocab.encode_words(w), dtype=np.int64) for w in self.words]

    def __len__(self) -> int:
        return len(self.targets)

    def sample(self, index: int, rng: Optional[np.random.Generator] = None) -> Sample:
        if self.modality is Modality.NONE:
            return Sample(self.task, np.zeros(0, dtype=np.int64), self.targets[index])
        if self.corruption is None or self.corruption.mask_rate == 0.0:
            return Sample(self.task, self._clean[index], self.targets[index])
        if rng is None:
            raise DataError("corrupted text samples need a random generator")
        corrupted, _ = corrupt_mlm(self.words[index], self.corruption, rng)
        ids = self.input_vocab.encode_words(corrupted, mask_word=MASK_WORD)
        return Sample(self.task, np.asarray(ids, dtype=np.int64), self.targets[index])


Dataset = Union[SpeechDataset, TextDataset]


def load_datasets(
    manifest: Union[str, Path],
    registry: TaskRegistry,
    output_vocab: Vocabulary,
    input_vocabs: Mapping[str, Vocabulary],
    skip_unknown: bool = False,
) -> List[Dataset]:
    """
    One dataset per registered task from a tab-separated manifest. Rows of
    unregistered tasks are an error unless `skip_unknown` is set.
    """
    rows: Dict[str, list] = {name: [] for name in registry.names}
    for row in read_manifest(manifest):
        if row.task not in rows:
            if skip_unknown:
                continue
            raise DataError(f"{manifest}: row for unregistered task {row.task!r}")
        rows[row.task].append(row)

    datasets: List[Dataset] = []
    for q, spec in enumerate(registry):
        task_rows = rows[spec.name]
        if spec.modality is Modality.SPEECH:
            features = [read_features(resolve_input(manifest, r.input)) for r in task_rows]
            datasets.append(SpeechDataset(q, features, [r.target for r in task_rows], output_vocab))
        else:
            input_vocab = None
            if spec.modality is Modality.TEXT:
                if spec.vocabulary not in input_vocabs:
                    raise DataError(f"task {spec.name!r} refers to unknown vocabulary {spec.vocabulary!r}")
                input_vocab = input_vocabs[spec.vocabulary]
            datasets.append(TextDataset(
                q, [r.input for r in task_rows], [r.target for r in task_rows],
                output_vocab, input_vocab, spec.corruption,
            ))
        logger.debug("task %s: %d samples from %s", spec.name, len(task_rows), manifest)
    return datasets


# ---------------------------------------------------------------------------- #
#                                   Sampling                                   #
# ---------------------------------------------------------------------------- #
class BatchPlan(NamedTuple):
    task: int
    indices: tuple
    seed: int


class BatchSampler:
    """
    Uniform task choice with replacement, epoch-shuffled order without
    replacement inside each task. Fully determined by `seed`.
    """

    def __init__(self, registry: TaskRegistry, datasets: Sequence[Dataset], batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        if len(datasets) != len(registry):
            raise DataError(f"{len(registry)} tasks registered but {len(datasets)} datasets given")
        for spec, ds in zip(registry, datasets):
            if len(ds) == 0:
                raise DataError(f"task {spec.name!r} has an empty dataset")
            if len(ds) < batch_size:
                raise DataError(f"task {spec.name!r} has {len(ds)} samples, fewer than the batch size {batch_size}")
        self.registry = registry
        self.datasets = list(datasets)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._shufflers = [np.random.default_rng([seed, q]) for q in range(len(registry))]
        self._orders = [np.empty(0, dtype=np.int64) for _ in registry]
        self._cursors = [0] * len(registry)
        self.epochs = [0] * len(registry)

    def next_plan(self) -> BatchPlan:
        q = int(self.rng.integers(len(self.registry)))
        seed = int(self.rng.integers(2**63))
        if self._cursors[q] + self.batch_size > len(self._orders[q]):
            self._orders[q] = self._shufflers[q].permutation(len(self.datasets[q]))
            self._cursors[q] = 0
            self.epochs[q] += 1
        start = self._cursors[q]
        self._cursors[q] += self.batch_size
        return BatchPlan(q, tuple(int(i) for i in self._orders[q][start:start + self.batch_size]), seed)

    def build(self, plan: BatchPlan) -> Batch:
        """Materialize a plan; a pure function of the plan and the datasets."""
        ds = self.datasets[plan.task]
        corruption = self.registry[plan.task].corruption
        rng = np.random.default_rng([plan.seed, corruption.seed if corruption else 0])
        return Batch.collate(plan.task, [ds.sample(i, rng) for i in plan.indices])

    def sample_batch(self) -> Batch:
        return self.build(self.next_plan())


class BatchStream:
    """
    Ordered prefetching of sampler batches on worker threads.

    Plans are drawn on the calling thread so the consuming order is the same
    as calling `sample_batch` repeatedly.
    """

    def __init__(self, sampler: BatchSampler, workers: int = 2, prefetch: int = 4):
        self.sampler = sampler
        self.prefetch = max(1, prefetch)
        self._pool = ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="usted-batch")
        self._pending: Deque[Future] = deque()

    def __enter__(self) -> "BatchStream":
        return self

    def __exit__(self, *exc) -> bool:
        self.close()
        return False

    def close(self) -> None:
        for f in self._pending:
            f.cancel()
        self._pending.clear()
        self._pool.shutdown(wait=True)

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        while len(self._pending) < self.prefetch:
            self._pending.append(self._pool.submit(self.sampler.build, self.sampler.next_plan()))
        return self._pending.popleft().result()
