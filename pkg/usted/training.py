"""
Joint multitask optimization.

Each step draws one single-task batch, minimizes the task-weighted,
token-normalized NLL with Adam after global-norm clipping, and appends a
row to the metrics log. Also covers standalone speech pretraining and the
transfer of its encoder into a multitask model.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from usted.checkpoint import Checkpoint, save_checkpoint
from usted.decoding import greedy_decode_batch
from usted.metrics import ErrorRate
from usted.model import Model, ModelConfig, ModelError, TaskSlot
from usted.numerics import NumericsError, Tape, backward, scale
from usted.optim import Adam, AdamConfig, clip_by_global_norm
from usted.struct import structure
from usted.tasks import Batch, BatchSampler, BatchStream, Dataset, Modality, TaskRegistry, TaskSpec

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "task", "loss", "grad_norm", "lr", "wall_ms")


class TrainingError(ValueError):
    """Training cannot continue; `step` is the failing step when known."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@structure
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    # overrides of TaskSpec.loss_weight, by task name
    loss_weights: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    eval_interval: int = 100
    log_every: int = 50
    workers: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError(f"need steps >= 0 and batch_size >= 1, got {self.steps} and {self.batch_size}")
        bad = {k: v for k, v in self.loss_weights.items() if v < 0}
        if bad:
            raise ValueError(f"loss weights must be non-negative: {bad}")


def resolve_loss_weights(registry: TaskRegistry, overrides: Mapping[str, float]) -> List[float]:
    unknown = sorted(set(overrides) - set(registry.names))
    if unknown:
        raise TrainingError(f"loss weights given for unknown tasks {unknown}")
    weights = [float(overrides.get(spec.name, spec.loss_weight)) for spec in registry]
    if not any(w > 0 for w in weights):
        raise TrainingError(f"at least one task needs a positive loss weight, got {weights}")
    return weights


# ---------------------------------------------------------------------------- #
#                                   One step                                   #
# ---------------------------------------------------------------------------- #
@dataclass
class TrainState:
    model: Model
    optimizer: Adam
    weights: List[float]
    step: int = 0


class StepMetrics(NamedTuple):
    step: int
    task: int
    loss: float
    grad_norm: float
    lr: float
    wall_ms: float
    objective: float


def objective_gradients(model: Model, batch: Batch, weight: float) -> Tuple[float, float, Dict[str, np.ndarray]]:
    """
    Weighted objective `weight * NLL / tokens` with its parameter gradients.

    Returns (objective, summed NLL, gradients before clipping).
    """
    with Tape():
        nll = model.forward_nll(batch)
        objective = scale(nll.loss, weight / batch.token_count)
    grads = backward(objective, model.params)
    return objective.item(), nll.loss.item(), grads


def joint_step(state: TrainState, batch: Batch) -> StepMetrics:
    """
    Advance `state` by one batch in place.

    A zero-weight task skips backward and the update entirely.
    """
    started = time.perf_counter()
    state.step += 1
    weight = state.weights[batch.task]
    if weight == 0.0:
        return StepMetrics(state.step, batch.task, float("nan"), 0.0, state.optimizer.lr,
                           (time.perf_counter() - started) * 1e3, 0.0)
    try:
        objective, nll, grads = objective_gradients(state.model, batch, weight)
    except (ModelError, NumericsError) as e:
        raise TrainingError(str(e), state.step) from e

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", state.step)
    clipped, norm, _ = clip_by_global_norm(grads, state.optimizer.config.clip_norm)
    state.optimizer.step(clipped)
    return StepMetrics(
        state.step, batch.task, nll / batch.token_count, norm, state.optimizer.lr,
        (time.perf_counter() - started) * 1e3, objective,
    )


class MetricsLog:
    """CSV sink with one row per step; `path=None` keeps rows in memory only."""

    def __init__(self, path: Optional[Union[str, Path]], task_names: Sequence[str]):
        self.task_names = list(task_names)
        self.rows: List[StepMetrics] = []
        self._file = open(path, "w", encoding="utf-8", newline="") if path else None
        self._writer = csv.writer(self._file, lineterminator="\n") if self._file else None
        if self._writer:
            self._writer.writerow(METRIC_COLUMNS)

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> bool:
        self.close()
        return False

    def append(self, m: StepMetrics) -> None:
        self.rows.append(m)
        if self._writer:
            self._writer.writerow([m.step, self.task_names[m.task], f"{m.loss:.8f}", f"{m.grad_norm:.8f}",
                                   f"{m.lr:g}", f"{m.wall_ms:.3f}"])

    def close(self) -> None:
        if self._file:
            self._file.close()
            self._file = None

    def losses(self, task: Optional[int] = None) -> List[float]:
        return [m.loss for m in self.rows if task is None or m.task == task]


# ---------------------------------------------------------------------------- #
#                                Dev evaluation                                #
# ---------------------------------------------------------------------------- #
def dev_error_rates(model: Model, datasets: Sequence[Dataset], seed: int = 0, batch_size: int = 16) -> List[float]:
    """Greedy-decoded corpus token error rate per task."""
    rates = []
    for ds in datasets:
        rate = ErrorRate()
        for start in range(0, len(ds), batch_size):
            stop = min(start + batch_size, len(ds))
            samples = [ds.sample(i, np.random.default_rng([seed, i])) for i in range(start, stop)]
            batch = Batch.collate(ds.task, samples)
            hyps = greedy_decode_batch(model, batch.task, batch.inputs, batch.input_lengths)
            for s, hyp in zip(samples, hyps):
                rate.update(s.target[:-1].tolist(), hyp)
        rates.append(rate.score())
    return rates


# ---------------------------------------------------------------------------- #
#                                  Train loops                                 #
# ---------------------------------------------------------------------------- #
class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    log: MetricsLog
    evaluations: List[Tuple[int, List[float]]]


def train_multitask(
    model: Model,
    registry: TaskRegistry,
    datasets: Sequence[Dataset],
    config: TrainConfig,
    dev: Optional[Sequence[Dataset]] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    metadata: Optional[dict] = None,
) -> TrainResult:
    """
    Sample-then-step for `config.steps` steps.

    With dev data, evaluates every `eval_interval` steps and at the end, and
    keeps the checkpoint with the lowest sum of per-task dev error rates;
    without, the final state is kept.
    """
    weights = resolve_loss_weights(registry, config.loss_weights)
    optimizer = Adam(model.params, config.optimizer)
    state = TrainState(model, optimizer, weights)
    sampler = BatchSampler(registry, datasets, config.batch_size, config.seed)
    stream = BatchStream(sampler, workers=config.workers) if config.workers > 0 else None
    evaluations: List[Tuple[int, List[float]]] = []
    best: Optional[Checkpoint] = None
    best_criterion = float("inf")
    metadata = dict(metadata or {})

    logger.info("training %d steps over tasks %s (weights %s)", config.steps, registry.names, weights)
    with MetricsLog(metrics_path, registry.names) as log:
        try:
            for _ in range(config.steps):
                batch = next(stream) if stream else sampler.sample_batch()
                m = joint_step(state, batch)
                log.append(m)
                if config.log_every and m.step % config.log_every == 0:
                    logger.info("step %d task %s loss %.4f grad_norm %.3f",
                                m.step, registry[m.task].name, m.loss, m.grad_norm)

                if dev and (m.step % config.eval_interval == 0 or m.step == config.steps):
                    rates = dev_error_rates(model, dev, config.seed)
                    evaluations.append((m.step, rates))
                    criterion = float(sum(rates))
                    logger.info("step %d dev error rates %s (sum %.4f)", m.step,
                                dict(zip(registry.names, (round(r, 4) for r in rates))), criterion)
                    if criterion < best_criterion:
                        best_criterion = criterion
                        best = Checkpoint.capture(
                            model, m.step, config.seed, optimizer, sampler.rng,
                            {**metadata, "criterion": criterion, "dev_error_rates": rates},
                        )
        finally:
            if stream:
                stream.close()

    if best is None:
        best = Checkpoint.capture(model, state.step, config.seed, optimizer, sampler.rng, metadata)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, best)
    return TrainResult(best, log, evaluations)


def pretrain_config(config: ModelConfig, speech_task: str) -> ModelConfig:
    """Standalone speech model: one speech task, all encoder layers task-owned, no task embedding."""
    slot = config.tasks[config.task_index(speech_task)]
    if slot.modality is not Modality.SPEECH:
        raise TrainingError(f"task {speech_task!r} is {slot.modality.value}, pretraining needs a speech task")
    return config.replace(tasks=[TaskSlot(slot.name, Modality.SPEECH)], shared_layers=0, use_task_embedding=False)


def pretrain_asr(
    config: ModelConfig,
    speech_task: str,
    dataset: Dataset,
    train: TrainConfig,
    dev: Optional[Dataset] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    standalone = pretrain_config(config, speech_task)
    if dataset.task != 0:
        raise TrainingError(f"pretraining dataset must be task 0, got task {dataset.task}")
    model = Model.initialize(standalone, train.seed, salt="pretrain")
    registry = TaskRegistry([TaskSpec(speech_task, Modality.SPEECH)])
    return train_multitask(
        model, registry, [dataset], train.replace(loss_weights={}),
        dev=[dev] if dev is not None else None,
        metrics_path=metrics_path, checkpoint_path=checkpoint_path, metadata={"stage": "pretrain"},
    )


def _layer_prefix(config: ModelConfig, task: str, layer: int) -> str:
    if layer < config.modality_layers:
        return f"tasks.{task}.encoder.{layer}"
    return f"shared.encoder.{layer - config.modality_layers}"


def transfer(pretrained: Checkpoint, config: ModelConfig, speech_task: str, seed: int = 0) -> Model:
    """
    Fresh multitask model whose speech adapter and encoder stack come from
    the pretrained standalone model, split at layer L - K between the speech
    modality encoder and the shared encoder. Everything else is newly
    initialized.
    """
    source = pretrained.config
    speech = [t for t in source.tasks if t.modality is Modality.SPEECH]
    if len(speech) != 1:
        raise TrainingError(f"pretrained model must have exactly one speech task, found {len(speech)}")
    src_task = speech[0].name
    if config.tasks[config.task_index(speech_task)].modality is not Modality.SPEECH:
        raise TrainingError(f"transfer target {speech_task!r} is not a speech task")

    model = Model.initialize(config, seed, salt="multitask")
    pairs = [(f"tasks.{src_task}.adapter.{n}", f"tasks.{speech_task}.adapter.{n}") for n in ("weight", "bias")]
    for layer in range(min(source.encoder_layers, config.encoder_layers)):
        src, dst = _layer_prefix(source, src_task, layer), _layer_prefix(config, speech_task, layer)
        for direction in ("fwd", "bwd"):
            for n in ("w_x", "w_h", "b"):
                pairs.append((f"{src}.{direction}.{n}", f"{dst}.{direction}.{n}"))

    mismatched = []
    if source.encoder_layers != config.encoder_layers:
        mismatched.append(f"encoder_layers: {source.encoder_layers} != {config.encoder_layers}")
    for src, dst in pairs:
        if src not in pretrained.params:
            mismatched.append(f"{src}: missing")
        elif pretrained.params[src].shape != model[dst].shape:
            mismatched.append(f"{src} -> {dst}: {pretrained.params[src].shape} != {model[dst].shape}")
    if mismatched:
        raise TrainingError(f"cannot transfer pretrained encoder, mismatched keys: {mismatched}")

    for src, dst in pairs:
        model[dst].data = pretrained.params[src].copy()
    logger.info("transferred %d tensors from %s into %s (K=%d)", len(pairs), src_task, speech_task, config.shared_layers)
    return model
