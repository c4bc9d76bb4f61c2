"""
Experiment configuration and run orchestration.

An `ExperimentConfig` names the tasks, the architecture knobs, training,
decoding, synthetic-data and corpus settings. It merges defaults, an
optional JSON file and command-line overrides, and is written verbatim into
every run directory it produces.

Data layout under `corpus.data_dir`:

    train.tsv, dev.tsv      manifests (task, input, target)
    features/*.feat         rendered speech features
    vocab.<name>.txt        vocabularies; `corpus.output_vocabulary` names the shared one
"""

import csv
import json
import logging
import os
from dataclasses import field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from usted.checkpoint import Checkpoint, load_checkpoint
from usted.constants import BASE_FEATURE_DIM, STACK_FRAMES
from usted.corpus import (
    Cipher,
    CipherConfig,
    CorruptionConfig,
    ManifestRow,
    default_grammar,
    read_manifest,
    synth_text_corpus,
    write_manifest,
)
from usted.decoding import DecodeConfig, decode_dataset
from usted.features import render_speech, write_features
from usted.metrics import Score, bleu, corpus_wer, perplexity, read_hypotheses, write_hypotheses, write_score_report
from usted.model import Model, ModelConfig, TaskSlot
from usted.numerics import GradCheckReport, check_parameter_gradients, stack, total
from usted.struct import structure
from usted.tasks import (
    Batch,
    Dataset,
    Modality,
    SpeechDataset,
    TaskRegistry,
    TaskSpec,
    TextDataset,
    load_datasets,
)
from usted.tokenizer import Scheme, Vocabulary, train_subword
from usted.training import TrainConfig, TrainResult, pretrain_asr, train_multitask, transfer

logger = logging.getLogger(__name__)

SEED_ENV = "USTED_SEED"
METRICS = ("wer", "bleu", "ter", "ppl")
SWEEP_AXES = ("shared-layers", "mask-rate", "loss-weight", "task-embedding")
SUMMARY_COLUMNS = ("point", "task", "metric", "value")


class UsageError(ValueError):
    """Invalid command-line usage or configuration, detected before any compute."""


# ---------------------------------------------------------------------------- #
#                                 Configuration                                #
# ---------------------------------------------------------------------------- #
@structure
class ArchitectureConfig:
    encoder_layers: int = 4
    shared_layers: int = 1
    hidden_units: int = 48
    input_dim: int = BASE_FEATURE_DIM * STACK_FRAMES
    attention_heads: int = 4
    attention_dim: int = 32
    decoder_layers: int = 2
    embedding_dim: int = 64
    use_task_embedding: bool = True


@structure
class SynthConfig:
    seed: int = 0
    asr_utterances: int = 2000
    text_sentences: int = 20000
    # held out per task, taken from the front of each generated corpus
    dev_size: int = 100
    noise: float = 0.1
    vocab_size: int = 150
    scheme: Scheme = Scheme.BPE

    def __post_init__(self):
        if min(self.asr_utterances, self.text_sentences, self.dev_size) < 1:
            raise ValueError("synthetic corpus sizes must be positive")
        if self.noise < 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")


@structure
class CorpusConfig:
    data_dir: str = "data"
    output_vocabulary: str = "text"
    # translation tasks by name
    ciphers: dict[str, CipherConfig] = field(default_factory=dict)

    @property
    def train_manifest(self) -> Path:
        return Path(self.data_dir) / "train.tsv"

    @property
    def dev_manifest(self) -> Path:
        return Path(self.data_dir) / "dev.tsv"

    def vocabulary_path(self, name: str) -> Path:
        return Path(self.data_dir) / f"vocab.{name}.txt"


def default_tasks() -> List[TaskSpec]:
    return [
        TaskSpec("asr", Modality.SPEECH),
        TaskSpec("mlm", Modality.TEXT, vocabulary="text", corruption=CorruptionConfig(mask_rate=0.4)),
    ]


@structure
class ExperimentConfig:
    tasks: list[TaskSpec] = field(default_factory=default_tasks)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    output_dir: str = "runs"
    # unset: USTED_SEED, then train.seed
    seed: Optional[int] = None

    def __post_init__(self):
        TaskRegistry(self.tasks)
        for name in self.corpus.ciphers:
            if name not in {t.name for t in self.tasks}:
                raise ValueError(f"cipher configured for unknown task {name!r}")

    @property
    def registry(self) -> TaskRegistry:
        return TaskRegistry(self.tasks)

    @property
    def speech_task(self) -> str:
        for t in self.tasks:
            if t.modality is Modality.SPEECH:
                return t.name
        raise UsageError("experiment has no speech task")


def default_experiment() -> ExperimentConfig:
    return ExperimentConfig()


def load_experiment(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Defaults, updated by the JSON file at `path` when given; the seed falls back to USTED_SEED."""
    if path is None:
        exp = default_experiment()
    else:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(data, dict):
            raise UsageError(f"{path}: expected a JSON object")
        try:
            exp = ExperimentConfig.from_json(data)
        except (TypeError, ValueError) as e:
            raise UsageError(f"{path}: {e}") from e
    if exp.seed is None and os.environ.get(SEED_ENV):
        try:
            exp = exp.replace(seed=int(os.environ[SEED_ENV]))
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    return exp


def effective_seed(exp: ExperimentConfig) -> int:
    return exp.seed if exp.seed is not None else exp.train.seed


def parse_loss_weight(text: str) -> Tuple[str, float]:
    """`task=weight` as given on the command line."""
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise UsageError(f"loss weight must look like task=weight, got {text!r}")
    try:
        return name, float(value)
    except ValueError:
        raise UsageError(f"loss weight for {name!r} is not a number: {value!r}") from None


def with_overrides(
    exp: ExperimentConfig,
    *,
    shared_layers: Optional[int] = None,
    mask_rate: Optional[float] = None,
    loss_weights: Optional[Mapping[str, float]] = None,
    task_embedding: Optional[bool] = None,
    steps: Optional[int] = None,
    batch_size: Optional[int] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    beam: Optional[int] = None,
    output_dir: Optional[str] = None,
    data_dir: Optional[str] = None,
) -> ExperimentConfig:
    """
    Apply command-line overrides. Every value is checked here so a bad flag
    fails with a `UsageError` before any data is read.
    """
    arch, train, tasks = exp.architecture, exp.train, list(exp.tasks)
    if shared_layers is not None:
        if not 0 <= shared_layers <= arch.encoder_layers:
            raise UsageError(f"--shared-layers {shared_layers} outside [0, {arch.encoder_layers}]")
        arch = arch.replace(shared_layers=shared_layers)
    if task_embedding is not None:
        arch = arch.replace(use_task_embedding=task_embedding)
    if mask_rate is not None:
        if not 0.0 <= mask_rate <= 1.0:
            raise UsageError(f"--mask-rate {mask_rate} outside [0, 1]")
        corrupted = [t for t in tasks if t.corruption is not None]
        if not corrupted:
            raise UsageError("--mask-rate given but no task is corrupted")
        tasks = [t.replace(corruption=t.corruption.replace(mask_rate=mask_rate)) if t.corruption else t
                 for t in tasks]
    if loss_weights:
        names = {t.name for t in tasks}
        for name, weight in loss_weights.items():
            if name not in names:
                raise UsageError(f"--loss-weight for unknown task {name!r}; tasks: {sorted(names)}")
            if weight < 0:
                raise UsageError(f"--loss-weight {name}={weight} must be non-negative")
        train = train.replace(loss_weights={**train.loss_weights, **loss_weights})
    if steps is not None:
        if steps < 0:
            raise UsageError(f"--steps {steps} must be non-negative")
        train = train.replace(steps=steps)
    if batch_size is not None:
        if batch_size < 1:
            raise UsageError(f"--batch-size {batch_size} must be positive")
        train = train.replace(batch_size=batch_size)
    if workers is not None:
        train = train.replace(workers=max(0, workers))
    decode = exp.decode
    if beam is not None:
        if beam < 1:
            raise UsageError(f"--beam {beam} must be at least 1")
        decode = decode.replace(beam=beam)

    exp = exp.replace(tasks=tasks, architecture=arch, train=train, decode=decode)
    if seed is not None:
        exp = exp.replace(seed=seed)
    if output_dir is not None:
        exp = exp.replace(output_dir=output_dir)
    if data_dir is not None:
        exp = exp.replace(corpus=exp.corpus.replace(data_dir=data_dir))
    seeded = exp.train.replace(seed=effective_seed(exp))
    return exp.replace(train=seeded)


def model_config(exp: ExperimentConfig, output_vocab: Vocabulary,
                 input_vocabs: Mapping[str, Vocabulary]) -> ModelConfig:
    slots = []
    for t in exp.tasks:
        size = len(input_vocabs[t.vocabulary]) if t.modality is Modality.TEXT else 0
        slots.append(TaskSlot(t.name, t.modality, size))
    a = exp.architecture
    return ModelConfig(
        tasks=slots,
        output_vocab_size=len(output_vocab),
        encoder_layers=a.encoder_layers,
        shared_layers=a.shared_layers,
        hidden_units=a.hidden_units,
        input_dim=a.input_dim,
        attention_heads=a.attention_heads,
        attention_dim=a.attention_dim,
        decoder_layers=a.decoder_layers,
        embedding_dim=a.embedding_dim,
        use_task_embedding=a.use_task_embedding,
    )


def prepare_run_dir(exp: ExperimentConfig, name: str) -> Path:
    """Create `<output_dir>/<name>` and write the effective config into it."""
    run_dir = Path(exp.output_dir) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(exp.to_json(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return run_dir


# ---------------------------------------------------------------------------- #
#                                Synthetic data                                #
# ---------------------------------------------------------------------------- #
class SynthSummary(NamedTuple):
    train_rows: int
    dev_rows: int
    vocabularies: Dict[str, int]


def _task_rows(exp: ExperimentConfig, q: int, spec: TaskSpec, data_dir: Path) -> List[ManifestRow]:
    s = exp.synth
    grammar = default_grammar()
    if spec.modality is Modality.SPEECH:
        english = synth_text_corpus(s.seed * 1000 + q, s.asr_utterances + s.dev_size, grammar).english
        rng = np.random.default_rng([s.seed, q])
        (data_dir / "features").mkdir(parents=True, exist_ok=True)
        rows = []
        for i, sentence in enumerate(english):
            rel = Path("features") / f"{spec.name}-{i:05d}.feat"
            write_features(data_dir / rel, render_speech(sentence, s.noise, rng))
            rows.append(ManifestRow(spec.name, rel.as_posix(), sentence))
        return rows

    n = s.text_sentences + s.dev_size
    if spec.modality is Modality.NONE:
        return [ManifestRow(spec.name, "-", e) for e in synth_text_corpus(s.seed * 1000 + q, n, grammar).english]
    if spec.corruption is not None:
        return [ManifestRow(spec.name, e, e) for e in synth_text_corpus(s.seed * 1000 + q, n, grammar).english]
    cipher_cfg = exp.corpus.ciphers.get(spec.name)
    if cipher_cfg is None:
        raise UsageError(f"translation task {spec.name!r} needs an entry in corpus.ciphers")
    cipher = Cipher(cipher_cfg, grammar.words())
    corpus = synth_text_corpus(s.seed * 1000 + q, n, grammar, cipher)
    return [ManifestRow(spec.name, f, e) for f, e in zip(corpus.foreign, corpus.english)]


def synthesize(exp: ExperimentConfig) -> SynthSummary:
    """Render every task's corpus, split train/dev, and train the vocabularies on the train split."""
    data_dir = Path(exp.corpus.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    train: List[ManifestRow] = []
    dev: List[ManifestRow] = []
    for q, spec in enumerate(exp.tasks):
        rows = _task_rows(exp, q, spec, data_dir)
        dev += rows[:exp.synth.dev_size]
        train += rows[exp.synth.dev_size:]
        logger.info("task %s: %d train, %d dev rows", spec.name, len(rows) - exp.synth.dev_size, exp.synth.dev_size)
    write_manifest(exp.corpus.train_manifest, train)
    write_manifest(exp.corpus.dev_manifest, dev)

    output_name = exp.corpus.output_vocabulary
    corpora: Dict[str, List[str]] = {output_name: [r.target for r in train]}
    for spec in exp.tasks:
        if spec.modality is Modality.TEXT and spec.vocabulary != output_name:
            corpora.setdefault(spec.vocabulary, []).extend(r.input for r in train if r.task == spec.name)
    sizes = {}
    for name, lines in corpora.items():
        vocab = train_subword(lines, exp.synth.vocab_size, exp.synth.scheme, allow_smaller=True)
        vocab.save(exp.corpus.vocabulary_path(name))
        sizes[name] = len(vocab)
    return SynthSummary(len(train), len(dev), sizes)


def tokenize(corpus: Union[str, Path], size: int, scheme: Union[Scheme, str], output: Union[str, Path]) -> Vocabulary:
    """Train a vocabulary on a plain-text file, one sentence per line."""
    lines = [line for line in Path(corpus).read_text(encoding="utf-8").splitlines() if line.strip()]
    vocab = train_subword(lines, size, scheme)
    vocab.save(output)
    return vocab


# ---------------------------------------------------------------------------- #
#                                   Training                                   #
# ---------------------------------------------------------------------------- #
def load_vocabularies(exp: ExperimentConfig) -> Tuple[Vocabulary, Dict[str, Vocabulary]]:
    output_name = exp.corpus.output_vocabulary
    output = Vocabulary.load(exp.corpus.vocabulary_path(output_name))
    inputs = {output_name: output}
    for spec in exp.tasks:
        if spec.modality is Modality.TEXT and spec.vocabulary not in inputs:
            inputs[spec.vocabulary] = Vocabulary.load(exp.corpus.vocabulary_path(spec.vocabulary))
    return output, inputs


class ExperimentData(NamedTuple):
    output_vocab: Vocabulary
    input_vocabs: Dict[str, Vocabulary]
    train: List[Dataset]
    dev: List[Dataset]


def load_data(exp: ExperimentConfig, skip_unknown: bool = False) -> ExperimentData:
    output, inputs = load_vocabularies(exp)
    registry = exp.registry
    train = load_datasets(exp.corpus.train_manifest, registry, output, inputs, skip_unknown)
    dev = load_datasets(exp.corpus.dev_manifest, registry, output, inputs, skip_unknown)
    return ExperimentData(output, inputs, train, dev)


def _check_input_dim(exp: ExperimentConfig) -> None:
    if any(t.modality is Modality.SPEECH for t in exp.tasks):
        expected = BASE_FEATURE_DIM * STACK_FRAMES
        if exp.architecture.input_dim != expected:
            raise UsageError(f"speech tasks need input_dim {expected} (stacked features), got "
                             f"{exp.architecture.input_dim}")


def run_pretrain(exp: ExperimentConfig, run_name: str = "pretrain") -> TrainResult:
    """Standalone speech model on the speech task's data alone."""
    _check_input_dim(exp)
    speech = exp.speech_task
    solo = exp.replace(tasks=[TaskSpec(speech, Modality.SPEECH)], corpus=exp.corpus.replace(ciphers={}))
    run_dir = prepare_run_dir(exp, run_name)
    data = load_data(solo, skip_unknown=True)
    config = model_config(solo, data.output_vocab, data.input_vocabs)
    return pretrain_asr(
        config, speech, data.train[0], exp.train, data.dev[0],
        metrics_path=run_dir / "metrics.csv", checkpoint_path=run_dir / "model.ckpt",
    )


def run_train(exp: ExperimentConfig, run_name: str = "train", init: Optional[Union[str, Path]] = None) -> TrainResult:
    """Joint multitask training, optionally starting from a pretrained speech encoder."""
    _check_input_dim(exp)
    run_dir = prepare_run_dir(exp, run_name)
    data = load_data(exp)
    config = model_config(exp, data.output_vocab, data.input_vocabs)
    seed = effective_seed(exp)
    if init is not None:
        model = transfer(load_checkpoint(init), config, exp.speech_task, seed)
    else:
        model = Model.initialize(config, seed, salt="multitask")
    result = train_multitask(
        model, exp.registry, data.train, exp.train, dev=data.dev,
        metrics_path=run_dir / "metrics.csv", checkpoint_path=run_dir / "model.ckpt",
        metadata={"stage": "multitask", "experiment": exp.to_json()},
    )
    rates = result.checkpoint.metadata.get("dev_error_rates")
    if rates is not None:
        write_score_report(run_dir / "dev_scores.csv",
                           [Score("ter", f"dev:{name}", r) for name, r in zip(exp.registry.names, rates)])
    return result


# ---------------------------------------------------------------------------- #
#                                  Evaluation                                  #
# ---------------------------------------------------------------------------- #
def _checkpoint_experiment(checkpoint: Checkpoint, fallback: ExperimentConfig) -> ExperimentConfig:
    stored = checkpoint.metadata.get("experiment")
    return ExperimentConfig.from_json(stored) if stored else fallback


def _score(metric: str, task: str, refs: Sequence[str], hyps: Sequence[str],
           ref_ids: Sequence[Sequence[int]], hyp_ids: Sequence[Sequence[int]]) -> Score:
    if metric == "wer":
        return Score(metric, task, corpus_wer(refs, hyps))
    if metric == "bleu":
        return Score(metric, task, bleu(refs, hyps))
    return Score(metric, task, corpus_wer(ref_ids, hyp_ids))


def evaluate(
    checkpoint_path: Union[str, Path],
    manifest: Union[str, Path],
    metric: str = "wer",
    beam: int = 1,
    output: Optional[Union[str, Path]] = None,
    hypotheses: Optional[Union[str, Path]] = None,
    task: Optional[str] = None,
    workers: int = 1,
    fallback: Optional[ExperimentConfig] = None,
) -> List[Score]:
    """
    Score a checkpoint on a manifest, one score per task.

    With `hypotheses`, the file's lines are scored against the manifest's
    targets in order and nothing is decoded (`wer` and `bleu` only).
    Decoded hypotheses are written to `<output>/hyp.<task>.txt` and the
    scores to `<output>/scores.csv`.
    """
    if metric not in METRICS:
        raise UsageError(f"unknown metric {metric!r}; choose from {METRICS}")
    rows = read_manifest(manifest)
    if task is not None:
        rows = [r for r in rows if r.task == task]
    if not rows:
        raise UsageError(f"{manifest}: no rows to evaluate" + (f" for task {task!r}" if task else ""))

    if hypotheses is not None:
        if metric not in ("wer", "bleu"):
            raise UsageError(f"--hypotheses supports wer and bleu, not {metric}")
        hyps = read_hypotheses(hypotheses)
        refs = [r.target for r in rows]
        scores = [_score(metric, task or "all", refs, hyps, [], [])]
        if output is not None:
            Path(output).mkdir(parents=True, exist_ok=True)
            write_score_report(Path(output) / "scores.csv", scores)
        return scores

    checkpoint = load_checkpoint(checkpoint_path)
    exp = _checkpoint_experiment(checkpoint, fallback or default_experiment())
    model = checkpoint.model()
    output_vocab, input_vocabs = load_vocabularies(exp)
    specs = {t.name: t for t in exp.tasks}
    missing = [s.name for s in model.config.tasks if s.name not in specs]
    if missing:
        raise UsageError(f"checkpoint tasks {missing} are not described by the experiment config")
    # dataset ids follow the model's task order
    registry = TaskRegistry([specs[s.name] for s in model.config.tasks])
    datasets = [
        ds for ds in load_datasets(manifest, registry, output_vocab, input_vocabs, skip_unknown=True)
        if task is None or registry[ds.task].name == task
    ]
    cfg = exp.decode.replace(beam=beam)
    scores = []
    for ds in datasets:
        if len(ds) == 0:
            continue
        name, q = registry[ds.task].name, ds.task
        if metric == "ppl":
            rngs = (np.random.default_rng([effective_seed(exp), i]) for i in range(len(ds)))
            samples = [ds.sample(i, rng) for i, rng in enumerate(rngs)]
            batches = [Batch.collate(q, samples[i:i + 16]) for i in range(0, len(samples), 16)]
            scores.append(Score(metric, name, perplexity(model, batches)))
            continue
        hyp_ids = decode_dataset(model, ds, cfg, workers, effective_seed(exp))
        hyps = [output_vocab.decode(h) for h in hyp_ids]
        ref_ids = [t[:-1].tolist() for t in ds.targets]
        scores.append(_score(metric, name, ds.transcripts, hyps, ref_ids, hyp_ids))
        if output is not None:
            Path(output).mkdir(parents=True, exist_ok=True)
            write_hypotheses(Path(output) / f"hyp.{name}.txt", hyps)
    for s in scores:
        logger.info("%s %s = %.4f", s.dataset, s.metric, s.value)
    if output is not None:
        Path(output).mkdir(parents=True, exist_ok=True)
        write_score_report(Path(output) / "scores.csv", scores)
    return scores


# ---------------------------------------------------------------------------- #
#                                Gradient check                                #
# ---------------------------------------------------------------------------- #
def toy_gradcheck(seed: int = 0, eps: float = 1e-5, coords_per_tensor: int = 4, samples: int = 3) -> GradCheckReport:
    """
    Finite-difference check of the full model on a two-task toy setup:
    rendered speech plus masked text, hidden size 16, 60 output tokens, the
    default four attention heads. Every parameter tensor is checked at its
    `coords_per_tensor` largest-gradient coordinates, or everywhere when 0.
    """
    grammar = default_grammar()
    corpus = synth_text_corpus(seed, 200, grammar).english
    vocab = train_subword(corpus, 60)
    short = sorted(corpus, key=lambda s: (len(s), s))[:samples]
    rng = np.random.default_rng(seed)

    registry = TaskRegistry([
        TaskSpec("asr", Modality.SPEECH),
        TaskSpec("mlm", Modality.TEXT, vocabulary="text", corruption=CorruptionConfig(mask_rate=0.4)),
    ])
    speech = SpeechDataset(0, [render_speech(s, 0.1, rng) for s in short], short, vocab)
    text = TextDataset(1, short, short, vocab, vocab, registry[1].corruption)
    batches = [
        Batch.collate(0, [speech.sample(i) for i in range(len(speech))]),
        Batch.collate(1, [text.sample(i, rng) for i in range(len(text))]),
    ]
    config = ModelConfig(
        tasks=[TaskSlot("asr", Modality.SPEECH), TaskSlot("mlm", Modality.TEXT, len(vocab))],
        output_vocab_size=len(vocab), hidden_units=16, attention_dim=8, embedding_dim=16,
    )
    model = Model.initialize(config, seed, salt="gradcheck")

    def loss_fn():
        return total(stack([model.forward_nll(b).loss for b in batches]))

    report = check_parameter_gradients(loss_fn, model.params, eps, coords_per_tensor)
    logger.info("gradient check: %d coordinates over %d tensors, max relative error %.3e",
                report.coordinates, len(report.per_parameter), report.max_relative_error)
    return report


# ---------------------------------------------------------------------------- #
#                                    Sweeps                                    #
# ---------------------------------------------------------------------------- #
def default_sweep_values(exp: ExperimentConfig, axis: str) -> List[str]:
    if axis == "shared-layers":
        return [str(k) for k in range(exp.architecture.encoder_layers + 1)]
    if axis == "mask-rate":
        return ["0", "0.4", "1.0"]
    if axis == "loss-weight":
        return ["0.5", "1", "2"]
    if axis == "task-embedding":
        return ["1", "0"]
    raise UsageError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def _sweep_task(exp: ExperimentConfig, task: Optional[str]) -> str:
    if task is not None:
        return task
    corrupted = [t.name for t in exp.tasks if t.corruption is not None]
    return corrupted[0] if corrupted else exp.tasks[-1].name


def sweep_point(exp: ExperimentConfig, axis: str, value: str, task: Optional[str] = None) -> ExperimentConfig:
    """The experiment at one sweep value; overrides are validated like command-line flags."""
    try:
        if axis == "shared-layers":
            return with_overrides(exp, shared_layers=int(value))
        if axis == "mask-rate":
            return with_overrides(exp, mask_rate=float(value))
        if axis == "loss-weight":
            return with_overrides(exp, loss_weights={_sweep_task(exp, task): float(value)})
        if axis == "task-embedding":
            if value not in ("0", "1"):
                raise UsageError(f"task-embedding values are 0 or 1, got {value!r}")
            return with_overrides(exp, task_embedding=value == "1")
    except ValueError as e:
        if isinstance(e, UsageError):
            raise
        raise UsageError(f"bad {axis} value {value!r}: {e}") from None
    raise UsageError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def point_name(exp: ExperimentConfig, axis: str, task: Optional[str] = None) -> str:
    """Run directory name, e.g. `K3_R0.4`; the axis' own suffix is appended for weight and embedding sweeps."""
    parts = [f"K{exp.architecture.shared_layers}"]
    rates = [t.corruption.mask_rate for t in exp.tasks if t.corruption is not None]
    if rates:
        parts.append(f"R{rates[0]:g}")
    if axis == "loss-weight":
        name = _sweep_task(exp, task)
        weight = exp.train.loss_weights.get(name, exp.tasks[exp.registry.index(name)].loss_weight)
        parts.append(f"W{weight:g}")
    elif axis == "task-embedding":
        parts.append(f"E{int(exp.architecture.use_task_embedding)}")
    return "_".join(parts)


def sweep(
    exp: ExperimentConfig,
    axis: str,
    values: Optional[Sequence[str]] = None,
    init: Optional[Union[str, Path]] = None,
    task: Optional[str] = None,
) -> Path:
    """Train once per sweep value and write `<output_dir>/summary.csv` with per-point dev error rates."""
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    points = [sweep_point(exp, axis, v, task) for v in (values or default_sweep_values(exp, axis))]
    names = [point_name(p, axis, task) for p in points]
    if len(set(names)) != len(names):
        raise UsageError(f"sweep values collide on run names {names}")

    summary = Path(exp.output_dir) / "summary.csv"
    Path(exp.output_dir).mkdir(parents=True, exist_ok=True)
    with open(summary, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for point, name in zip(points, names):
            logger.info("sweep %s: point %s", axis, name)
            result = run_train(point, name, init)
            rates = result.checkpoint.metadata.get("dev_error_rates") or []
            for task_name, rate in zip(point.registry.names, rates):
                writer.writerow([name, task_name, "ter", f"{rate:.6f}"])
            f.flush()
    return summary
