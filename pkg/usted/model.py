"""
Multitask attention encoder-decoder.

Every task owns a modality encoder: an input adapter (plus a token
embedding for text) followed by `encoder_layers - shared_layers`
bidirectional LSTM layers. Its output, optionally prefixed with a trainable
task embedding, runs through `shared_layers` bidirectional layers common to
all tasks. One autoregressive decoder with multi-head additive attention
serves every task. Decoder-only tasks (modality `none`) have no encoder and
see a zero context vector.

Parameters live in a flat, ordered name -> Tensor mapping:

    tasks.<task>.adapter.{weight,bias}
    tasks.<task>.embedding
    tasks.<task>.encoder.<i>.{fwd,bwd}.{w_x,w_h,b}
    tasks.<task>.task_embedding
    shared.encoder.<i>.{fwd,bwd}.{w_x,w_h,b}
    decoder.embedding
    decoder.lstm.<j>.{w_x,w_h,b}
    decoder.attention.<k>.{w_s,w_h,b,v}
    decoder.attention.merge.{weight,bias}
    decoder.output.{weight,bias}
"""

import hashlib
import logging
import zlib
from collections import OrderedDict
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from usted.constants import BOS, SPECIAL_TOKENS
from usted.numerics import (
    Tensor,
    additive_score,
    concat,
    embedding_lookup,
    linear,
    log_softmax,
    lstm_cell,
    matmul,
    pick,
    scale,
    softmax,
    stack,
    total,
    weighted_sum,
)
from usted.struct import structure
from usted.tasks import Batch, Modality

logger = logging.getLogger(__name__)

INIT_RANGE = 0.05


class ModelError(ValueError):
    """Invalid configuration, parameter set or model input."""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        super().__init__(message)
        self.sample_index = sample_index


# ---------------------------------------------------------------------------- #
#                                 Configuration                                #
# ---------------------------------------------------------------------------- #
@structure
class TaskSlot:
    name: str
    modality: Modality
    input_vocab_size: int = 0


@structure
class ModelConfig:
    tasks: list[TaskSlot]
    output_vocab_size: int
    encoder_layers: int = 4
    shared_layers: int = 1
    hidden_units: int = 48
    input_dim: int = 192
    attention_heads: int = 4
    attention_dim: int = 32
    decoder_layers: int = 2
    embedding_dim: int = 64
    use_task_embedding: bool = True

    def __post_init__(self):
        if not self.tasks:
            raise ModelError("a model needs at least one task")
        if not 0 <= self.shared_layers <= self.encoder_layers:
            raise ModelError(
                f"shared layers K={self.shared_layers} outside [0, {self.encoder_layers}]"
            )
        for name in ("hidden_units", "input_dim", "attention_heads", "attention_dim", "decoder_layers", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.output_vocab_size <= len(SPECIAL_TOKENS):
            raise ModelError(f"output vocabulary of {self.output_vocab_size} holds only reserved tokens")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ModelError(f"duplicate task names in {names}")
        for t in self.tasks:
            if (t.modality is Modality.TEXT) != (t.input_vocab_size > 0):
                raise ModelError(f"task {t.name!r}: only text tasks carry an input vocabulary size")

    @property
    def modality_layers(self) -> int:
        return self.encoder_layers - self.shared_layers

    @property
    def encoder_units(self) -> int:
        return 2 * self.hidden_units

    @property
    def decoder_units(self) -> int:
        return 2 * self.hidden_units

    def task_index(self, name: str) -> int:
        for q, t in enumerate(self.tasks):
            if t.name == name:
                return q
        raise ModelError(f"unknown task {name!r}; configured tasks: {[t.name for t in self.tasks]}")

    def digest(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()


def _lstm_shapes(prefix: str, inputs: int, units: int) -> Dict[str, Tuple[int, ...]]:
    return {
        f"{prefix}.w_x": (inputs, 4 * units),
        f"{prefix}.w_h": (units, 4 * units),
        f"{prefix}.b": (4 * units,),
    }


def _bilstm_shapes(prefix: str, inputs: int, units: int) -> Dict[str, Tuple[int, ...]]:
    shapes = _lstm_shapes(f"{prefix}.fwd", inputs, units)
    shapes.update(_lstm_shapes(f"{prefix}.bwd", inputs, units))
    return shapes


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Canonical parameter names and shapes, in creation order."""
    h, width = config.hidden_units, config.encoder_units
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for t in config.tasks:
        if t.modality is Modality.NONE:
            continue
        p = f"tasks.{t.name}"
        if t.modality is Modality.TEXT:
            shapes[f"{p}.embedding"] = (t.input_vocab_size, config.input_dim)
        shapes[f"{p}.adapter.weight"] = (config.input_dim, width)
        shapes[f"{p}.adapter.bias"] = (width,)
        for i in range(config.modality_layers):
            shapes.update(_bilstm_shapes(f"{p}.encoder.{i}", width, h))
        if config.use_task_embedding:
            shapes[f"{p}.task_embedding"] = (1, width)
    for i in range(config.shared_layers):
        shapes.update(_bilstm_shapes(f"shared.encoder.{i}", width, h))

    d = config.decoder_units
    shapes["decoder.embedding"] = (config.output_vocab_size, config.embedding_dim)
    for j in range(config.decoder_layers):
        shapes.update(_lstm_shapes(f"decoder.lstm.{j}", config.embedding_dim + width if j == 0 else d, d))
    for k in range(config.attention_heads):
        p = f"decoder.attention.{k}"
        shapes[f"{p}.w_s"] = (d, config.attention_dim)
        shapes[f"{p}.w_h"] = (width, config.attention_dim)
        shapes[f"{p}.b"] = (config.attention_dim,)
        shapes[f"{p}.v"] = (config.attention_dim, 1)
    shapes["decoder.attention.merge.weight"] = (config.attention_heads * width, width)
    shapes["decoder.attention.merge.bias"] = (width,)
    shapes["decoder.output.weight"] = (d + width, config.output_vocab_size)
    shapes["decoder.output.bias"] = (config.output_vocab_size,)
    return shapes


def param_count(config: ModelConfig) -> Dict[str, int]:
    """
    Closed-form parameter counts: one entry per task path (modality encoder
    plus shared encoder), plus `modality`, `shared`, `decoder` and `total`.
    """
    h, d_in, width = config.hidden_units, config.input_dim, config.encoder_units
    bilstm = 2 * 4 * h * (width + h + 1)
    shared = config.shared_layers * bilstm

    counts: Dict[str, int] = {}
    modality = 0
    for t in config.tasks:
        if t.modality is Modality.NONE:
            counts[f"path.{t.name}"] = 0
            continue
        own = d_in * width + width + config.modality_layers * bilstm
        if t.modality is Modality.TEXT:
            own += t.input_vocab_size * d_in
        if config.use_task_embedding:
            own += width
        modality += own
        counts[f"path.{t.name}"] = own + shared

    d, e, a, heads, v = (
        config.decoder_units, config.embedding_dim, config.attention_dim, config.attention_heads, config.output_vocab_size,
    )
    decoder = v * e
    decoder += 4 * d * (e + width + d + 1) + (config.decoder_layers - 1) * 4 * d * (2 * d + 1)
    decoder += heads * (d * a + width * a + 2 * a)
    decoder += heads * width * width + width
    decoder += (d + width) * v + v

    counts.update(modality=modality, shared=shared, decoder=decoder, total=modality + shared + decoder)
    return counts


# ---------------------------------------------------------------------------- #
#                                Runtime state                                 #
# ---------------------------------------------------------------------------- #
class Memory(NamedTuple):
    """Encoder output for one batch: values B x N x 2h, per-head keys, validity mask."""

    values: Optional[Tensor]
    keys: Tuple[Tensor, ...]
    mask: Optional[np.ndarray]
    batch: int

    def select(self, rows: Sequence[int]) -> "Memory":
        """Row subset for inference; results carry no graph."""
        rows = np.asarray(rows, dtype=np.int64)
        if self.values is None:
            return Memory(None, (), None, len(rows))
        return Memory(
            Tensor(self.values.data[rows]),
            tuple(Tensor(k.data[rows]) for k in self.keys),
            self.mask[rows],
            len(rows),
        )


class DecoderState(NamedTuple):
    h: Tuple[Tensor, ...]
    c: Tuple[Tensor, ...]

    def select(self, rows: Sequence[int]) -> "DecoderState":
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderState(tuple(Tensor(t.data[rows]) for t in self.h), tuple(Tensor(t.data[rows]) for t in self.c))


class NLL(NamedTuple):
    loss: Tensor
    per_sample: np.ndarray


def _step_masks(lengths: np.ndarray, steps: int, units: int) -> List[Optional[Tuple[Tensor, Tensor]]]:
    masks: List[Optional[Tuple[Tensor, Tensor]]] = []
    for t in range(steps):
        valid = t < lengths
        if valid.all():
            masks.append(None)
            continue
        keep = np.repeat(valid[:, None].astype(np.float64), units, axis=1)
        masks.append((Tensor(keep), Tensor(1.0 - keep)))
    return masks


# ---------------------------------------------------------------------------- #
#                                     Model                                    #
# ---------------------------------------------------------------------------- #
class Model:
    """
    Configuration plus parameters.

    Forward passes only read parameters, so one instance may serve several
    inference threads while no training step is running.
    """

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        expected = parameter_shapes(config)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ModelError(f"parameter names do not match the configuration: missing {missing}, unexpected {extra}")
        wrong = [f"{n}: {params[n].shape} != {s}" for n, s in expected.items() if params[n].shape != s]
        if wrong:
            raise ModelError(f"parameter shapes do not match the configuration: {wrong}")
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict((n, params[n]) for n in expected)
        for name, p in self.params.items():
            p.requires_grad = True
            p.name = name

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, salt: str = "") -> "Model":
        """
        Uniform(-0.05, 0.05) weights and zero biases and task embeddings.
        Each tensor draws from its own generator keyed by seed, salt and name.
        """
        params = {name: Tensor.parameter(init_parameter(name, shape, seed, salt), name=name)
                  for name, shape in parameter_shapes(config).items()}
        logger.debug("initialized %d tensors (seed=%d, salt=%r)", len(params), seed, salt)
        return cls(config, params)

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ModelError(f"state is missing parameter {name!r}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ModelError(f"parameter {name!r}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def snapshot(self) -> "Model":
        """Independent copy of the parameters."""
        return Model(self.config, {n: Tensor.parameter(p.data, name=n) for n, p in self.params.items()})

    def slot(self, q: int) -> TaskSlot:
        if not 0 <= q < len(self.config.tasks):
            raise ModelError(f"unknown task id {q}; model has {len(self.config.tasks)} tasks")
        return self.config.tasks[q]

    # ---------------------------------------------------------------------------- #
    #                                    Encoder                                   #
    # ---------------------------------------------------------------------------- #
    def _lstm(self, prefix: str, xs: List[Tensor], masks, reverse: bool) -> List[Tensor]:
        units = self.config.hidden_units
        w_x, w_h, b = (self.params[f"{prefix}.{n}"] for n in ("w_x", "w_h", "b"))
        batch = xs[0].shape[0]
        h = Tensor(np.zeros((batch, units)))
        c = Tensor(np.zeros((batch, units)))
        outs: List[Optional[Tensor]] = [None] * len(xs)
        for t in (reversed(range(len(xs))) if reverse else range(len(xs))):
            h_new, c_new = lstm_cell(xs[t], h, c, w_x, w_h, b)
            if masks[t] is not None:
                keep, drop = masks[t]
                h_new = h_new * keep + h * drop
                c_new = c_new * keep + c * drop
            h, c = h_new, c_new
            outs[t] = h
        return outs

    def _bilstm(self, prefix: str, xs: List[Tensor], lengths: np.ndarray) -> List[Tensor]:
        masks = _step_masks(lengths, len(xs), self.config.hidden_units)
        fwd = self._lstm(f"{prefix}.fwd", xs, masks, reverse=False)
        bwd = self._lstm(f"{prefix}.bwd", xs, masks, reverse=True)
        return [concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]

    def _check_inputs(self, slot: TaskSlot, inputs: np.ndarray, lengths: np.ndarray) -> None:
        if len(lengths) != inputs.shape[0]:
            raise ModelError(f"{len(lengths)} lengths for a batch of {inputs.shape[0]}")
        if slot.modality is Modality.SPEECH and (inputs.ndim != 3 or inputs.shape[2] != self.config.input_dim):
            raise ModelError(f"speech task {slot.name!r} expects B x N x {self.config.input_dim} frames, got {inputs.shape}")
        if slot.modality is Modality.TEXT and inputs.ndim != 2:
            raise ModelError(f"text task {slot.name!r} expects B x N token ids, got shape {inputs.shape}")
        if slot.modality is not Modality.NONE and (np.any(lengths < 1) or np.any(lengths > inputs.shape[1])):
            raise ModelError(f"lengths {lengths.tolist()} inconsistent with {inputs.shape[1]} input positions")

    def adapt(self, q: int, inputs: np.ndarray, lengths: np.ndarray) -> List[Tensor]:
        """Per-position adapter outputs (B x 2h each) of task q's raw input."""
        slot = self.slot(q)
        inputs, lengths = np.asarray(inputs), np.asarray(lengths, dtype=np.int64)
        self._check_inputs(slot, inputs, lengths)
        if slot.modality is Modality.NONE:
            return []
        p = f"tasks.{slot.name}"
        weight, bias = self.params[f"{p}.adapter.weight"], self.params[f"{p}.adapter.bias"]
        if slot.modality is Modality.SPEECH:
            rows = [Tensor(inputs[:, t]) for t in range(inputs.shape[1])]
        else:
            table = self.params[f"{p}.embedding"]
            rows = [embedding_lookup(table, inputs[:, t]) for t in range(inputs.shape[1])]
        return [linear(x, weight, bias) for x in rows]

    def encode_adapted(self, q: int, seq: List[Tensor], lengths: np.ndarray) -> Memory:
        """Modality layers, optional task embedding, shared layers, attention keys."""
        slot = self.slot(q)
        lengths = np.asarray(lengths, dtype=np.int64)
        if slot.modality is Modality.NONE:
            return Memory(None, (), None, len(lengths))
        if not seq:
            raise ModelError(f"task {slot.name!r} received an empty input")
        p = f"tasks.{slot.name}"
        for i in range(self.config.modality_layers):
            seq = self._bilstm(f"{p}.encoder.{i}", seq, lengths)
        if self.config.use_task_embedding:
            seq = [embedding_lookup(self.params[f"{p}.task_embedding"], [0] * len(lengths))] + seq
            lengths = lengths + 1
        for i in range(self.config.shared_layers):
            seq = self._bilstm(f"shared.encoder.{i}", seq, lengths)

        values = stack(seq, axis=1)
        keys = tuple(
            matmul(values, self.params[f"decoder.attention.{k}.w_h"]) for k in range(self.config.attention_heads)
        )
        mask = np.arange(len(seq))[None, :] < lengths[:, None]
        return Memory(values, keys, mask, len(lengths))

    def encode(self, q: int, inputs: np.ndarray, lengths: np.ndarray) -> Memory:
        return self.encode_adapted(q, self.adapt(q, inputs, lengths), lengths)

    # ---------------------------------------------------------------------------- #
    #                                    Decoder                                   #
    # ---------------------------------------------------------------------------- #
    def initial_state(self, batch: int) -> DecoderState:
        zeros = tuple(Tensor(np.zeros((batch, self.config.decoder_units))) for _ in range(self.config.decoder_layers))
        return DecoderState(zeros, zeros)

    def attend(self, memory: Memory, query: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """Context vector (B x 2h) and each head's attention weights (B x N)."""
        if memory.values is None:
            return Tensor(np.zeros((memory.batch, self.config.encoder_units))), []
        contexts, weights = [], []
        for k in range(self.config.attention_heads):
            p = f"decoder.attention.{k}"
            projected = linear(query, self.params[f"{p}.w_s"], self.params[f"{p}.b"])
            scores = additive_score(memory.keys[k], projected, self.params[f"{p}.v"])
            w = softmax(scores, axis=-1, mask=memory.mask)
            contexts.append(weighted_sum(w, memory.values))
            weights.append(w)
        merged = linear(
            concat(contexts, axis=-1),
            self.params["decoder.attention.merge.weight"],
            self.params["decoder.attention.merge.bias"],
        )
        return merged, weights

    def decode_step(
        self, state: DecoderState, prev_tokens: Sequence[int], memory: Memory
    ) -> Tuple[Tensor, DecoderState, List[Tensor]]:
        """
        One decoder step for a batch: log-probabilities over the output
        vocabulary, the next state and the attention weights used.
        """
        prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
        vocab = self.config.output_vocab_size
        if prev.shape[0] != memory.batch:
            raise ModelError(f"{prev.shape[0]} previous tokens for a batch of {memory.batch}")
        bad = prev[(prev < 0) | (prev >= vocab)]
        if bad.size:
            raise ModelError(f"previous token id {int(bad[0])} outside output vocabulary of {vocab}")

        context, weights = self.attend(memory, state.h[-1])
        x = concat([embedding_lookup(self.params["decoder.embedding"], prev), context], axis=-1)
        hs, cs = [], []
        for j in range(self.config.decoder_layers):
            p = f"decoder.lstm.{j}"
            h, c = lstm_cell(
                x, state.h[j], state.c[j], self.params[f"{p}.w_x"], self.params[f"{p}.w_h"], self.params[f"{p}.b"]
            )
            hs.append(h)
            cs.append(c)
            x = h
        logits = linear(
            concat([x, context], axis=-1), self.params["decoder.output.weight"], self.params["decoder.output.bias"]
        )
        return log_softmax(logits, axis=-1), DecoderState(tuple(hs), tuple(cs)), weights

    def forward_nll(self, batch: Batch) -> NLL:
        """Teacher-forced summed token NLL of a batch; padding contributes nothing."""
        memory = self.encode(batch.task, batch.inputs, batch.input_lengths)
        state = self.initial_state(batch.size)
        prev = np.full(batch.size, BOS, dtype=np.int64)
        picked = []
        for u in range(batch.targets.shape[1]):
            log_probs, state, _ = self.decode_step(state, prev, memory)
            picked.append(pick(log_probs, batch.targets[:, u]))
            prev = batch.targets[:, u]
        masked = stack(picked, axis=0) * Tensor(batch.target_mask().T.astype(np.float64))
        per_sample = -masked.data.sum(axis=0)
        bad = np.flatnonzero(~np.isfinite(per_sample))
        if bad.size:
            raise ModelError(f"non-finite loss for sample {int(bad[0])} of task {batch.task}", int(bad[0]))
        return NLL(scale(total(masked), -1.0), per_sample)


def init_parameter(name: str, shape: Tuple[int, ...], seed: int, salt: str = "") -> np.ndarray:
    if name.endswith((".b", ".bias", ".task_embedding")):
        return np.zeros(shape)
    rng = np.random.default_rng([seed, zlib.crc32(f"{salt}/{name}".encode("utf-8"))])
    return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
