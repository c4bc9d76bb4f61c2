"""
USTED kit - a desk-scale multitask speech and text encoder-decoder.

One attention encoder-decoder trained jointly on speech recognition and
text-to-text auxiliary tasks, with task-specific modality encoders, a shared
context encoder, a shared decoder and task embeddings, plus the synthetic
data, training and evaluation tooling around it.
"""

__version__ = "0.1.0"

# Core interfaces
from .itf.codable import Codable

# Codec types
from .integers import Uint, U8, U32
from .string import String
from .enum import CodableEnum
from .arrays import NDArray, Float32Array, Float64Array
from .struct import structure

# Autodiff
from .numerics import Tape, Tensor, backward, grad_check, check_parameter_gradients

# Data
from .tokenizer import Scheme, Vocabulary, train_subword
from .features import FrameSequence, render_speech, stack_downsample
from .corpus import Cipher, CipherConfig, CorruptionConfig, Grammar, corrupt_mlm, default_grammar, synth_text_corpus
from .tasks import Batch, BatchSampler, BatchStream, Modality, Sample, TaskRegistry, TaskSpec

# Model, training and evaluation
from .model import Model, ModelConfig, TaskSlot, param_count
from .optim import Adam, AdamConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .training import TrainConfig, joint_step, pretrain_asr, train_multitask, transfer
from .decoding import DecodeConfig, beam_decode, greedy_decode_batch
from .metrics import bleu, perplexity, token_error_rate, wer

__all__ = [
    "__version__",
    # Codecs
    "Codable", "Uint", "U8", "U32", "String", "CodableEnum",
    "NDArray", "Float32Array", "Float64Array", "structure",
    # Autodiff
    "Tape", "Tensor", "backward", "grad_check", "check_parameter_gradients",
    # Data
    "Scheme", "Vocabulary", "train_subword",
    "FrameSequence", "render_speech", "stack_downsample",
    "Cipher", "CipherConfig", "CorruptionConfig", "Grammar", "corrupt_mlm", "default_grammar", "synth_text_corpus",
    "Batch", "BatchSampler", "BatchStream", "Modality", "Sample", "TaskRegistry", "TaskSpec",
    # Model, training and evaluation
    "Model", "ModelConfig", "TaskSlot", "param_count",
    "Adam", "AdamConfig",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "joint_step", "pretrain_asr", "train_multitask", "transfer",
    "DecodeConfig", "beam_decode", "greedy_decode_batch",
    "bleu", "perplexity", "token_error_rate", "wer",
]
