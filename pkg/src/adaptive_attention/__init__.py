"""Adaptive Computation Time over an alternating-attention inference GRU for
natural language inference, on a small NumPy autodiff engine."""

from .act import ACTOutput, HaltingRecord, HaltingUnit, act_run, ponder_cost
from .data import LABELS, Batch, Example, Vocabulary, build_vocab, load_embeddings, load_snli, make_batches
from .evaluation import EvalReport, evaluate, evaluate_fixed_steps
from .model import ModelConfig, ModelParams, encode, forward, inference_step, predict
from .tensor import Tape, Tensor, finite_diff_check, no_grad
from .trace import AttentionTrace, export_trace
from .training import TrainConfig, compute_loss, grid_search, train

__version__ = "0.1.0"
