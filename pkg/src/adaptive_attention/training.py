"""Loss assembly, optimisers, gradient clipping, the epoch loop and grid search."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .act import HaltingRecord, ponder_cost
from .data import Example, Vocabulary, build_vocab, load_embeddings, make_batches
from .errors import ConfigurationError, InputError, TrainingDivergedError
from .evaluation import evaluate
from .model import ModelConfig, ModelParams, forward
from .tensor import Tape, Tensor, log_softmax, stack

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-8
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    ponder_weight: float = 0.001
    learning_rate: float = 0.01
    dropout: float = 0.2
    embed_dim: int = 200
    batch_size: int = 32
    epsilon: float = 0.01
    optimizer: str = "adagrad"
    max_epochs: int = 15
    clip_threshold: float = 5.0
    l2_weight: float = 1e-5
    seed: int = 0
    state_dim: int = 200
    raw_embed_dim: int = 300
    max_steps: int = 20
    vocab_size: int = 40_000
    # None disables early stopping
    patience: int | None = 5
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.ponder_weight < 0:
            raise ConfigurationError("ponder_weight must be >= 0")
        if self.clip_threshold <= 0:
            raise ConfigurationError("clip_threshold must be > 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.optimizer not in ("adagrad", "adam"):
            raise ConfigurationError(f"optimizer must be 'adagrad' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and max_epochs >= 0")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            raw_embed_dim=self.raw_embed_dim,
            embed_dim=self.embed_dim,
            state_dim=self.state_dim,
            dropout_rate=self.dropout,
            epsilon=self.epsilon,
            max_steps=self.max_steps,
        )

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, coercing to each field's type."""
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = getattr(cls(), key)
            if isinstance(raw, str):
                if raw.strip().lower() in ("none", ""):
                    kwargs[key] = None
                    continue
                if isinstance(default, bool):
                    kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
                elif isinstance(default, int) or key == "patience":
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw.strip()
            else:
                kwargs[key] = raw
        return cls(**kwargs)


@dataclass
class LossTerms:
    cross_entropy: Tensor
    ponder: Tensor
    l2: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("cross_entropy", "ponder", "l2", "total")}


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:1] or np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"labels must be a length-{logits.shape[0]} vector in [0, {k})")
    picked = log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]
    return -picked.mean()


def l2_penalty(params: ModelParams) -> Tensor:
    """Sum of squares over weight matrices (biases and embeddings excluded)."""
    total = None
    for name in params.weight_names():
        w = params[name]
        term = (w * w).sum()
        total = term if total is None else total + term
    return total


def compute_loss(
    logits: Tensor,
    labels: np.ndarray,
    records: Sequence[HaltingRecord],
    params: ModelParams,
    config: TrainConfig,
) -> LossTerms:
    ce = cross_entropy(logits, labels)
    ponder = stack([ponder_cost(r) for r in records]).mean()
    l2 = l2_penalty(params)
    total = ce + ponder * config.ponder_weight + l2 * config.l2_weight
    return LossTerms(ce, ponder, l2, total)


def clip_gradients(params: ModelParams, threshold: float = 5.0):
    """Clamp every gradient coordinate to ``[-threshold, threshold]`` in place."""
    for t in params.tensors.values():
        if t.grad is not None:
            np.clip(t.grad, -threshold, threshold, out=t.grad)


@dataclass
class OptimizerState:
    kind: str
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def create(cls, params: ModelParams, kind: str = "adagrad") -> "OptimizerState":
        if kind == "adagrad":
            return cls(kind, accumulators={n: np.zeros_like(t.data) for n, t in params.items()})
        if kind == "adam":
            return cls(
                kind,
                first_moments={n: np.zeros_like(t.data) for n, t in params.items()},
                second_moments={n: np.zeros_like(t.data) for n, t in params.items()},
            )
        raise ConfigurationError(f"unknown optimizer {kind!r}")


def optimizer_step(params: ModelParams, state: OptimizerState, learning_rate: float):
    """Apply one Adagrad or Adam update in place; missing grads count as zero."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.kind == "adagrad":
            acc = state.accumulators[name]
            acc += g * g
            p.data -= learning_rate * g / (np.sqrt(acc) + ADAGRAD_EPS)
        else:
            m, v = state.first_moments[name], state.second_moments[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1**t)
            v_hat = v / (1.0 - ADAM_BETA2**t)
            p.data -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    ce: float
    ponder: float
    val_acc: float
    mean_steps: float


METRIC_FIELDS = [f.name for f in fields(EpochMetrics)]


def write_metrics_csv(history: Iterable[EpochMetrics], path: str | Path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for m in history:
            writer.writerow([m.epoch] + [repr(float(getattr(m, k))) for k in METRIC_FIELDS[1:]])


def read_metrics_csv(path: str | Path) -> list[EpochMetrics]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochMetrics(int(r["epoch"]), *(float(r[k]) for k in METRIC_FIELDS[1:])) for r in rows]


@dataclass
class TrainResult:
    params: ModelParams
    final_params: ModelParams
    history: list[EpochMetrics]
    vocab: Vocabulary
    best_epoch: int
    best_val_acc: float


def init_model(
    train_set: Sequence[Example],
    config: TrainConfig,
    vocab: Vocabulary | None = None,
    embedding: np.ndarray | None = None,
    embeddings_path: str | Path | None = None,
) -> ModelParams:
    """Vocabulary, frozen embeddings and freshly initialised parameters."""
    init_seq, emb_seq = np.random.SeedSequence([config.seed, 1]), np.random.SeedSequence([config.seed, 2])
    vocab = vocab or build_vocab(train_set, config.vocab_size)
    if embedding is None:
        embedding = load_embeddings(embeddings_path, vocab, config.raw_embed_dim, np.random.default_rng(emb_seq))
    mcfg = replace(config.model_config(len(vocab)), raw_embed_dim=embedding.shape[1])
    params = ModelParams.init(mcfg, embedding, np.random.default_rng(init_seq))
    params.vocab = vocab
    return params


def train_epoch(
    params: ModelParams,
    batches,
    state: OptimizerState,
    config: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
):
    """One pass over ``batches``; returns mean loss terms."""
    sums = {"total": 0.0, "cross_entropy": 0.0, "ponder": 0.0}
    for i, batch in enumerate(batches):
        params.zero_grad()
        with Tape() as tape:
            out = forward(batch, params, params.config, train_mode=True, rng=rng, with_traces=False)
            terms = compute_loss(out.logits, batch.labels, out.records, params, config)
            values = terms.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {i}: {values}",
                    {"epoch": epoch, "step": state.step_count, "batch_index": i, "loss_terms": values},
                )
            tape.backward(terms.total)
        clip_gradients(params, config.clip_threshold)
        optimizer_step(params, state, config.learning_rate)
        for k in sums:
            sums[k] += values[k]
    n = max(1, len(batches))
    return {k: v / n for k, v in sums.items()}


def train(
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    config: TrainConfig,
    vocab: Vocabulary | None = None,
    embedding: np.ndarray | None = None,
    embeddings_path: str | Path | None = None,
    on_epoch: Callable[[EpochMetrics, ModelParams], None] | None = None,
) -> TrainResult:
    """Epoch loop with best-validation selection and optional early stopping.

    ``on_epoch(metrics, params)`` runs after every epoch; returning True ends
    training after that epoch.
    """
    if not train_set or not val_set:
        raise InputError("train and validation sets must be nonempty")
    params = init_model(train_set, config, vocab, embedding, embeddings_path)
    vocab = params.vocab
    state = OptimizerState.create(params, config.optimizer)
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4]))

    history: list[EpochMetrics] = []
    best, best_acc, best_epoch, stale = params.copy(), -1.0, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        batches = make_batches(train_set, vocab, config.batch_size, int(shuffle_rng.integers(2**31)))
        means = train_epoch(params, batches, state, config, dropout_rng, epoch)
        report = evaluate(params, val_set, batch_size=config.eval_batch_size)
        m = EpochMetrics(epoch, means["total"], means["cross_entropy"], means["ponder"], report.accuracy, report.mean_steps)
        history.append(m)
        log.info(
            "epoch %d loss %.4f ce %.4f ponder %.3f val_acc %.4f steps %.2f",
            epoch, m.train_loss, m.ce, m.ponder, m.val_acc, m.mean_steps,
        )
        stop = bool(on_epoch(m, params)) if on_epoch else False
        if report.accuracy > best_acc:
            best, best_acc, best_epoch, stale = params.copy(), report.accuracy, epoch, 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break
        if stop:
            break
    return TrainResult(best, params, history, vocab, best_epoch, best_acc)


@dataclass
class GridResult:
    config: TrainConfig
    val_acc: float
    status: str = "ok"
    history: list[EpochMetrics] = field(default_factory=list, repr=False)


# Reference hyperparameter grid; TrainConfig defaults are its best cell.
REFERENCE_GRID = {
    "ponder_weight": [0.001, 0.0005, 0.0001, 0.00005],
    "learning_rate": [0.01, 0.05, 0.001],
    "dropout": [0.1, 0.2],
    "embed_dim": [200, 256, 300],
    "batch_size": [8, 16, 32],
    "epsilon": [0.01, 0.2],
}


def expand_grid(grid_spec: dict[str, Sequence]) -> list[dict]:
    keys = list(grid_spec)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid_spec[k] for k in keys))]


def grid_search(
    grid_spec: dict[str, Sequence],
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    base: TrainConfig | None = None,
    epochs: int = 15,
    vocab: Vocabulary | None = None,
    embedding: np.ndarray | None = None,
) -> list[GridResult]:
    """Train every grid point for a fixed epoch budget; best first, diverged last."""
    base = base or TrainConfig()
    vocab = vocab or build_vocab(train_set, base.vocab_size)
    results = []
    for point in expand_grid(grid_spec):
        cfg = replace(base, **point, max_epochs=epochs, patience=None)
        try:
            res = train(train_set, val_set, cfg, vocab=vocab, embedding=embedding)
            results.append(GridResult(cfg, res.best_val_acc, "ok", res.history))
        except (TrainingDivergedError, FloatingPointError) as err:
            log.warning("grid point %s diverged: %s", point, err)
            results.append(GridResult(cfg, float("nan"), "diverged"))
    results.sort(key=lambda r: (r.status != "ok", -r.val_acc if r.status == "ok" else 0.0))
    return results


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
