"""Adaptive Attention network for three-way entailment.

Pipeline per batch:

1. Frozen word vectors pass through a trainable ReLU projection.
2. Bag-of-words cross attention: alignment scores ``F(h_i) . F(p_j)`` give a
   summary of the other sentence for every token, which is concatenated to
   the token's own vector (augmented dimension ``2 * embed_dim``).
3. Under ACT, each inference step attends over the hypothesis keyed on the
   GRU state, then over the premise keyed on ``[state, hypothesis summary]``,
   gates both summaries and feeds them to the inference GRU.
4. A linear classifier reads the ACT-weighted final state.

All weight matrices are stored ``(out_features, in_features)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .act import DEFAULT_MAX_STEPS, ACTOutput, HaltingRecord, HaltingUnit, act_run
from .data import LABELS, Batch
from .errors import ConfigurationError, InputError
from .tensor import Tensor, concat, dropout, masked_softmax, no_grad, relu, sigmoid, tanh
from .trace import AttentionTrace, TraceStep


@dataclass
class ModelConfig:
    vocab_size: int
    raw_embed_dim: int = 300
    embed_dim: int = 200
    state_dim: int = 200
    num_classes: int = 3
    dropout_rate: float = 0.2
    epsilon: float = 0.01
    max_steps: int = DEFAULT_MAX_STEPS
    halt_bias: float = 1.0

    def __post_init__(self):
        for name in ("vocab_size", "raw_embed_dim", "embed_dim", "state_dim", "num_classes", "max_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, s, aug = cfg.embed_dim, cfg.state_dim, 2 * cfg.embed_dim
    gate_in = s + 3 * aug
    shapes = {
        "proj.W": (d, cfg.raw_embed_dim),
        "proj.b": (d,),
        "F1.W": (d, d),
        "F1.b": (d,),
        "F2.W": (d, d),
        "F2.b": (d,),
        "att_h.W": (aug, s),
        "att_h.b": (aug,),
        "att_p.W": (aug, aug + s),
        "att_p.b": (aug,),
    }
    for g in ("gate_p", "gate_h"):
        shapes.update({f"{g}.W1": (aug, gate_in), f"{g}.b1": (aug,), f"{g}.W2": (aug, aug), f"{g}.b2": (aug,)})
    for k in ("z", "r", "n"):
        shapes.update({f"gru.W_{k}": (s, 2 * aug), f"gru.U_{k}": (s, s), f"gru.b_{k}": (s,)})
    shapes.update({"cls.W": (cfg.num_classes, s), "cls.b": (cfg.num_classes,), "halt.w": (s,), "halt.b": ()})
    return shapes


class ModelParams:
    """Named trainable tensors plus the frozen embedding matrix."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], embedding: np.ndarray, vocab=None):
        self.config = config
        self.vocab = vocab
        self.tensors = tensors
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.embedding.setflags(write=False)
        self.validate()

    def validate(self):
        expected = param_shapes(self.config)
        missing = expected.keys() - self.tensors.keys()
        extra = self.tensors.keys() - expected.keys()
        if missing or extra:
            raise ConfigurationError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")
        emb = (self.config.vocab_size, self.config.raw_embed_dim)
        if self.embedding.shape != emb:
            raise ConfigurationError(f"embedding: shape {self.embedding.shape}, expected {emb}")

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        embedding: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        zero_classifier: bool = False,
    ) -> "ModelParams":
        """Glorot-uniform matrices, zero biases, halting bias ``config.halt_bias``."""
        rng = rng if rng is not None else np.random.default_rng(0)
        if embedding is None:
            embedding = rng.normal(0.0, 0.01, size=(config.vocab_size, config.raw_embed_dim))
            embedding[0] = 0.0
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name == "halt.b":
                value = np.array(config.halt_bias)
            elif name == "halt.w":
                limit = np.sqrt(6.0 / (shape[0] + 1))
                value = rng.uniform(-limit, limit, shape)
            elif len(shape) == 2:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, shape)
            else:
                value = np.zeros(shape)
            if zero_classifier and name.startswith("cls."):
                value = np.zeros(shape)
            tensors[name] = Tensor(value, requires_grad=True, name=name)
        return cls(config, tensors, embedding)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def weight_names(self) -> list[str]:
        """Matrix-valued parameters (the ones L2-regularised)."""
        return [n for n, t in self.tensors.items() if t.ndim == 2]

    @property
    def halting(self) -> HaltingUnit:
        return HaltingUnit(self.tensors["halt.w"], self.tensors["halt.b"])

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()}
        return ModelParams(self.config, tensors, self.embedding, self.vocab)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def load_state_dict(self, values: dict[str, np.ndarray]):
        for n, v in values.items():
            self.tensors[n].data[...] = v


def _linear(x: Tensor, params: ModelParams, prefix: str, w: str = "W", b: str = "b") -> Tensor:
    return x @ params[f"{prefix}.{w}"].T + params[f"{prefix}.{b}"]


@dataclass
class AugmentedSequence:
    """Token rows ``[cross-attention summary, projected word]``; padded rows are zero."""

    tokens: Tensor
    mask: np.ndarray
    alignment: Tensor | None = field(default=None, repr=False)


def project_words(ids: np.ndarray, params: ModelParams) -> Tensor:
    raw = Tensor(params.embedding[ids])
    return relu(_linear(raw, params, "proj"))


def feedforward_f(x: Tensor, params: ModelParams) -> Tensor:
    return relu(_linear(relu(_linear(x, params, "F1")), params, "F2"))


def _check_nonempty(mask: np.ndarray, what: str):
    if mask.ndim != 2 or not np.all(mask.sum(axis=1) > 0):
        raise InputError(f"{what}: every sequence needs at least one unmasked token")


def encode(
    premise_ids: np.ndarray,
    hypothesis_ids: np.ndarray,
    premise_mask: np.ndarray,
    hypothesis_mask: np.ndarray,
    params: ModelParams,
    config: ModelConfig | None = None,
    train_mode: bool = False,
) -> tuple[AugmentedSequence, AugmentedSequence]:
    """Bag-of-words cross attention. Inputs are ``[B, L]`` id/mask matrices."""
    _check_nonempty(premise_mask, "premise")
    _check_nonempty(hypothesis_mask, "hypothesis")
    p = project_words(premise_ids, params)
    h = project_words(hypothesis_ids, params)
    align = feedforward_f(h, params) @ feedforward_f(p, params).swapaxes(-1, -2)  # [B, m, n]
    pm, hm = premise_mask[:, None, :], hypothesis_mask[:, :, None]
    alpha = masked_softmax(align, pm, axis=2) @ p  # [B, m, d]
    beta = masked_softmax(align, hm, axis=1).swapaxes(1, 2) @ h  # [B, n, d]
    h_aug = concat([alpha, h], axis=-1) * hypothesis_mask[:, :, None]
    p_aug = concat([beta, p], axis=-1) * premise_mask[:, :, None]
    return (
        AugmentedSequence(p_aug, premise_mask, align),
        AugmentedSequence(h_aug, hypothesis_mask, align),
    )


@dataclass
class AttentionStep:
    """Detached record of one inference step, batched along axis 0."""

    hyp_weights: np.ndarray
    hyp_summary: np.ndarray
    prem_weights: np.ndarray
    prem_summary: np.ndarray
    gate_p: np.ndarray
    gate_h: np.ndarray
    gru_input: np.ndarray
    per_step_logits: np.ndarray


def _attend(seq: AugmentedSequence, key: Tensor) -> tuple[Tensor, Tensor]:
    logits = (seq.tokens @ key.reshape(key.shape + (1,))).reshape(seq.mask.shape)
    weights = masked_softmax(logits, seq.mask, axis=-1)
    summary = (weights.reshape((weights.shape[0], 1, weights.shape[1])) @ seq.tokens).reshape(key.shape)
    return weights, summary


def _gate(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = relu(_linear(x, params, prefix, "W1", "b1"))
    return sigmoid(_linear(hidden, params, prefix, "W2", "b2"))


def gru_cell(x: Tensor, state: Tensor, params: ModelParams) -> Tensor:
    z = sigmoid(_linear(x, params, "gru", "W_z", "b_z") + state @ params["gru.U_z"].T)
    r = sigmoid(_linear(x, params, "gru", "W_r", "b_r") + state @ params["gru.U_r"].T)
    cand = tanh(_linear(x, params, "gru", "W_n", "b_n") + (r * state) @ params["gru.U_n"].T)
    return (1.0 - z) * cand + z * state


def classify_state(state: np.ndarray, params: ModelParams) -> np.ndarray:
    return state @ params["cls.W"].data.T + params["cls.b"].data


def inference_step(
    aug_prem: AugmentedSequence,
    aug_hyp: AugmentedSequence,
    prev_state: Tensor,
    params: ModelParams,
    config: ModelConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, AttentionStep]:
    """One alternating-attention step followed by the GRU update (``[B, s]`` states)."""
    if prev_state.ndim != 2 or prev_state.shape[1] != config.state_dim:
        raise ConfigurationError(f"prev_state: shape {prev_state.shape}, expected (B, {config.state_dim})")
    aug = 2 * config.embed_dim
    for seq, what in ((aug_hyp, "hypothesis"), (aug_prem, "premise")):
        if seq.tokens.shape[-1] != aug:
            raise ConfigurationError(f"{what} rows have width {seq.tokens.shape[-1]}, att weights expect {aug}")

    q_w, q = _attend(aug_hyp, _linear(prev_state, params, "att_h"))
    d_w, d = _attend(aug_prem, _linear(concat([prev_state, q], axis=-1), params, "att_p"))
    gate_in = concat([prev_state, d, q, d * q], axis=-1)
    r = _gate(gate_in, params, "gate_p")
    g = _gate(gate_in, params, "gate_h")
    x = concat([r * d, g * q], axis=-1)
    x = dropout(x, config.dropout_rate, rng, train_mode)
    state = gru_cell(x, prev_state, params)
    step = AttentionStep(
        hyp_weights=q_w.data,
        hyp_summary=q.data,
        prem_weights=d_w.data,
        prem_summary=d.data,
        gate_p=r.data,
        gate_h=g.data,
        gru_input=x.data,
        per_step_logits=classify_state(state.data, params),
    )
    return state, state, step


class ForwardOutput(NamedTuple):
    logits: Tensor
    records: list[HaltingRecord]
    traces: list[AttentionTrace]
    act: ACTOutput


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=-1)


def build_traces(batch: Batch, act: ACTOutput, logits: np.ndarray) -> list[AttentionTrace]:
    steps: list[AttentionStep] = act.aux
    records = act.record if isinstance(act.record, list) else [act.record]
    preds = predict_labels(logits)
    final = _softmax_rows(logits)
    traces = []
    for b, rec in enumerate(records):
        lp = int(batch.premise_mask[b].sum())
        lh = int(batch.hypothesis_mask[b].sum())
        if batch.examples:
            ex = batch.examples[b]
            prem, hyp, gold = list(ex.premise_tokens), list(ex.hypothesis_tokens), ex.label
        else:
            prem = [str(i) for i in batch.premise_ids[b, :lp]]
            hyp = [str(i) for i in batch.hypothesis_ids[b, :lh]]
            gold = LABELS[int(batch.labels[b])] if len(batch.labels) else None
        trace_steps = [
            TraceStep(
                hyp_weights=steps[n].hyp_weights[b, :lh].tolist(),
                prem_weights=steps[n].prem_weights[b, :lp].tolist(),
                act_weight=rec.weights[n],
                softmax=_softmax_rows(steps[n].per_step_logits[b]).tolist(),
            )
            for n in range(rec.steps_taken)
        ]
        traces.append(
            AttentionTrace(
                premise_tokens=prem,
                hypothesis_tokens=hyp,
                steps=trace_steps,
                prediction=LABELS[int(preds[b])],
                gold=gold,
                final_softmax=final[b].tolist(),
            )
        )
    return traces


def forward(
    batch: Batch,
    params: ModelParams,
    config: ModelConfig | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    with_traces: bool = True,
    max_steps: int | None = None,
) -> ForwardOutput:
    """Encode once, run the inference GRU under ACT, classify the weighted state.

    ``max_steps`` overrides the configured cap (used by the fixed-step
    evaluation).
    """
    config = config or params.config
    prem, hyp = encode(
        batch.premise_ids, batch.hypothesis_ids, batch.premise_mask, batch.hypothesis_mask, params, config, train_mode
    )
    s0 = Tensor(np.zeros((len(batch), config.state_dim)))

    def step(n, prev):
        return inference_step(prem, hyp, prev, params, config, train_mode, rng)

    act = act_run(step, s0, params.halting, config.epsilon, max_steps or config.max_steps)
    final = dropout(act.final_state, config.dropout_rate, rng, train_mode)
    logits = _linear(final, params, "cls")
    traces = build_traces(batch, act, logits.data) if with_traces else []
    return ForwardOutput(logits, act.record, traces, act)


def predict(batch: Batch, params: ModelParams, max_steps: int | None = None) -> ForwardOutput:
    """Inference-mode forward without recording a tape."""
    with no_grad():
        return forward(batch, params, params.config, train_mode=False, max_steps=max_steps)
