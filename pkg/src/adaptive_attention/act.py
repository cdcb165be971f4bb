"""Adaptive Computation Time as a halting combinator around any step function.

A single outer timestep is executed: the inner step is applied repeatedly,
a sigmoid halting unit reads each post-step state, and the loop stops once
the accumulated halting probability reaches ``1 - epsilon`` (or the step cap
is hit). The final state and output are the halting-weighted sums of the
intermediate ones, with the last step taking the remainder so the weights
form a convex combination.

States may carry a leading batch axis. Each row then halts independently;
rows that have already halted keep running but receive zero weight, which
leaves their result identical to an unbatched run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor, sigmoid

DEFAULT_MAX_STEPS = 20

InnerStep = Callable[[int, Tensor], tuple]


@dataclass
class HaltingUnit:
    """Logistic halting layer ``sigmoid(state . weight + bias)``."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, state_dim: int, bias: float = 1.0, rng: np.random.Generator | None = None, scale: float = 0.0):
        w = np.zeros(state_dim) if rng is None or scale == 0 else rng.uniform(-scale, scale, state_dim)
        return cls(Tensor(w, requires_grad=True, name="halt.w"), Tensor(bias, requires_grad=True, name="halt.b"))

    def __call__(self, state: Tensor) -> Tensor:
        return sigmoid(state @ self.weight + self.bias)


@dataclass
class HaltingRecord:
    """Audit trail of one ACT run (one batch row).

    ``remainder_tensor`` is the differentiable handle on ``remainder`` used by
    :func:`ponder_cost`.
    """

    raw_probs: list[float]
    weights: list[float]
    steps_taken: int
    remainder: float
    remainder_tensor: Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class ACTOutput:
    final_state: Tensor
    final_output: Tensor
    record: HaltingRecord | list[HaltingRecord]
    intermediate_states: list[Tensor]
    intermediate_outputs: list[Tensor]
    aux: list[Any]
    # per-row step counts and differentiable remainders (shape [] or [B])
    steps: np.ndarray
    remainder: Tensor
    # weight of every executed step, [n_executed] or [n_executed, B]
    step_weights: np.ndarray


def _broadcast_rows(w: Tensor, x: Tensor) -> Tensor:
    return w.reshape(w.shape + (1,) * (x.ndim - w.ndim)) * x


def act_run(
    inner_step: InnerStep,
    initial_state: Tensor,
    halting: HaltingUnit,
    epsilon: float = 0.01,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> ACTOutput:
    """Run ``inner_step`` under ACT halting for one outer timestep.

    ``inner_step(n, prev_state)`` receives the zero-based step index and the
    previous state and returns ``(output, next_state)`` or
    ``(output, next_state, aux)``; ``aux`` values are collected in order.

    The halting count is a constant for backpropagation; gradients flow
    through every halting probability that enters a weight, and through the
    remainder ``1 - sum(earlier probabilities)``.
    """
    if max_steps < 1:
        raise ContractError(f"max_steps must be >= 1, got {max_steps}")
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"epsilon must lie in (0, 1), got {epsilon}")
    single = initial_state.ndim == 1
    rows = 1 if single else initial_state.shape[0]
    threshold = 1.0 - epsilon

    state = initial_state
    cum = Tensor(np.zeros(() if single else (rows,)))
    running = np.ones(rows, dtype=bool)
    steps = np.zeros(rows, dtype=np.int64)
    raw_hist: list[np.ndarray] = []
    weight_hist: list[np.ndarray] = []
    states: list[Tensor] = []
    outputs: list[Tensor] = []
    aux: list[Any] = []
    final_state = final_output = remainder = None

    for n in range(max_steps):
        result = inner_step(n, state)
        output, state = result[0], result[1]
        if len(result) > 2:
            aux.append(result[2])
        if not np.all(np.isfinite(state.data)):
            raise NumericError(f"non-finite state at inner step {n}")
        states.append(state)
        outputs.append(output)

        h = halting(state)
        h_np = np.atleast_1d(h.data)
        cum_np = np.atleast_1d(cum.data)
        halt_now = running & ((cum_np + h_np >= threshold) | (n == max_steps - 1))
        cont = running & ~halt_now
        halt_mask, cont_mask = halt_now.astype(float), cont.astype(float)
        if single:
            halt_mask, cont_mask = halt_mask[0], cont_mask[0]

        rem_n = (1.0 - cum) * halt_mask
        w = h * cont_mask + rem_n
        steps[running] += 1
        raw_hist.append(np.where(running, h_np, np.nan))
        weight_hist.append(np.atleast_1d(w.data).copy())

        ws = _broadcast_rows(w, state)
        wo = _broadcast_rows(w, output)
        final_state = ws if final_state is None else final_state + ws
        final_output = wo if final_output is None else final_output + wo
        remainder = rem_n if remainder is None else remainder + rem_n
        cum = cum + h * cont_mask
        running = cont
        if not running.any():
            break

    raw = np.stack(raw_hist)
    wts = np.stack(weight_hist)
    records = []
    for b in range(rows):
        k = int(steps[b])
        records.append(
            HaltingRecord(
                raw_probs=[float(v) for v in raw[:k, b]],
                weights=[float(v) for v in wts[:k, b]],
                steps_taken=k,
                remainder=float(np.atleast_1d(remainder.data)[b]),
                remainder_tensor=remainder if single else remainder[b],
            )
        )
    return ACTOutput(
        final_state=final_state,
        final_output=final_output,
        record=records[0] if single else records,
        intermediate_states=states,
        intermediate_outputs=outputs,
        aux=aux,
        steps=steps[0] if single else steps,
        remainder=remainder,
        step_weights=wts[:, 0] if single else wts,
    )


def ponder_cost(record: HaltingRecord) -> Tensor:
    """``N + R`` for one run; only the remainder carries a gradient."""
    if record.remainder_tensor is None:
        return Tensor(record.steps_taken + record.remainder)
    return record.remainder_tensor + float(record.steps_taken)


def ponder_costs(out: ACTOutput) -> Tensor:
    """Vectorised :func:`ponder_cost` over every row of a batched run."""
    return out.remainder + out.steps.astype(float)
