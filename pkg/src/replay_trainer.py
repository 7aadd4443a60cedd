"""
Local training for one round: interleaved task and replay batches, total
loss L_task + lambda * L_rep, and a replay weight re-estimated after every
epoch from the output-layer gradients of both losses.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from data_stream import RoundTask, Sample, stack_samples
from errors import BufferCorruptionError, ContractViolationError
from kernel_buffer import Buffer
from model_core import (
    CategoryMask,
    ModelParams,
    OptimizerState,
    loss_and_grad_arrays,
    optimizer_step,
)

logger = logging.getLogger(__name__)


class LambdaMode(str, Enum):
    """How the replay weight evolves across epochs."""

    ADAPTIVE = 'adaptive'
    FIXED = 'fixed'  # pinned at 1
    ZERO = 'zero'    # replay term switched off


class GradientAveraging(str, Enum):
    """How per-batch gradients are pooled within an epoch."""

    VECTOR = 'vector'  # norm of the mean gradient vector
    NORM = 'norm'      # mean of per-batch squared norms


@dataclass(frozen=True)
class LocalTrainingConfig:
    """Hyperparameters of one client's local round."""

    epochs: int = 20
    batch_size: int = 32
    lr0: float = 0.01
    weight_decay: float = 0.001
    optimizer: str = 'adamw'
    lambda_mode: LambdaMode = LambdaMode.ADAPTIVE
    averaging: GradientAveraging = GradientAveraging.VECTOR
    lambda_max: float = 1e3
    eps_den: float = 1e-12
    replay: bool = True
    track_full_ratio: bool = False


@dataclass
class _RunningGradient:
    total: Optional[np.ndarray] = None
    squared_norm_total: float = 0.0
    count: int = 0

    def add(self, vector: np.ndarray) -> None:
        self.total = vector.copy() if self.total is None else self.total + vector
        self.squared_norm_total += float(vector @ vector)
        self.count += 1

    def squared_norm(self, averaging: GradientAveraging) -> float:
        if averaging == GradientAveraging.NORM:
            return self.squared_norm_total / self.count
        mean = self.total / self.count
        return float(mean @ mean)


@dataclass
class ReplayWeightState:
    """Replay weight and the epoch's running output-layer gradients."""

    lam: float = 1.0
    averaging: GradientAveraging = GradientAveraging.VECTOR
    running_task_grad: _RunningGradient = field(default_factory=_RunningGradient)
    running_rep_grad: _RunningGradient = field(default_factory=_RunningGradient)

    def accumulate(self, task_grad: np.ndarray, rep_grad: Optional[np.ndarray]) -> None:
        self.running_task_grad.add(task_grad)
        if rep_grad is not None:
            self.running_rep_grad.add(rep_grad)

    def reset(self) -> None:
        self.running_task_grad = _RunningGradient()
        self.running_rep_grad = _RunningGradient()


@dataclass
class LocalTrainReport:
    """Outcome of one local round."""

    model: ModelParams
    lambda_trace: List[float]
    task_loss_trace: List[float]
    replay_loss_trace: List[float]
    epochs: int
    grad_norm_trace: List[Tuple[float, float]] = field(default_factory=list)
    full_ratio_trace: List[float] = field(default_factory=list)

    @property
    def lambda_mean(self) -> float:
        return float(np.mean(self.lambda_trace)) if self.lambda_trace else 1.0

    def ratio_means(self, eps_den: float = 1e-12,
                    lambda_max: float = 1e3) -> Optional[Tuple[float, float]]:
        """
        Mean epoch-end replay ratio from output-layer and from full-model gradients.

        None unless full-model tracking produced a value for every epoch with replay.
        """
        if not self.full_ratio_trace or len(self.full_ratio_trace) != len(self.grad_norm_trace):
            return None
        output = [lambda_ratio(rep, task, eps_den, lambda_max) for task, rep in self.grad_norm_trace]
        return float(np.mean(output)), float(np.mean(self.full_ratio_trace))


def lambda_ratio(rep_squared_norm: float, task_squared_norm: float,
                 eps_den: float = 1e-12, lambda_max: float = 1e3) -> float:
    """Squared-norm ratio, guarded against a vanishing task gradient and clamped."""
    value = rep_squared_norm / max(task_squared_norm, eps_den)
    return min(max(value, 0.0), lambda_max)


def update_lambda(state: ReplayWeightState, eps_den: float = 1e-12,
                  lambda_max: float = 1e3) -> float:
    """
    Re-estimate the replay weight from the epoch's accumulated gradients.

    The accumulators are reset. Without replay batches in the epoch the
    weight is left unchanged.

    Returns:
        The new lambda
    """
    if state.running_task_grad.count == 0:
        raise ContractViolationError("update_lambda needs at least one task batch")
    if state.running_rep_grad.count > 0:
        state.lam = lambda_ratio(state.running_rep_grad.squared_norm(state.averaging),
                                 state.running_task_grad.squared_norm(state.averaging),
                                 eps_den, lambda_max)
    state.reset()
    return state.lam


def _replay_batches(samples: Sequence[Sample], batch_size: int,
                    rng: np.random.Generator) -> Iterator[List[Sample]]:
    """Endless batches over the buffer, reshuffled at every pass."""
    while True:
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            yield [samples[i] for i in order[start:start + batch_size]]


def train_round(global_model: ModelParams, task: RoundTask, buffer: Buffer,
                seen_categories: CategoryMask, cfg: LocalTrainingConfig,
                rng: np.random.Generator) -> LocalTrainReport:
    """
    Train a copy of the global model on the round's data plus replay.

    Args:
        global_model: Model received at the start of the round
        task: Nonempty round data D_k^t
        buffer: Buffer M_k^{t-1} (may be empty)
        seen_categories: Categories seen before this round, C_k^{<t}
        cfg: Local training hyperparameters
        rng: Shuffling stream of this client and round

    Returns:
        LocalTrainReport with the trained model and per-epoch traces
    """
    if not task.samples:
        raise ContractViolationError("train_round needs a nonempty task")
    c_max = global_model.c_max
    task_mask = CategoryMask.of(task.categories, c_max)

    replay_samples = buffer.samples() if cfg.replay else []
    stray = sorted({s.label for s in replay_samples} - seen_categories.active)
    if stray:
        raise BufferCorruptionError(f"buffer holds labels {stray} outside the seen categories")
    use_replay = bool(replay_samples) and cfg.lambda_mode != LambdaMode.ZERO

    X_task, y_task = stack_samples(task.samples)
    n_task = len(y_task)
    steps = math.ceil(n_task / cfg.batch_size)
    replay_iter = _replay_batches(replay_samples, cfg.batch_size, rng) if use_replay else None

    opt = OptimizerState(lr0=cfg.lr0, weight_decay=cfg.weight_decay,
                         total_epochs=cfg.epochs, kind=cfg.optimizer)
    state = ReplayWeightState(lam=1.0, averaging=cfg.averaging)
    full_state = ReplayWeightState(lam=1.0, averaging=cfg.averaging)
    model = global_model.copy()
    report = LocalTrainReport(model=model, lambda_trace=[], task_loss_trace=[],
                              replay_loss_trace=[], epochs=cfg.epochs)

    for epoch in range(1, cfg.epochs + 1):
        lam = state.lam
        report.lambda_trace.append(state.lam if cfg.lambda_mode != LambdaMode.ZERO else 0.0)
        task_losses, rep_losses = [], []
        order = rng.permutation(n_task)
        for step in range(steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            task_loss, grad = loss_and_grad_arrays(model, X_task[idx], y_task[idx], task_mask)
            task_losses.append(task_loss)
            rep_grad = None
            if replay_iter is not None:
                X_rep, y_rep = stack_samples(next(replay_iter))
                rep_loss, rep_grad = loss_and_grad_arrays(model, X_rep, y_rep, seen_categories)
                rep_losses.append(rep_loss)
                total = grad.plus(rep_grad, lam)
            else:
                total = grad
            state.accumulate(grad.output_layer_vector(),
                             rep_grad.output_layer_vector() if rep_grad is not None else None)
            if cfg.track_full_ratio:
                full_state.accumulate(grad.full_vector(),
                                      rep_grad.full_vector() if rep_grad is not None else None)
            model = optimizer_step(opt, model, total, epoch)

        report.task_loss_trace.append(float(np.mean(task_losses)))
        report.replay_loss_trace.append(float(np.mean(rep_losses)) if rep_losses else 0.0)
        if state.running_rep_grad.count:
            report.grad_norm_trace.append((
                state.running_task_grad.squared_norm(cfg.averaging),
                state.running_rep_grad.squared_norm(cfg.averaging),
            ))
        if cfg.track_full_ratio and full_state.running_rep_grad.count:
            report.full_ratio_trace.append(update_lambda(full_state, cfg.eps_den, cfg.lambda_max))
        else:
            full_state.reset()
        if cfg.lambda_mode == LambdaMode.ADAPTIVE:
            update_lambda(state, cfg.eps_den, cfg.lambda_max)
        else:
            state.reset()
        logger.debug("epoch %d: task loss %.4f, replay loss %.4f, lambda %.4g",
                     epoch, report.task_loss_trace[-1], report.replay_loss_trace[-1], lam)

    report.model = model
    return report
