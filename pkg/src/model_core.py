"""
Model core: a one-hidden-layer classifier with a fixed-width masked output
layer, exact analytic gradients, an AdamW optimizer with cosine schedule,
and parameter averaging for aggregation.

The model is theta = {phi, h}: phi(x) = tanh(W1 x + b1) is the feature
extractor and h(z) = H z + bH the output layer with C_max rows.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    ConfigurationError,
    ContractViolationError,
    InvalidMaskError,
    TrainingDivergedError,
)

if TYPE_CHECKING:
    from data_stream import Sample

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


# ========== Domain types ==========


@dataclass(eq=False)
class ModelParams:
    """All weights of the two-part model."""

    W1: np.ndarray
    b1: np.ndarray
    H: np.ndarray
    bH: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def c_max(self) -> int:
        return self.H.shape[0]

    @classmethod
    def zeros(cls, feature_dim: int, hidden_dim: int, c_max: int) -> 'ModelParams':
        """All-zero parameters."""
        return cls(
            W1=np.zeros((hidden_dim, feature_dim)),
            b1=np.zeros(hidden_dim),
            H=np.zeros((c_max, hidden_dim)),
            bH=np.zeros(c_max),
        )

    @classmethod
    def initialize(cls, rng: np.random.Generator, feature_dim: int, hidden_dim: int,
                   c_max: int) -> 'ModelParams':
        """
        Random initialization scaled by fan-in.

        Args:
            rng: Generator for the initial weights
            feature_dim: Input dimension
            hidden_dim: Width of the hidden layer
            c_max: Fixed output width

        Returns:
            New ModelParams with zero biases
        """
        return cls(
            W1=rng.standard_normal((hidden_dim, feature_dim)) * feature_dim ** -0.5,
            b1=np.zeros(hidden_dim),
            H=rng.standard_normal((c_max, hidden_dim)) * hidden_dim ** -0.5,
            bH=np.zeros(c_max),
        )

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.W1, self.b1, self.H, self.bH)

    def copy(self) -> 'ModelParams':
        return ModelParams(*(a.copy() for a in self.arrays()))

    def scaled(self, factor: float) -> 'ModelParams':
        return ModelParams(*(a * factor for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def shapes(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(a.shape for a in self.arrays())


@dataclass(frozen=True)
class CategoryMask:
    """Set of active output ids; everything else is masked out."""

    active: FrozenSet[int]
    c_max: int

    def __post_init__(self):
        bad = [c for c in self.active if not 0 <= c < self.c_max]
        if bad:
            raise InvalidMaskError(f"category ids {sorted(bad)} outside [0, {self.c_max})")

    @classmethod
    def of(cls, ids: Iterable[int], c_max: int) -> 'CategoryMask':
        return cls(frozenset(int(i) for i in ids), c_max)

    def indices(self) -> np.ndarray:
        """Active ids in ascending order."""
        return np.array(sorted(self.active), dtype=int)

    def union(self, ids: Iterable[int]) -> 'CategoryMask':
        return CategoryMask(self.active | frozenset(int(i) for i in ids), self.c_max)

    def is_empty(self) -> bool:
        return not self.active

    def __len__(self) -> int:
        return len(self.active)

    def __contains__(self, category: int) -> bool:
        return category in self.active


@dataclass(eq=False)
class GradientBundle:
    """Gradients with the same shapes as ModelParams."""

    dW1: np.ndarray
    db1: np.ndarray
    dH: np.ndarray
    dbH: np.ndarray
    output_layer_only: bool = False

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.dW1, self.db1, self.dH, self.dbH)

    def output_layer_vector(self) -> np.ndarray:
        """Flattened gradient of the output layer h = (H, bH)."""
        return np.concatenate([self.dH.ravel(), self.dbH])

    def full_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def plus(self, other: 'GradientBundle', weight: float = 1.0) -> 'GradientBundle':
        """Return self + weight * other."""
        return GradientBundle(
            *(a + weight * b for a, b in zip(self.arrays(), other.arrays())),
            output_layer_only=self.output_layer_only and other.output_layer_only,
        )


@dataclass
class OptimizerState:
    """
    Decoupled-weight-decay adaptive-moment optimizer state.

    Owned by exactly one client worker at a time. kind='sgd' gives plain
    gradient descent with the same schedule and decoupled decay.
    """

    lr0: float = 0.01
    weight_decay: float = 0.001
    total_epochs: int = 20
    kind: str = 'adamw'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ('adamw', 'sgd'):
            raise ConfigurationError(f"unknown optimizer kind {self.kind!r}")
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")

    def ensure_moments(self, params: ModelParams) -> None:
        if not self.first_moment:
            self.first_moment = [np.zeros_like(a) for a in params.arrays()]
            self.second_moment = [np.zeros_like(a) for a in params.arrays()]


# ========== Operations ==========


def _check_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.feature_dim:
        raise ConfigurationError(
            f"input has {x.shape[-1]} features, model expects {params.feature_dim}"
        )
    return x


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """
    Raw logits h(phi(x)).

    Args:
        params: Model parameters
        x: One feature vector (feature_dim,) or a batch (n, feature_dim)

    Returns:
        Logits of length C_max (or shape (n, C_max) for a batch)
    """
    x = _check_features(params, x)
    hidden = np.tanh(x @ params.W1.T + params.b1)
    return hidden @ params.H.T + params.bH


def masked_softmax(logits: np.ndarray, mask: CategoryMask) -> np.ndarray:
    """
    Softmax over the active ids only; inactive ids get exactly 0.

    Works on a single logit vector or row-wise on a matrix.
    """
    if mask.is_empty():
        raise InvalidMaskError("softmax over an empty category mask")
    logits = np.asarray(logits, dtype=float)
    if logits.shape[-1] != mask.c_max:
        raise ConfigurationError(
            f"logits have width {logits.shape[-1]}, mask expects {mask.c_max}"
        )
    idx = mask.indices()
    active = logits[..., idx]
    active = active - active.max(axis=-1, keepdims=True)
    exp = np.exp(active)
    probs = np.zeros_like(logits)
    probs[..., idx] = exp / exp.sum(axis=-1, keepdims=True)
    return probs


def loss_and_grad_arrays(params: ModelParams, X: np.ndarray, y: np.ndarray,
                         mask: CategoryMask,
                         output_layer_only: bool = False) -> Tuple[float, GradientBundle]:
    """
    Masked cross-entropy mean and its exact gradient on stacked arrays.

    Args:
        params: Model parameters
        X: Features, shape (n, feature_dim)
        y: Integer labels, shape (n,)
        mask: Active categories; every label must be active
        output_layer_only: Restrict the gradient to H/bH

    Returns:
        (loss, gradient)
    """
    X = _check_features(params, X)
    y = np.asarray(y, dtype=int)
    n = len(y)
    if n == 0:
        raise ContractViolationError("loss over an empty batch")
    outside = sorted({int(c) for c in y if int(c) not in mask})
    if outside:
        raise ContractViolationError(f"labels {outside} are outside the loss mask")

    hidden = np.tanh(X @ params.W1.T + params.b1)
    logits = hidden @ params.H.T + params.bH
    probs = masked_softmax(logits, mask)
    rows = np.arange(n)
    loss = float(np.mean(-np.log(np.maximum(probs[rows, y], PROB_FLOOR))))

    # d(mean CE)/d(logits); inactive columns stay exactly zero
    delta = probs
    delta[rows, y] -= 1.0
    delta /= n

    dH = delta.T @ hidden
    dbH = delta.sum(axis=0)
    if output_layer_only:
        dW1 = np.zeros_like(params.W1)
        db1 = np.zeros_like(params.b1)
    else:
        d_pre = (delta @ params.H) * (1.0 - hidden ** 2)
        dW1 = d_pre.T @ X
        db1 = d_pre.sum(axis=0)
    return loss, GradientBundle(dW1, db1, dH, dbH, output_layer_only=output_layer_only)


def ce_loss_and_grad(params: ModelParams, batch: Sequence['Sample'], mask: CategoryMask,
                     output_layer_only: bool = False) -> Tuple[float, GradientBundle]:
    """
    Mean masked cross-entropy of a batch of samples and its analytic gradient.

    Args:
        params: Model parameters
        batch: Nonempty list of samples
        mask: Active categories; every label must be active
        output_layer_only: Restrict the gradient to the output layer

    Returns:
        (loss, gradient)
    """
    if not batch:
        raise ContractViolationError("loss over an empty batch")
    X = np.stack([s.features for s in batch])
    y = np.array([s.label for s in batch], dtype=int)
    return loss_and_grad_arrays(params, X, y, mask, output_layer_only)


def cosine_lr(lr0: float, epoch_index: int, total_epochs: int) -> float:
    """Learning rate at epoch j: lr0 * (1 + cos(pi * (j - 1) / J)) / 2."""
    return lr0 * (1.0 + math.cos(math.pi * (epoch_index - 1) / total_epochs)) / 2.0


def optimizer_step(opt: OptimizerState, params: ModelParams, grad: GradientBundle,
                   epoch_index: int) -> ModelParams:
    """
    Apply one optimizer update.

    Args:
        opt: Optimizer state, updated in place
        params: Current parameters (not modified)
        grad: Gradient at params
        epoch_index: Current epoch in [1, J]

    Returns:
        Updated parameters

    Raises:
        TrainingDivergedError: if the gradient or the result is not finite
    """
    if not 1 <= epoch_index <= opt.total_epochs:
        raise ContractViolationError(
            f"epoch_index {epoch_index} outside [1, {opt.total_epochs}]"
        )
    if not grad.is_finite():
        raise TrainingDivergedError(
            "non-finite gradient",
            {'step': opt.step, 'epoch': epoch_index,
             'grad_norms': [float(np.linalg.norm(g)) for g in grad.arrays()]},
        )

    lr = cosine_lr(opt.lr0, epoch_index, opt.total_epochs)
    opt.ensure_moments(params)
    opt.step += 1
    decay = 1.0 - lr * opt.weight_decay

    updated = []
    if opt.kind == 'sgd':
        for p, g in zip(params.arrays(), grad.arrays()):
            updated.append(p * decay - lr * g)
    else:
        bias1 = 1.0 - opt.beta1 ** opt.step
        bias2 = 1.0 - opt.beta2 ** opt.step
        for p, g, m, v in zip(params.arrays(), grad.arrays(),
                              opt.first_moment, opt.second_moment):
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            updated.append(p * decay - lr * m_hat / (np.sqrt(v_hat) + opt.eps))

    result = ModelParams(*updated)
    if not result.is_finite():
        raise TrainingDivergedError(
            "parameters became non-finite",
            {'step': opt.step, 'epoch': epoch_index, 'lr': lr},
        )
    return result


def params_average(models: Sequence[ModelParams],
                   weights: Optional[Sequence[float]] = None) -> ModelParams:
    """
    Elementwise mean of model parameters.

    Args:
        models: Nonempty list of models with identical shapes
        weights: Optional non-negative weights (sample counts for FedAvg);
            None gives the unweighted mean

    Returns:
        Averaged parameters
    """
    if not models:
        raise ConfigurationError("cannot average an empty list of models")
    shapes = models[0].shapes()
    for m in models[1:]:
        if m.shapes() != shapes:
            raise ConfigurationError(f"shape mismatch: {m.shapes()} vs {shapes}")

    if weights is None:
        w = np.full(len(models), 1.0 / len(models))
    else:
        w = np.asarray(weights, dtype=float)
        if len(w) != len(models) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigurationError("aggregation weights must be non-negative with positive sum")
        w = w / w.sum()

    # Averaging offsets from the first model keeps identical inputs exact
    base = models[0]
    averaged = []
    for i, ref in enumerate(base.arrays()):
        offsets = np.stack([m.arrays()[i] - ref for m in models])
        averaged.append(ref + np.tensordot(w, offsets, axes=1))
    return ModelParams(*averaged)
