"""
One-way local-to-global inference switch.

After each aggregation a client evaluates the received global model on its
updated buffer. The gap between buffer accuracy and mean true-class
probability is tracked round over round; once it shrinks in two consecutive
rounds the client infers with the global model from then on.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from errors import ContractViolationError
from kernel_buffer import Buffer
from model_core import CategoryMask, ModelParams, forward, masked_softmax

logger = logging.getLogger(__name__)


class SwitchRule(str, Enum):
    """When a shrinking gap triggers the switch."""

    CONSECUTIVE = 'consecutive'  # two rounds in a row
    SINGLE = 'single'            # the first shrinking round


class InferencePolicy(str, Enum):
    """Which model a client evaluates with."""

    ADAPTIVE = 'adaptive'
    GLOBAL = 'global'
    LOCAL = 'local'


@dataclass(frozen=True)
class GapMonitorState:
    """Running gap state; frozen once switched."""

    last_gap: Optional[float] = None
    last_delta_negative: bool = False
    switched: bool = False
    t_switch: Optional[int] = None


def evaluate_gap(global_model: ModelParams, buffer: Buffer,
                 seen: CategoryMask) -> Tuple[float, float, float]:
    """
    Accuracy, mean true-class probability and their clamped gap on a buffer.

    Args:
        global_model: Freshly aggregated model
        buffer: The client's updated buffer (nonempty)
        seen: Mask of categories seen so far

    Returns:
        (acc, prob, gap) with gap = max(0, acc - prob)
    """
    samples = buffer.samples()
    if not samples:
        raise ContractViolationError("gap evaluation needs a nonempty buffer")
    X = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=int)
    probs = masked_softmax(forward(global_model, X), seen)
    # argmax returns the lowest id among ties; inactive ids are exactly 0
    predicted = np.argmax(probs, axis=1)
    acc = float(np.mean(predicted == y))
    prob = float(np.mean(probs[np.arange(len(y)), y]))
    return acc, prob, max(0.0, acc - prob)


def observe(state: GapMonitorState, round_index: int, gap: float,
            rule: SwitchRule = SwitchRule.CONSECUTIVE) -> GapMonitorState:
    """
    Fold one round's gap into the monitor.

    Args:
        state: Current monitor state
        round_index: Round t of the observation
        gap: Gap of this round
        rule: Switching rule (SINGLE is the one-round ablation)

    Returns:
        New state; unchanged once switched
    """
    if state.switched:
        return state
    if state.last_gap is None:
        return replace(state, last_gap=gap, last_delta_negative=False)

    negative = gap - state.last_gap < 0
    triggered = negative and (rule == SwitchRule.SINGLE or state.last_delta_negative)
    if triggered:
        logger.debug("gap fell to %.4g at round %d; switching rule satisfied", gap, round_index)
        return GapMonitorState(last_gap=gap, last_delta_negative=True,
                               switched=True, t_switch=round_index)
    return replace(state, last_gap=gap, last_delta_negative=negative)


def inference_model(state: GapMonitorState, local: ModelParams, global_model: ModelParams,
                    policy: InferencePolicy = InferencePolicy.ADAPTIVE) -> ModelParams:
    """Model the client evaluates with under the given policy."""
    if policy == InferencePolicy.GLOBAL:
        return global_model
    if policy == InferencePolicy.LOCAL:
        return local
    return global_model if state.switched else local
