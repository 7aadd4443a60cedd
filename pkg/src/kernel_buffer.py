"""
Kernel spectral boundary buffer maintenance.

After local training a client rescores its old buffer together with the
round's new data under the trained model, measures every candidate's
diversity (DS), information (IDV) and consistency (CDV) against the old
buffer with a Gaussian kernel on normalized logits, splits the capacity
across seen categories by average IDV, and refills each category:
two-stage IDV-then-CDV screening for historical categories, IDV-weighted
sampling without replacement for new ones.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import eigvalsh
from scipy.spatial.distance import cdist

from data_stream import Sample
from errors import ContractViolationError
from model_core import PROB_FLOOR, CategoryMask, ModelParams, forward, masked_softmax

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
KERNEL_MASS_FLOOR = 1e-300
EIGEN_FLOOR = 1e-12


class BufferPolicy(str, Enum):
    """How a category's slots are filled."""

    KERNEL = 'kernel'              # two-stage screening / IDV-weighted sampling
    IDV_SAMPLING = 'idv_sampling'  # IDV-weighted sampling for every category
    RANDOM = 'random'              # category-balanced uniform sampling


# ========== Domain types ==========


@dataclass(eq=False)
class ScoredItem:
    """
    A sample with its embedding under the current model.

    g_hat is the unit-norm logit vector restricted to the seen categories
    (ascending id); probs is the masked softmax over C_max outputs.
    """

    sample: Sample
    g_hat: np.ndarray
    probs: np.ndarray

    @property
    def id(self) -> int:
        return self.sample.id

    @property
    def label(self) -> int:
        return self.sample.label

    @property
    def p_true(self) -> float:
        return max(float(self.probs[self.sample.label]), PROB_FLOOR)


@dataclass
class Buffer:
    """Per-category replay store with total capacity M."""

    capacity: int
    per_category: Dict[int, List[ScoredItem]] = field(default_factory=dict)
    quotas: Dict[int, int] = field(default_factory=dict)
    seen: FrozenSet[int] = frozenset()
    beta: float = 1.0

    def items(self) -> List[ScoredItem]:
        """All items ordered by category, then sample id."""
        return [item for c in sorted(self.per_category) for item in self.per_category[c]]

    def samples(self) -> List[Sample]:
        return [item.sample for item in self.items()]

    def labels(self) -> FrozenSet[int]:
        return frozenset(c for c, items in self.per_category.items() if items)

    def sizes(self) -> Dict[int, int]:
        return {c: len(items) for c, items in sorted(self.per_category.items())}

    def is_empty(self) -> bool:
        return len(self) == 0

    def __len__(self) -> int:
        return sum(len(items) for items in self.per_category.values())

    def snapshot_lines(self, round_index: int) -> List[str]:
        """Line-oriented debug dump: one line per category with its sample ids."""
        lines = []
        for c in sorted(self.per_category):
            ids = ','.join(str(item.id) for item in self.per_category[c])
            lines.append(f"round={round_index} category={c} quota={self.quotas.get(c, 0)} ids={ids}")
        return lines


@dataclass(eq=False)
class MaintenanceInputs:
    """Everything one maintenance call needs."""

    old_buffer: Buffer
    new_data: Sequence[Sample]
    model: ModelParams
    old_categories: CategoryMask
    all_categories: CategoryMask

    def __post_init__(self):
        if not self.old_categories.active <= self.all_categories.active:
            raise ContractViolationError("old categories must be a subset of all categories")


@dataclass(eq=False)
class CandidateScore:
    """Selection scores of one candidate against the old buffer."""

    item: ScoredItem
    ds: float
    idv: float
    cdv: float


ItemsLike = Union[Buffer, Sequence[ScoredItem]]


def _as_items(old: ItemsLike) -> List[ScoredItem]:
    return old.items() if isinstance(old, Buffer) else list(old)


# ========== Scoring ==========


def score_samples(model: ModelParams, samples: Sequence[Sample],
                  mask: CategoryMask) -> List[ScoredItem]:
    """
    Normalized logits and masked probabilities of samples under a model.

    Args:
        model: Post-training local model
        samples: Samples to embed
        mask: Seen categories C^{<=t}; fixes the embedding dimension

    Returns:
        One ScoredItem per sample, in input order
    """
    if not samples:
        return []
    X = np.stack([s.features for s in samples])
    logits = forward(model, X)
    probs = masked_softmax(logits, mask)
    g = logits[:, mask.indices()]
    norms = np.linalg.norm(g, axis=1)
    degenerate = norms < NORM_FLOOR
    g_hat = g / np.where(degenerate, 1.0, norms)[:, None]
    if np.any(degenerate):
        logger.warning("%d samples have zero logits; using the first basis vector",
                       int(degenerate.sum()))
        g_hat[degenerate] = 0.0
        g_hat[degenerate, 0] = 1.0
    return [ScoredItem(sample=s, g_hat=g_hat[i], probs=probs[i]) for i, s in enumerate(samples)]


def compute_beta(old_buffer_size: int, d: int) -> float:
    """Kernel decay rate: |M|^(2/d), or 1 for an empty buffer."""
    if d < 1:
        raise ContractViolationError("effective dimension d must be >= 1")
    if old_buffer_size <= 0:
        return 1.0
    return float(old_buffer_size) ** (2.0 / d)


def kernel(g1: np.ndarray, g2: np.ndarray, beta: float) -> float:
    """Gaussian kernel exp(-beta * ||g1 - g2||^2)."""
    diff = np.asarray(g1, dtype=float) - np.asarray(g2, dtype=float)
    return float(np.exp(-beta * float(diff @ diff)))


def ds_score(item: ScoredItem, old_buffer: ItemsLike) -> float:
    """Minimum squared distance from item to the old buffer; 0 if empty."""
    old = _as_items(old_buffer)
    if not old:
        return 0.0
    G = np.stack([o.g_hat for o in old])
    return float(np.min(np.sum((G - item.g_hat) ** 2, axis=1)))


def adaptive_factors(old_size: int, log_base: float = math.e) -> Tuple[float, float]:
    """(lambda1, lambda2) = (log|M| / sqrt|M|, 1 / sqrt|M|); both 0 when empty."""
    if old_size <= 0:
        return 0.0, 0.0
    root = math.sqrt(old_size)
    return math.log(old_size, log_base) / root, 1.0 / root


def conditional_predictives(item: ScoredItem, old_buffer: ItemsLike,
                            beta: float) -> Tuple[float, float]:
    """
    Kernel-smoothed probability of the item's label before and after adding it.

    Returns:
        (p_before, p_after); both equal p(c|x) for an empty buffer or when
        every kernel weight underflows
    """
    old = _as_items(old_buffer)
    p = item.p_true
    if not old:
        return p, p
    weights = np.array([kernel(item.g_hat, o.g_hat, beta) for o in old])
    b = float(weights.sum())
    if b < KERNEL_MASS_FLOOR:
        return p, p
    stored = np.array([o.probs[item.label] for o in old])
    a = float(weights @ stored)
    sqdist = np.array([float(np.sum((item.g_hat - o.g_hat) ** 2)) for o in old])
    shifted = np.exp(-beta * (sqdist - sqdist.min()))
    return float(shifted @ stored) / float(shifted.sum()), (a + p) / (b + 1.0)


def idv(item: ScoredItem, old_buffer: ItemsLike, beta: float,
        historical: bool = True, log_base: float = math.e) -> float:
    """
    Information-diversity value.

    Args:
        item: Candidate
        old_buffer: Buffer before this round
        beta: Kernel decay rate
        historical: Whether the item's label is in C^{<t}; new-category
            items use their own predicted probability
        log_base: Base of every logarithm in the score
    """
    old = _as_items(old_buffer)
    lambda1, _ = adaptive_factors(len(old), log_base)
    ds = ds_score(item, old)
    if historical:
        p_before, _ = conditional_predictives(item, old, beta)
    else:
        p_before = item.p_true
    return -math.log(max(p_before, PROB_FLOOR), log_base) + lambda1 * ds


def cdv(item: ScoredItem, old_buffer: ItemsLike, beta: float,
        historical: bool = True, log_base: float = math.e) -> float:
    """Consistency-diversity value; 0 for new-category items."""
    if not historical:
        return 0.0
    old = _as_items(old_buffer)
    _, lambda2 = adaptive_factors(len(old), log_base)
    _, p_after = conditional_predictives(item, old, beta)
    return math.log(item.p_true / max(p_after, PROB_FLOOR), log_base) + lambda2 * ds_score(item, old)


def score_candidates(items: Sequence[ScoredItem], old_buffer: ItemsLike, beta: float,
                     old_categories: CategoryMask,
                     log_base: float = math.e) -> List[CandidateScore]:
    """
    DS, IDV and CDV of every candidate against the old buffer, vectorized.

    Args:
        items: Candidates (old buffer and new data, rescored)
        old_buffer: Rescored old buffer
        beta: Kernel decay rate
        old_categories: C^{<t}
        log_base: Base of the logarithms in IDV, CDV and lambda1

    Returns:
        CandidateScore per item, in input order
    """
    old = _as_items(old_buffer)
    if not items:
        return []
    lambda1, lambda2 = adaptive_factors(len(old), log_base)
    log_scale = 1.0 / math.log(log_base)
    labels = np.array([it.label for it in items], dtype=int)
    p_true = np.array([it.p_true for it in items])
    historical = np.array([c in old_categories for c in labels]) & bool(old)

    if old:
        G_new = np.stack([it.g_hat for it in items])
        G_old = np.stack([o.g_hat for o in old])
        sqdist = cdist(G_new, G_old, 'sqeuclidean')
        ds = sqdist.min(axis=1)
        weights = np.exp(-beta * sqdist)
        P_old = np.stack([o.probs for o in old])[:, labels]
        a = np.einsum('ij,ji->i', weights, P_old)
        b = weights.sum(axis=1)
        # Weights relative to the nearest old item; a lone old item gives exactly its probability
        shifted = np.exp(-beta * (sqdist - ds[:, None]))
        ratio = np.einsum('ij,ji->i', shifted, P_old) / shifted.sum(axis=1)
        underflow = historical & (b < KERNEL_MASS_FLOOR)
        if np.any(underflow):
            logger.warning("%d candidates have no kernel mass; using own probability",
                           int(underflow.sum()))
        safe_b = np.where(underflow, 1.0, b)
        p_before = np.where(historical & ~underflow, ratio, p_true)
        p_after = np.where(historical & ~underflow, (a + p_true) / (safe_b + 1.0), p_true)
    else:
        ds = np.zeros(len(items))
        p_before = p_true
        p_after = p_true

    idvs = -np.log(np.maximum(p_before, PROB_FLOOR)) * log_scale + lambda1 * ds
    cdvs = np.where(historical,
                    np.log(p_true / np.maximum(p_after, PROB_FLOOR)) * log_scale + lambda2 * ds,
                    0.0)
    return [CandidateScore(item=it, ds=float(ds[i]), idv=float(idvs[i]), cdv=float(cdvs[i]))
            for i, it in enumerate(items)]


# ========== Selection ==========


def allocate_quotas(capacity: int, categories: Sequence[int],
                    aidv_per_category: Mapping[int, float]) -> Dict[int, int]:
    """
    Split capacity M across categories: Q each, plus one for the top-R AIDV.

    Ties in AIDV are broken by ascending category id.
    """
    categories = list(categories)
    if not categories:
        raise ContractViolationError("cannot allocate quotas over zero categories")
    base, remainder = divmod(capacity, len(categories))
    ranked = sorted(categories, key=lambda c: (-aidv_per_category.get(c, -math.inf), c))
    bonus = set(ranked[:remainder])
    return {c: base + (1 if c in bonus else 0) for c in categories}


def select_old_category(candidates: Sequence[CandidateScore], quota: int) -> List[CandidateScore]:
    """
    Two-stage screening for a historical category.

    Stage 1 keeps the top min(2q, n) by IDV, stage 2 the top q of those by
    CDV; ties go to the lower sample id. Result is ordered by sample id.
    """
    if quota <= 0:
        return []
    stage1 = sorted(candidates, key=lambda cs: (-cs.idv, cs.item.id))[:min(2 * quota, len(candidates))]
    stage2 = sorted(stage1, key=lambda cs: (-cs.cdv, cs.item.id))[:quota]
    return sorted(stage2, key=lambda cs: cs.item.id)


def select_new_category(candidates: Sequence[CandidateScore], quota: int,
                        rng: np.random.Generator) -> List[CandidateScore]:
    """
    Draw min(q, n) candidates without replacement, each draw proportional to exp(IDV).

    Uses Gumbel-top-k keys IDV + Gumbel(0, 1) over candidates ordered by
    sample id; no random numbers are consumed when every candidate (or none)
    is taken. Result is ordered by sample id.
    """
    pool = sorted(candidates, key=lambda cs: cs.item.id)
    if quota <= 0:
        return []
    if quota >= len(pool):
        return pool
    keys = np.array([cs.idv for cs in pool]) + rng.gumbel(size=len(pool))
    order = sorted(range(len(pool)), key=lambda i: (-keys[i], pool[i].item.id))
    return sorted((pool[i] for i in order[:quota]), key=lambda cs: cs.item.id)


def select_random_category(candidates: Sequence[CandidateScore], quota: int,
                           rng: np.random.Generator) -> List[CandidateScore]:
    """Uniform sampling without replacement; result ordered by sample id."""
    pool = sorted(candidates, key=lambda cs: cs.item.id)
    if quota <= 0:
        return []
    if quota >= len(pool):
        return pool
    chosen = rng.choice(len(pool), size=quota, replace=False)
    return [pool[i] for i in sorted(chosen)]


def maintain_scored(old_items: Sequence[ScoredItem], new_items: Sequence[ScoredItem],
                    capacity: int, old_categories: CategoryMask, all_categories: CategoryMask,
                    rng: np.random.Generator,
                    policy: BufferPolicy = BufferPolicy.KERNEL,
                    log_base: float = math.e) -> Buffer:
    """
    Build the next buffer from already rescored old-buffer and new items.

    Categories are filled in ascending id order, so draws from rng are
    consumed in a fixed order.
    """
    d = len(all_categories)
    beta = compute_beta(len(old_items), d)
    candidates = score_candidates(list(old_items) + list(new_items), old_items, beta,
                                  old_categories, log_base)

    categories = sorted(all_categories.active)
    by_category: Dict[int, List[CandidateScore]] = {c: [] for c in categories}
    for cs in candidates:
        by_category[cs.item.label].append(cs)

    aidv = {c: (float(np.mean([cs.idv for cs in pool])) if pool else -math.inf)
            for c, pool in by_category.items()}
    quotas = allocate_quotas(capacity, categories, aidv)

    selected: Dict[int, List[ScoredItem]] = {}
    for c in categories:
        pool, quota = by_category[c], quotas[c]
        if not pool:
            logger.warning("category %d has no candidates for %d slots", c, quota)
        if policy == BufferPolicy.RANDOM:
            chosen = select_random_category(pool, quota, rng)
        elif policy == BufferPolicy.IDV_SAMPLING or c not in old_categories:
            chosen = select_new_category(pool, quota, rng)
        else:
            chosen = select_old_category(pool, quota)
        if chosen:
            selected[c] = [cs.item for cs in chosen]

    size = sum(len(v) for v in selected.values())
    logger.debug("buffer refilled: %d/%d items over %d categories (beta=%.4g)",
                 size, capacity, len(categories), beta)
    return Buffer(capacity=capacity, per_category=selected, quotas=quotas,
                  seen=all_categories.active, beta=compute_beta(size, d))


def maintain(inputs: MaintenanceInputs, rng: np.random.Generator,
             policy: BufferPolicy = BufferPolicy.KERNEL,
             log_base: float = math.e) -> Buffer:
    """
    Construct the round's buffer from the old buffer and the new data.

    Args:
        inputs: Old buffer, new data, post-training model and category sets
        rng: Sampling stream for new categories (and the random policy)
        policy: Selection policy
        log_base: Base of the logarithms in the selection scores

    Returns:
        New buffer; every stored embedding refreshed to the current model
    """
    for s in inputs.new_data:
        if s.label not in inputs.all_categories:
            raise ContractViolationError(f"new sample {s.id} has unseen label {s.label}")
    old_samples = inputs.old_buffer.samples()
    scored = score_samples(inputs.model, old_samples + list(inputs.new_data),
                           inputs.all_categories)
    return maintain_scored(scored[:len(old_samples)], scored[len(old_samples):],
                           inputs.old_buffer.capacity, inputs.old_categories,
                           inputs.all_categories, rng, policy, log_base)


# ========== Diagnostics ==========


def gram_matrix(items: Sequence[ScoredItem], beta: float) -> np.ndarray:
    """Gaussian Gram matrix over the items' normalized logits."""
    G = np.stack([it.g_hat for it in items])
    return np.exp(-beta * cdist(G, G, 'sqeuclidean'))


def condition_number(buffer: ItemsLike, beta: float) -> float:
    """
    lambda_max / max(lambda_min, 1e-12) of the buffer's Gram matrix.

    Args:
        buffer: Nonempty buffer (or list of items)
        beta: Kernel decay rate
    """
    items = _as_items(buffer)
    if not items:
        raise ContractViolationError("condition number of an empty buffer")
    eigenvalues = eigvalsh(gram_matrix(items, beta))
    return float(eigenvalues[-1] / max(eigenvalues[0], EIGEN_FLOOR))
