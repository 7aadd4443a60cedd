"""
Straight-line reference of buffer maintenance.

Recomputes distances, kernel weights, IDV/CDV, quotas and per-category
selection with plain loops and the math module, consuming random numbers
in the same order as kernel_buffer. Used to cross-check the vectorized
implementation.
"""

import math
from typing import Dict, List, Sequence, Set

import numpy as np

from kernel_buffer import ScoredItem

FLOOR = 1e-12
MASS_FLOOR = 1e-300


def _sqdist(a: Sequence[float], b: Sequence[float]) -> float:
    total = 0.0
    for x, y in zip(a, b):
        total += (float(x) - float(y)) ** 2
    return total


def reference_scores(candidates: Sequence[ScoredItem], old: Sequence[ScoredItem],
                     old_categories: Set[int], d: int) -> Dict[int, tuple]:
    """Per candidate id: (ds, idv, cdv)."""
    n_old = len(old)
    beta = n_old ** (2.0 / d) if n_old else 1.0
    lam1 = math.log(n_old) / math.sqrt(n_old) if n_old else 0.0
    lam2 = 1.0 / math.sqrt(n_old) if n_old else 0.0

    scores = {}
    for x in candidates:
        p = max(float(x.probs[x.label]), FLOOR)
        dists = [_sqdist(x.g_hat, o.g_hat) for o in old]
        ds = min(dists) if dists else 0.0
        if old and x.label in old_categories:
            a = 0.0
            b = 0.0
            a_near = 0.0
            b_near = 0.0
            for o, dist in zip(old, dists):
                k = math.exp(-beta * dist)
                a += k * float(o.probs[x.label])
                b += k
                # relative to the nearest old item
                k_near = math.exp(-beta * (dist - ds))
                a_near += k_near * float(o.probs[x.label])
                b_near += k_near
            if b < MASS_FLOOR:
                p_before = p
                p_after = p
            else:
                p_before = a_near / b_near
                p_after = (a + p) / (b + 1.0)
            idv = -math.log(max(p_before, FLOOR)) + lam1 * ds
            cdv = math.log(p / max(p_after, FLOOR)) + lam2 * ds
        else:
            idv = -math.log(p) + lam1 * ds
            cdv = 0.0
        scores[x.id] = (ds, idv, cdv)
    return scores


def reference_quotas(capacity: int, categories: Sequence[int],
                     aidv: Dict[int, float]) -> Dict[int, int]:
    n = len(categories)
    q = capacity // n
    r = capacity - q * n
    ranked = sorted(categories, key=lambda c: (-aidv[c], c))
    quotas = {}
    for pos, c in enumerate(ranked):
        quotas[c] = q + 1 if pos < r else q
    return quotas


def reference_maintain(old: Sequence[ScoredItem], new: Sequence[ScoredItem], capacity: int,
                       old_categories: Set[int], all_categories: Set[int],
                       rng: np.random.Generator) -> Dict[int, List[int]]:
    """
    Selected sample ids per category, ascending.

    Historical categories use two-stage IDV-then-CDV screening; new
    categories draw with Gumbel keys over id-ordered candidates.
    """
    candidates = list(old) + list(new)
    scores = reference_scores(candidates, old, old_categories, len(all_categories))

    categories = sorted(all_categories)
    pools: Dict[int, List[ScoredItem]] = {c: [] for c in categories}
    for x in candidates:
        pools[x.label].append(x)

    aidv = {}
    for c in categories:
        if pools[c]:
            aidv[c] = sum(scores[x.id][1] for x in pools[c]) / len(pools[c])
        else:
            aidv[c] = -math.inf
    quotas = reference_quotas(capacity, categories, aidv)

    result = {}
    for c in categories:
        pool = sorted(pools[c], key=lambda x: x.id)
        q = quotas[c]
        if q <= 0 or not pool:
            chosen = []
        elif c in old_categories:
            stage1 = sorted(pool, key=lambda x: (-scores[x.id][1], x.id))[:min(2 * q, len(pool))]
            chosen = sorted(stage1, key=lambda x: (-scores[x.id][2], x.id))[:q]
        elif q >= len(pool):
            chosen = pool
        else:
            noise = rng.gumbel(size=len(pool))
            keyed = [(scores[x.id][1] + float(noise[i]), x.id, x) for i, x in enumerate(pool)]
            keyed.sort(key=lambda e: (-e[0], e[1]))
            chosen = [e[2] for e in keyed[:q]]
        if chosen:
            result[c] = sorted(x.id for x in chosen)
    return result
