"""
Streaming environment: per-client cyclic category schedules, disjoint
per-round sample generation from synthetic Gaussian categories, fixed test
sets and a line-oriented dataset dump.
"""

import csv
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, OutputError
from utils.rng import Stream, stream

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Sample:
    """A labeled feature vector with a run-unique id."""

    id: int
    features: np.ndarray
    label: int


@dataclass(eq=False)
class RoundTask:
    """The data one client sees in one round."""

    client: int
    round: int
    categories: Tuple[int, ...]
    samples: List[Sample]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class ScheduleConfig:
    """Parameters of the synthetic streaming environment."""

    c_max: int = 20
    num_clients: int = 5
    num_rounds: int = 30
    window: int = 5
    overlap: int = 2
    n_per_cat: int = 40
    n_test_per_cat: int = 20
    feature_dim: int = 16
    noise_sigma: float = 1.5
    separation: float = 1.0
    seed: int = 1

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if self.num_rounds < 0:
            raise ConfigurationError("num_rounds must be >= 0")
        if not 1 <= self.window <= self.c_max:
            raise ConfigurationError(f"window {self.window} must lie in [1, c_max={self.c_max}]")
        if not 0 <= self.overlap <= self.window:
            raise ConfigurationError(f"overlap {self.overlap} must lie in [0, window={self.window}]")
        if self.n_per_cat < 0 or self.n_test_per_cat < 0:
            raise ConfigurationError("sample counts must be non-negative")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")

    @property
    def stride(self) -> int:
        """Window advance per round; 0 for the repeat-then-jump pattern O = w."""
        return self.window - self.overlap

    @property
    def test_id_base(self) -> int:
        """First id of the reserved test-sample namespace."""
        return self.num_clients * max(self.num_rounds, 1) * self.c_max * max(self.n_per_cat, 1)


# ========== Schedules ==========


def client_permutation(cfg: ScheduleConfig, client: int) -> np.ndarray:
    """Client-specific seeded cyclic permutation of [0, C_max)."""
    return stream(cfg.seed, Stream.PERMUTATION, client).permutation(cfg.c_max)


def window_start(cfg: ScheduleConfig, round_index: int) -> int:
    """Start position of the round's window on the cyclic list."""
    if cfg.overlap < cfg.window:
        return ((round_index - 1) * cfg.stride) % cfg.c_max
    # O = w: the same window for w rounds, then advance by w
    block = (round_index - 1) // cfg.window
    return (block * cfg.window) % cfg.c_max


def windows_from_permutation(cfg: ScheduleConfig,
                             permutation: Sequence[int]) -> List[Tuple[int, ...]]:
    """Category windows for rounds 1..T over a given cyclic list."""
    windows = []
    for t in range(1, cfg.num_rounds + 1):
        start = window_start(cfg, t)
        windows.append(tuple(int(permutation[(start + i) % cfg.c_max])
                             for i in range(cfg.window)))
    return windows


def build_schedule(cfg: ScheduleConfig, client: int) -> List[Tuple[int, ...]]:
    """
    Category windows of one client for every round.

    Args:
        cfg: Environment configuration
        client: Client id

    Returns:
        List of length T; entry t-1 is the ordered window of round t
    """
    cfg.validate()
    return windows_from_permutation(cfg, client_permutation(cfg, client))


def coverage_round(schedule: Sequence[Sequence[int]], c_max: int) -> int:
    """First round by which all categories were seen, or 0 if never."""
    seen = set()
    for t, window in enumerate(schedule, start=1):
        seen.update(window)
        if len(seen) == c_max:
            return t
    return 0


def expected_coverage_round(cfg: ScheduleConfig) -> int:
    """Round by which a schedule is guaranteed to have covered every category."""
    if cfg.overlap == cfg.window:
        return math.ceil((cfg.c_max - cfg.window) / cfg.window) * cfg.window + 1
    return math.ceil((cfg.c_max - cfg.window) / cfg.stride) + 1


# ========== Samples ==========


@lru_cache(maxsize=32)
def category_means(cfg: ScheduleConfig) -> np.ndarray:
    """Run-constant category means, shape (C_max, feature_dim)."""
    rng = stream(cfg.seed, Stream.CATEGORY_MEANS)
    return rng.uniform(-1.0, 1.0, size=(cfg.c_max, cfg.feature_dim)) * cfg.separation


def _train_id(cfg: ScheduleConfig, client: int, round_index: int, category: int, i: int) -> int:
    return (((client * cfg.num_rounds) + (round_index - 1)) * cfg.c_max + category) \
        * cfg.n_per_cat + i


def draw_round_data(cfg: ScheduleConfig, client: int, round_index: int,
                    window: Sequence[int]) -> RoundTask:
    """
    Fresh samples for every category of a round's window.

    Args:
        cfg: Environment configuration
        client: Client id
        round_index: Round t in [1, T]
        window: Categories of the round, from build_schedule

    Returns:
        RoundTask with n_per_cat samples per category
    """
    means = category_means(cfg)
    samples = []
    for category in window:
        rng = stream(cfg.seed, Stream.TRAIN_DATA, client, round_index, category)
        noise = rng.standard_normal((cfg.n_per_cat, cfg.feature_dim)) * cfg.noise_sigma
        for i in range(cfg.n_per_cat):
            samples.append(Sample(
                id=_train_id(cfg, client, round_index, category, i),
                features=means[category] + noise[i],
                label=int(category),
            ))
    return RoundTask(client=client, round=round_index,
                     categories=tuple(int(c) for c in window), samples=samples)


def test_set(cfg: ScheduleConfig, categories: Iterable[int]) -> List[Sample]:
    """
    The fixed test samples of the requested categories.

    Args:
        cfg: Environment configuration
        categories: Nonempty set of category ids

    Returns:
        n_test_per_cat samples per category, ordered by category then index
    """
    categories = sorted({int(c) for c in categories})
    if not categories:
        raise ConfigurationError("test_set needs at least one category")
    means = category_means(cfg)
    samples = []
    for category in categories:
        rng = stream(cfg.seed, Stream.TEST_DATA, category)
        noise = rng.standard_normal((cfg.n_test_per_cat, cfg.feature_dim)) * cfg.noise_sigma
        for i in range(cfg.n_test_per_cat):
            samples.append(Sample(
                id=cfg.test_id_base + category * cfg.n_test_per_cat + i,
                features=means[category] + noise[i],
                label=category,
            ))
    return samples


def stack_samples(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Features and labels of a sample list as arrays."""
    if not samples:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    X = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=int)
    return X, y


# ========== Dataset dump ==========

DUMP_HEADER = ['id', 'round', 'label']


def dump_client_data(path: Path, cfg: ScheduleConfig, client: int) -> int:
    """
    Write every training sample of a client, one record per line.

    Columns: id, round, label, feat0 .. feat{feature_dim-1}.

    Returns:
        Number of records written
    """
    path = Path(path)
    schedule = build_schedule(cfg, client)
    count = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(DUMP_HEADER + [f'feat{i}' for i in range(cfg.feature_dim)])
            for t, window in enumerate(schedule, start=1):
                for s in draw_round_data(cfg, client, t, window).samples:
                    writer.writerow([s.id, t, s.label] + [repr(float(v)) for v in s.features])
                    count += 1
    except OSError as e:
        raise OutputError(path, e) from e
    logger.debug("Dumped %d samples of client %d to %s", count, client, path)
    return count


def load_client_data(path: Path) -> List[Tuple[int, Sample]]:
    """
    Read a client dump back.

    Returns:
        List of (round, Sample) in file order
    """
    records = []
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            features = np.array([float(v) for v in row[3:]])
            records.append((int(row[1]), Sample(id=int(row[0]), features=features,
                                                label=int(row[2]))))
    return records
