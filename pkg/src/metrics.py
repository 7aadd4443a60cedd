"""
Metrics and persistence: per-round accuracy on seen-category test sets,
regret against the Centralized baseline, AA/AR summaries, buffer
condition-number series, and the rounds.csv / summary.json writers.
"""

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from data_stream import Sample
from errors import ConfigurationError, OutputError, UndefinedMetricError
from model_core import CategoryMask, ModelParams, forward, masked_softmax
from utils.helpers import format_float

logger = logging.getLogger(__name__)

CSV_HEADER = ['run_id', 'method', 'seed', 'round', 'client', 'acc', 'regret',
              'lambda_mean', 'switched', 'buffer_size', 'buffer_cond']
ROUNDS_FILE = 'rounds.csv'
SUMMARY_FILE = 'summary.json'


@dataclass
class ClientRoundRecord:
    """One client's numbers for one round."""

    client: int
    acc: float
    lambda_mean: float
    switched: bool
    buffer_size: int
    buffer_cond: Optional[float] = None
    regret: Optional[float] = None
    ratio_output: Optional[float] = None
    ratio_full: Optional[float] = None


@dataclass
class RoundMetrics:
    """All clients' records for round t, ordered by client id."""

    round: int
    clients: List[ClientRoundRecord] = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        return float(np.mean([c.acc for c in self.clients]))

    @property
    def mean_regret(self) -> Optional[float]:
        regrets = [c.regret for c in self.clients]
        if not regrets or any(r is None for r in regrets):
            return None
        return float(np.mean(regrets))

    @property
    def mean_lambda(self) -> float:
        return float(np.mean([c.lambda_mean for c in self.clients]))

    @property
    def mean_cond(self) -> Optional[float]:
        conds = [c.buffer_cond for c in self.clients if c.buffer_cond is not None]
        return float(np.mean(conds)) if conds else None


@dataclass
class RunSummary:
    """End-of-run aggregates plus everything needed to reproduce the run."""

    run_id: str
    method: str
    seed: int
    rounds: int
    aa: Optional[float]
    ar: Optional[float]
    t_switch: Dict[int, Optional[int]]
    coverage: Dict[int, int]
    cond_window: int
    cond_window_mean: Optional[float]
    config: Dict[str, Any]
    decisions: Dict[str, Any]
    ratio_proxy: Optional[List[Dict[str, Any]]] = None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        # JSON object keys must be strings
        data['t_switch'] = {str(k): v for k, v in sorted(self.t_switch.items())}
        data['coverage'] = {str(k): v for k, v in sorted(self.coverage.items())}
        return data


# ========== Computation ==========


def eval_accuracy(model: ModelParams, mask: CategoryMask, test_samples: Sequence[Sample]) -> float:
    """
    Fraction of test samples classified correctly under the masked argmax.

    Args:
        model: Inference model
        mask: Seen categories C^{<=t}
        test_samples: Test set covering exactly the masked categories

    Returns:
        Accuracy in [0, 1]

    Raises:
        UndefinedMetricError: if the test set is empty
    """
    if not test_samples:
        raise UndefinedMetricError("accuracy over an empty test set")
    X = np.stack([s.features for s in test_samples])
    y = np.array([s.label for s in test_samples], dtype=int)
    probs = masked_softmax(forward(model, X), mask)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def regret(acc_centralized: float, acc_method: float) -> float:
    """Accuracy shortfall against the Centralized baseline; negative when ahead."""
    return acc_centralized - acc_method


def attach_regret(series: Sequence[RoundMetrics], reference: Sequence[RoundMetrics]) -> None:
    """
    Fill every record's regret from a paired Centralized series.

    Raises:
        ConfigurationError: if some (round, client) has no unique reference
    """
    ref: Dict[Tuple[int, int], float] = {}
    for rm in reference:
        for rec in rm.clients:
            key = (rm.round, rec.client)
            if key in ref:
                raise ConfigurationError(f"duplicate reference row for round {key[0]} client {key[1]}")
            ref[key] = rec.acc
    for rm in series:
        for rec in rm.clients:
            key = (rm.round, rec.client)
            if key not in ref:
                raise ConfigurationError(f"no reference row for round {key[0]} client {key[1]}")
            rec.regret = regret(ref[key], rec.acc)


def ratio_proxy_series(series: Sequence[RoundMetrics]) -> Optional[List[Dict[str, Any]]]:
    """Per-round client means of the output-layer and full-model replay ratios, if tracked."""
    rows = []
    for rm in series:
        pairs = [(c.ratio_output, c.ratio_full) for c in rm.clients if c.ratio_full is not None]
        if pairs:
            rows.append({'round': rm.round,
                         'output_layer': float(np.mean([p[0] for p in pairs])),
                         'full_model': float(np.mean([p[1] for p in pairs]))})
    return rows or None


def default_cond_window(num_rounds: int) -> int:
    """Final three quarters of the run."""
    return math.ceil(0.75 * num_rounds)


def summarize(series: Sequence[RoundMetrics], *, run_id: str, method: str, seed: int,
              config: Mapping[str, Any], decisions: Mapping[str, Any],
              t_switch: Mapping[int, Optional[int]], coverage: Mapping[int, int],
              cond_window: int = 0) -> RunSummary:
    """
    AA/AR over all rounds and the windowed condition-number mean.

    Args:
        series: Per-round metrics, one entry per round
        cond_window: Number of final rounds in the condition-number mean;
            0 selects the last 75% of the run

    Returns:
        RunSummary; AA and AR are None for an empty series, AR also when
        no regret was attached
    """
    n = len(series)
    aa = float(np.mean([rm.mean_acc for rm in series])) if n else None
    regrets = [rm.mean_regret for rm in series]
    ar = float(np.mean(regrets)) if n and all(r is not None for r in regrets) else None

    window = cond_window if cond_window > 0 else default_cond_window(n)
    conds = [rm.mean_cond for rm in series[max(0, n - window):]]
    conds = [c for c in conds if c is not None]
    cond_mean = float(np.mean(conds)) if conds else None

    return RunSummary(run_id=run_id, method=method, seed=seed, rounds=n, aa=aa, ar=ar,
                      t_switch=dict(t_switch), coverage=dict(coverage), cond_window=window,
                      cond_window_mean=cond_mean, config=dict(config),
                      decisions=dict(decisions),
                      ratio_proxy=ratio_proxy_series(series))


def make_run_id(method: str, seed: int, config: Mapping[str, Any]) -> str:
    """Deterministic id from method, seed and the resolved configuration."""
    payload = json.dumps({k: v for k, v in config.items() if k != 'output_dir'}, sort_keys=True)
    digest = hashlib.sha1(payload.encode('utf-8')).hexdigest()[:10]
    return f"{method}-s{seed}-{digest}"


# ========== Persistence ==========


def _optional_float(value: Optional[float]) -> str:
    return '' if value is None else format_float(value)


def csv_rows(series: Sequence[RoundMetrics], run_id: str, method: str,
             seed: int) -> List[List[str]]:
    rows = []
    for rm in series:
        for rec in rm.clients:
            rows.append([run_id, method, str(seed), str(rm.round), str(rec.client),
                         format_float(rec.acc), _optional_float(rec.regret),
                         format_float(rec.lambda_mean), str(int(rec.switched)),
                         str(rec.buffer_size), _optional_float(rec.buffer_cond)])
    return rows


def write_outputs(path: Path, series: Sequence[RoundMetrics],
                  summary: RunSummary) -> Tuple[Path, Path]:
    """
    Write rounds.csv and summary.json into a directory.

    Args:
        path: Output directory, created if missing
        series: Per-round metrics
        summary: Run summary

    Returns:
        (csv path, json path)

    Raises:
        OutputError: on any I/O failure, carrying the path
    """
    path = Path(path)
    csv_path = path / ROUNDS_FILE
    json_path = path / SUMMARY_FILE
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(path, e) from e

    try:
        with open(csv_path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(CSV_HEADER)
            writer.writerows(csv_rows(series, summary.run_id, summary.method, summary.seed))
    except OSError as e:
        raise OutputError(csv_path, e) from e

    try:
        with open(json_path, 'w') as f:
            json.dump(summary.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
    except OSError as e:
        raise OutputError(json_path, e) from e

    logger.info("Wrote %s and %s", csv_path, json_path)
    return csv_path, json_path


def read_rounds(path: Path) -> List[Dict[str, str]]:
    """Rows of a rounds.csv as dicts keyed by the header."""
    with open(path, 'r', newline='') as f:
        return list(csv.DictReader(f))
