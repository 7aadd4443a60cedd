"""
Acceptance suite: property checks of the building blocks plus the
directional benchmark on the synthetic stream.

`suite --quick` runs every check; the full suite additionally sweeps the
overlap O over {0, 2, 4, 5} for every method (ablation table) and buffer
capacity and client count for FedKACE (sensitivity table).
"""

import csv
import json
import logging
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from buffer_reference import reference_maintain, reference_quotas
from config import ExperimentConfig
from data_stream import Sample, ScheduleConfig, build_schedule, draw_round_data, test_set
from errors import OutputError
from federation import (
    VARIANTS,
    ExperimentResult,
    MethodVariant,
    mean_aa,
    resolve_aggregation,
    run_experiment,
)
from kernel_buffer import ScoredItem, allocate_quotas, maintain_scored
from metrics import eval_accuracy, write_outputs
from model_core import CategoryMask, ModelParams, loss_and_grad_arrays
from replay_trainer import ReplayWeightState, update_lambda
from switch_monitor import GapMonitorState, SwitchRule, inference_model, observe
from utils.helpers import format_float

logger = logging.getLogger(__name__)

BENCHMARK_SEEDS = (1, 2, 3)
BENCHMARK_METHODS = (MethodVariant.FEDKACE, MethodVariant.LOCALKACE, MethodVariant.FEDAVG,
                     MethodVariant.AS6, MethodVariant.CENTRALIZED)
SWEEP_OVERLAPS = (0, 2, 4, 5)
SWEEP_METHODS = (MethodVariant.FEDKACE, MethodVariant.FEDAVG, MethodVariant.LOCALKACE,
                 MethodVariant.AS1, MethodVariant.AS2, MethodVariant.AS3, MethodVariant.AS4,
                 MethodVariant.AS5, MethodVariant.AS6, MethodVariant.AS7)
ABLATION_HEADER = ['overlap', 'method', 'aa', 'ar', 'cond_window_mean']
SENSITIVITY_CAPACITIES = (100, 200, 400)
SENSITIVITY_CLIENTS = (5, 10)
SENSITIVITY_HEADER = ['overlap', 'num_clients', 'capacity', 'aa', 'ar', 'cond_window_mean']


@dataclass
class CheckResult:
    """Outcome of one acceptance check."""

    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    limit_seconds: Optional[float] = None


@dataclass
class SuiteReport:
    checks: List[CheckResult] = field(default_factory=list)
    ablation: List[Dict[str, object]] = field(default_factory=list)
    sensitivity: List[Dict[str, object]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _timed(name: str, limit: Optional[float],
           fn: Callable[[], Tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    ok, detail = fn()
    seconds = time.perf_counter() - start
    if limit is not None and seconds > limit:
        ok = False
        detail = f"{detail}; took {seconds:.1f}s, limit {limit:.0f}s"
    logger.info("[%s] %s: %s (%.2fs)", 'PASS' if ok else 'FAIL', name, detail, seconds)
    return CheckResult(name=name, passed=ok, detail=detail, seconds=seconds, limit_seconds=limit)


# ========== Gradients ==========


def numerical_gradient(params: ModelParams, X: np.ndarray, y: np.ndarray,
                       mask: CategoryMask, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the mean masked cross-entropy, flattened."""
    grads = []
    for array in params.arrays():
        g = np.zeros_like(array)
        it = np.nditer(array, flags=['multi_index'])
        for _ in it:
            idx = it.multi_index
            original = array[idx]
            array[idx] = original + h
            plus, _ = loss_and_grad_arrays(params, X, y, mask)
            array[idx] = original - h
            minus, _ = loss_and_grad_arrays(params, X, y, mask)
            array[idx] = original
            g[idx] = (plus - minus) / (2.0 * h)
        grads.append(g.ravel())
    return np.concatenate(grads)


def gradient_relative_error(rng: np.random.Generator) -> float:
    """Analytic against numerical gradient on one random instance."""
    feature_dim, hidden_dim, c_max = (int(v) for v in rng.integers(2, 7, size=3))
    params = ModelParams.initialize(rng, feature_dim, hidden_dim, c_max)
    params.b1 = rng.standard_normal(hidden_dim) * 0.1
    params.bH = rng.standard_normal(c_max) * 0.1
    active = rng.choice(c_max, size=int(rng.integers(1, c_max + 1)), replace=False)
    mask = CategoryMask.of(active, c_max)
    n = int(rng.integers(1, 9))
    X = rng.standard_normal((n, feature_dim))
    y = rng.choice(active, size=n)
    _, grad = loss_and_grad_arrays(params, X, y, mask)
    analytic = grad.full_vector()
    numeric = numerical_gradient(params, X, y, mask)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(instances: int = 50, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = max(gradient_relative_error(rng) for _ in range(instances))
    return worst < 1e-4, f"max relative error {worst:.3g} over {instances} instances"


# ========== Buffer ==========


def random_buffer_instance(rng: np.random.Generator):
    """
    A small maintenance problem with both historical and new categories.

    Returns:
        (old items, new items, capacity, old categories, all categories, c_max)
    """
    d = int(rng.integers(2, 4))
    c_max = d + int(rng.integers(0, 2))
    all_cats = sorted(int(c) for c in rng.choice(c_max, size=d, replace=False))
    n_old_cats = int(rng.integers(1, d))
    old_cats = all_cats[:n_old_cats]
    capacity = int(rng.integers(1, 7))
    next_id = [int(rng.integers(0, 50))]

    def item(label: int) -> ScoredItem:
        g = rng.standard_normal(d)
        g /= np.linalg.norm(g)
        probs = np.zeros(c_max)
        probs[all_cats] = rng.dirichlet(np.ones(d))
        sid = next_id[0]
        next_id[0] += int(rng.integers(1, 4))
        return ScoredItem(sample=Sample(id=sid, features=np.zeros(1), label=label),
                          g_hat=g, probs=probs)

    n_old = int(rng.integers(1, min(capacity, 6) + 1))
    old = [item(int(rng.choice(old_cats))) for _ in range(n_old)]
    n_new = int(rng.integers(1, 12 - n_old + 1))
    new_cats = all_cats[n_old_cats:]
    new = [item(new_cats[0])]
    new += [item(int(rng.choice(all_cats))) for _ in range(n_new - 1)]
    return old, new, capacity, set(old_cats), set(all_cats), c_max


def buffer_matches_reference(rng: np.random.Generator) -> bool:
    old, new, capacity, old_cats, all_cats, c_max = random_buffer_instance(rng)
    draw_seed = int(rng.integers(0, 2 ** 31))
    buffer = maintain_scored(old, new, capacity, CategoryMask.of(old_cats, c_max),
                             CategoryMask.of(all_cats, c_max), np.random.default_rng(draw_seed))
    got = {c: [it.id for it in items] for c, items in buffer.per_category.items()}
    expected = reference_maintain(old, new, capacity, old_cats, all_cats,
                                  np.random.default_rng(draw_seed))
    return got == expected


def check_buffer_oracle(instances: int = 500, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mismatches = sum(0 if buffer_matches_reference(rng) else 1 for _ in range(instances))
    return mismatches == 0, f"{mismatches} mismatches over {instances} instances"


def check_quota_law(instances: int = 200, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        capacity = int(rng.integers(0, 500))
        n_cats = int(rng.integers(1, 60))
        cats = list(range(n_cats))
        aidv = {c: float(v) for c, v in zip(cats, rng.standard_normal(n_cats))}
        quotas = allocate_quotas(capacity, cats, aidv)
        q, r = divmod(capacity, n_cats)
        values = list(quotas.values())
        if (sum(values) != capacity or any(v not in (q, q + 1) for v in values)
                or sum(1 for v in values if v == q + 1) != r
                or quotas != reference_quotas(capacity, cats, aidv)):
            return False, f"quota law broken for M={capacity}, |C|={n_cats}: {quotas}"
    return True, f"{instances} (M, |C|) pairs"


# ========== Switch rule ==========


def scan_switch_round(gaps: Sequence[float], single: bool = False) -> Optional[int]:
    """First round whose gap shrank (twice in a row unless single), scanning directly."""
    for t in range(2, len(gaps) + 1):
        shrank = gaps[t - 1] - gaps[t - 2] < 0
        if single and shrank:
            return t
        if not single and t >= 3 and shrank and gaps[t - 2] - gaps[t - 3] < 0:
            return t
    return None


def replay_monitor(gaps: Sequence[float],
                   rule: SwitchRule = SwitchRule.CONSECUTIVE) -> List[GapMonitorState]:
    states, state = [], GapMonitorState()
    for t, gap in enumerate(gaps, start=1):
        state = observe(state, t, gap, rule)
        states.append(state)
    return states


def check_switch_replay(sequences: int = 1000, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(sequences):
        length = int(rng.integers(1, 30))
        if rng.random() < 0.5:
            gaps = list(rng.integers(0, 4, size=length) / 4.0)
        else:
            gaps = list(rng.random(length))
        states = replay_monitor(gaps)
        t_switch = states[-1].t_switch
        if t_switch != scan_switch_round(gaps):
            return False, f"t_switch {t_switch} != scan {scan_switch_round(gaps)} for {gaps}"
        if t_switch is not None and t_switch < 3:
            return False, f"t_switch {t_switch} < 3 for {gaps}"
        flags = [s.switched for s in states]
        if any(a and not b for a, b in zip(flags, flags[1:])):
            return False, f"switch reverted for {gaps}"
    return True, f"{sequences} gap sequences"


# ========== Replay weight ==========


def check_lambda_rule(seed: int = 0) -> Tuple[bool, str]:
    g = np.array([0.5, -1.0, 2.0])
    equal = ReplayWeightState()
    if equal.lam != 1.0:
        return False, f"initial lambda {equal.lam}"
    equal.accumulate(g, g)
    if update_lambda(equal) != 1.0:
        return False, "equal gradients do not give 1"
    doubled = ReplayWeightState()
    doubled.accumulate(g, 2 * g)
    if not math.isclose(update_lambda(doubled), 4.0, rel_tol=1e-12):
        return False, "doubled replay gradient does not give 4"

    cfg = ExperimentConfig(num_clients=2, num_rounds=4, c_max=8, window=3, overlap=1,
                           capacity=12, epochs=3, n_per_cat=10, n_test_per_cat=5,
                           seed=seed + 1, regret=False, workers=1)
    result = run_experiment(cfg, MethodVariant.FEDKACE)
    lambdas = [rec.lambda_mean for rm in result.series for rec in rm.clients]
    if min(lambdas) < 0:
        return False, f"negative lambda {min(lambdas)}"
    return True, f"unit cases hold; min lambda over a run {min(lambdas):.4g}"


# ========== Schedules ==========


def check_schedule() -> Tuple[bool, str]:
    cfg = ScheduleConfig(c_max=100, window=5, overlap=2, num_clients=3, num_rounds=40)
    for k in range(cfg.num_clients):
        sched = build_schedule(cfg, k)
        for a, b in zip(sched, sched[1:]):
            if len(set(a) & set(b)) != 2:
                return False, f"client {k}: adjacent overlap {len(set(a) & set(b))}"

    repeat = ScheduleConfig(c_max=20, window=5, overlap=5, num_clients=2, num_rounds=20)
    for k in range(repeat.num_clients):
        sched = build_schedule(repeat, k)
        for t in range(2, repeat.num_rounds + 1):
            same = sched[t - 1] == sched[t - 2]
            if same != ((t - 1) % repeat.window != 0):
                return False, f"client {k}: O=w pattern broken at round {t}"

    small = ScheduleConfig(c_max=10, window=4, overlap=1, num_clients=3, num_rounds=6,
                           n_per_cat=5, n_test_per_cat=3)
    ids = []
    for k in range(small.num_clients):
        for t, window in enumerate(build_schedule(small, k), start=1):
            ids.extend(s.id for s in draw_round_data(small, k, t, window).samples)
    test_ids = {s.id for s in test_set(small, range(small.c_max))}
    if len(ids) != len(set(ids)) or set(ids) & test_ids:
        return False, "sample ids collide"
    return True, "overlap, O=w repetition and id disjointness hold"


# ========== Directional benchmark ==========


def benchmark_config(base: ExperimentConfig, seed: int, overlap: int = 2,
                     num_clients: int = 5, capacity: int = 200) -> ExperimentConfig:
    """
    The shared benchmark: nearly separable categories, more of them than
    all clients' windows together cover in one round.
    """
    return replace(base, num_clients=num_clients, num_rounds=30, c_max=40, window=5,
                   overlap=overlap, capacity=capacity, epochs=5, feature_dim=16, hidden_dim=32,
                   n_per_cat=40, n_test_per_cat=20, noise_sigma=0.8, separation=1.5,
                   seed=seed, regret=False, replay_weight='auto', method='fedkace')


def run_benchmark(base: ExperimentConfig,
                  seeds: Sequence[int] = BENCHMARK_SEEDS,
                  methods: Sequence[MethodVariant] = BENCHMARK_METHODS,
                  overlap: int = 2) -> Dict[MethodVariant, List[ExperimentResult]]:
    results: Dict[MethodVariant, List[ExperimentResult]] = {m: [] for m in methods}
    for seed in seeds:
        cfg = benchmark_config(base, seed, overlap)
        for method in methods:
            results[method].append(run_experiment(cfg, method))
    return results


def mean_cond(results: Sequence[ExperimentResult]) -> float:
    values = [r.summary.cond_window_mean for r in results if r.summary.cond_window_mean is not None]
    return float(np.mean(values)) if values else math.nan


def directional_checks(results: Dict[MethodVariant, List[ExperimentResult]]
                       ) -> List[Tuple[str, bool, str]]:
    aa = {m: mean_aa(rs) for m, rs in results.items()}
    fk = aa[MethodVariant.FEDKACE]
    global_wins = fk > aa[MethodVariant.LOCALKACE] and fk > aa[MethodVariant.FEDAVG]
    cond_fk = mean_cond(results[MethodVariant.FEDKACE])
    cond_rand = mean_cond(results[MethodVariant.AS6])
    central = aa[MethodVariant.CENTRALIZED]
    bound = all(central >= v for m, v in aa.items() if m != MethodVariant.CENTRALIZED)
    summary = ', '.join(f"{m.value}={v:.4f}" for m, v in aa.items())
    return [
        ('global model beats local and unbuffered', global_wins, f"AA {summary}"),
        ('buffer conditioning', cond_fk <= cond_rand,
         f"windowed condition number fedkace={cond_fk:.4g}, as6={cond_rand:.4g}"),
        ('centralized upper bound', bound, f"AA {summary}"),
    ]


# ========== Forgetting ==========


def old_category_accuracy(result: ExperimentResult, cfg: ExperimentConfig) -> float:
    """
    Final-round accuracy on the categories each client saw before its last window.

    Uses every client's inference model; clients with no such category are
    skipped. NaN when no client has one.
    """
    scfg = cfg.schedule_config()
    spec = VARIANTS[result.variant]
    aggregated = resolve_aggregation(spec, cfg.aggregation) is not None
    accs = []
    for client in result.clients:
        old = client.seen.active - set(client.schedule[-1])
        if not old:
            continue
        received = result.server.global_model if aggregated else client.model
        model = inference_model(client.monitor, client.model, received, spec.inference)
        accs.append(eval_accuracy(model, client.seen, test_set(scfg, old)))
    return float(np.mean(accs)) if accs else math.nan


def run_forgetting(base: ExperimentConfig, seeds: Sequence[int] = BENCHMARK_SEEDS
                   ) -> Tuple[List[float], List[float]]:
    """Old-category accuracy of FedKACE per seed, with the adaptive and with a zero replay weight."""
    adaptive, zero = [], []
    for seed in seeds:
        cfg = benchmark_config(base, seed)
        adaptive.append(old_category_accuracy(run_experiment(cfg, MethodVariant.FEDKACE), cfg))
        silent = replace(cfg, replay_weight='zero')
        zero.append(old_category_accuracy(run_experiment(silent, MethodVariant.FEDKACE), silent))
    return adaptive, zero


def forgetting_check(adaptive: Sequence[float], zero: Sequence[float]) -> Tuple[bool, str]:
    """Replay must keep old categories better than no replay, on average over seeds."""
    mean_adaptive, mean_zero = float(np.mean(adaptive)), float(np.mean(zero))
    ok = mean_adaptive > mean_zero
    return ok, (f"old-category accuracy adaptive={mean_adaptive:.4f}, zero={mean_zero:.4f} "
                f"over {len(adaptive)} seeds")


# ========== Determinism ==========


def check_determinism(base: ExperimentConfig) -> Tuple[bool, str]:
    cfg = replace(base, num_clients=2, num_rounds=3, c_max=10, window=4, overlap=2,
                  capacity=16, epochs=2, n_per_cat=12, n_test_per_cat=6, seed=base.seed,
                  method='fedkace')
    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for attempt in range(2):
            central = run_experiment(cfg, MethodVariant.CENTRALIZED)
            result = run_experiment(cfg, MethodVariant.FEDKACE, reference=central.series)
            csv_path, json_path = write_outputs(Path(tmp) / str(attempt), result.series,
                                                result.summary)
            blobs.append((csv_path.read_bytes(), json_path.read_bytes()))
    same = blobs[0] == blobs[1]
    return same, "rerun outputs byte-identical" if same else "rerun outputs differ"


# ========== Overlap sweep ==========


def run_ablation(base: ExperimentConfig, seeds: Sequence[int] = BENCHMARK_SEEDS,
                 overlaps: Sequence[int] = SWEEP_OVERLAPS,
                 methods: Sequence[MethodVariant] = SWEEP_METHODS) -> List[Dict[str, object]]:
    """AA, AR and windowed condition number per (overlap, method), averaged over seeds."""
    rows = []
    for overlap in overlaps:
        per_method: Dict[MethodVariant, List[ExperimentResult]] = {m: [] for m in methods}
        for seed in seeds:
            cfg = benchmark_config(base, seed, overlap)
            central = run_experiment(cfg, MethodVariant.CENTRALIZED)
            for method in methods:
                per_method[method].append(run_experiment(cfg, method, reference=central.series))
        for method, results in per_method.items():
            ars = [r.summary.ar for r in results if r.summary.ar is not None]
            rows.append({
                'overlap': overlap,
                'method': method.value,
                'aa': mean_aa(results),
                'ar': float(np.mean(ars)) if ars else math.nan,
                'cond_window_mean': mean_cond(results),
            })
            logger.info("O=%d %s: AA %.4f", overlap, method.value, rows[-1]['aa'])
    return rows


def run_sensitivity(base: ExperimentConfig, seeds: Sequence[int] = BENCHMARK_SEEDS,
                    overlaps: Sequence[int] = SWEEP_OVERLAPS,
                    clients: Sequence[int] = SENSITIVITY_CLIENTS,
                    capacities: Sequence[int] = SENSITIVITY_CAPACITIES) -> List[Dict[str, object]]:
    """FedKACE AA, AR and windowed condition number per (overlap, K, M), averaged over seeds."""
    rows = []
    for overlap in overlaps:
        for num_clients in clients:
            per_capacity: Dict[int, List[ExperimentResult]] = {m: [] for m in capacities}
            for seed in seeds:
                # Centralized keeps no buffer, so one reference serves every capacity
                central = run_experiment(benchmark_config(base, seed, overlap, num_clients),
                                         MethodVariant.CENTRALIZED)
                for capacity in capacities:
                    cfg = benchmark_config(base, seed, overlap, num_clients, capacity)
                    per_capacity[capacity].append(
                        run_experiment(cfg, MethodVariant.FEDKACE, reference=central.series))
            for capacity, results in per_capacity.items():
                ars = [r.summary.ar for r in results if r.summary.ar is not None]
                rows.append({
                    'overlap': overlap,
                    'num_clients': num_clients,
                    'capacity': capacity,
                    'aa': mean_aa(results),
                    'ar': float(np.mean(ars)) if ars else math.nan,
                    'cond_window_mean': mean_cond(results),
                })
                logger.info("O=%d K=%d M=%d: AA %.4f", overlap, num_clients, capacity,
                            rows[-1]['aa'])
    return rows


# ========== Entry points ==========


def run_suite(base: ExperimentConfig, quick: bool = False) -> SuiteReport:
    """
    Run every acceptance check; the full suite adds the overlap and sensitivity sweeps.

    Args:
        base: Configuration supplying seed, workers and output directory
        quick: Skip the sweeps and their tables

    Returns:
        SuiteReport
    """
    report = SuiteReport()
    report.checks.append(_timed('gradient correctness', 10, check_gradients))
    report.checks.append(_timed('buffer oracle equivalence', 30, check_buffer_oracle))
    report.checks.append(_timed('quota law', 1, check_quota_law))
    report.checks.append(_timed('switch-rule replay', 1, check_switch_replay))
    report.checks.append(_timed('replay weight rule', 5, check_lambda_rule))
    report.checks.append(_timed('schedule properties', 5, check_schedule))

    start = time.perf_counter()
    results = run_benchmark(base)
    seconds = time.perf_counter() - start
    for name, ok, detail in directional_checks(results):
        if seconds > 300:
            ok, detail = False, f"{detail}; benchmark took {seconds:.0f}s, limit 300s"
        logger.info("[%s] %s: %s", 'PASS' if ok else 'FAIL', name, detail)
        report.checks.append(CheckResult(name=name, passed=ok, detail=detail,
                                         seconds=seconds, limit_seconds=300))

    report.checks.append(_timed('replay prevents forgetting', None,
                                lambda: forgetting_check(*run_forgetting(base))))
    report.checks.append(_timed('determinism', 60, lambda: check_determinism(base)))

    if not quick:
        report.ablation = run_ablation(base)
        report.sensitivity = run_sensitivity(base)

    failed = [c.name for c in report.checks if not c.passed]
    if failed:
        logger.warning("Suite failed: %s", ', '.join(failed))
    else:
        logger.info("Suite passed: %d checks", len(report.checks))
    return report


def write_report(report: SuiteReport, directory: Path) -> None:
    """suite.json with every check, plus ablation.csv and sensitivity.csv when the sweeps ran."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / 'suite.json', 'w') as f:
            json.dump({'passed': report.passed, 'checks': [asdict(c) for c in report.checks]},
                      f, indent=2, sort_keys=True)
            f.write('\n')
        if report.ablation:
            with open(directory / 'ablation.csv', 'w', newline='') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(ABLATION_HEADER)
                for row in report.ablation:
                    writer.writerow([row['overlap'], row['method'], format_float(row['aa']),
                                     format_float(row['ar']),
                                     format_float(row['cond_window_mean'])])
        if report.sensitivity:
            with open(directory / 'sensitivity.csv', 'w', newline='') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(SENSITIVITY_HEADER)
                for row in report.sensitivity:
                    writer.writerow([row['overlap'], row['num_clients'], row['capacity'],
                                     format_float(row['aa']), format_float(row['ar']),
                                     format_float(row['cond_window_mean'])])
    except OSError as e:
        raise OutputError(directory, e) from e
