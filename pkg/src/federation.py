"""
Federation orchestrator.

Drives the per-round protocol across K simulated clients and the server:
distribute the global model, train locally with replay, refresh the
buffers, aggregate, then run each client's switch check. Also hosts the
method registry (FedKACE, FedAvg, LocalKACE, Centralized and the seven
ablations).
"""

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

from data_stream import (
    RoundTask,
    Sample,
    ScheduleConfig,
    build_schedule,
    coverage_round,
    draw_round_data,
    test_set,
)
from errors import ConfigurationError, ContractViolationError, RunAbortedError, SimulationError
from kernel_buffer import Buffer, BufferPolicy, MaintenanceInputs, condition_number, maintain
from metrics import (
    ClientRoundRecord,
    RoundMetrics,
    RunSummary,
    attach_regret,
    eval_accuracy,
    make_run_id,
    summarize,
)
from model_core import CategoryMask, ModelParams, params_average
from replay_trainer import LambdaMode, LocalTrainingConfig, LocalTrainReport, train_round
from switch_monitor import (
    GapMonitorState,
    InferencePolicy,
    SwitchRule,
    evaluate_gap,
    inference_model,
    observe,
)
from utils.helpers import default_worker_count, format_percentage, get_host_info
from utils.rng import Stream, stream

if TYPE_CHECKING:
    from config import ExperimentConfig

logger = logging.getLogger(__name__)


# ========== Method registry ==========


class MethodVariant(str, Enum):
    """Every method a run can execute."""

    FEDKACE = 'fedkace'
    FEDAVG = 'fedavg'
    LOCALKACE = 'localkace'
    CENTRALIZED = 'centralized'
    AS1 = 'as1'
    AS2 = 'as2'
    AS3 = 'as3'
    AS4 = 'as4'
    AS5 = 'as5'
    AS6 = 'as6'
    AS7 = 'as7'

    @classmethod
    def parse(cls, name: str) -> 'MethodVariant':
        """Resolve a method name or alias (case-insensitive)."""
        key = str(name).strip().lower().replace('-', '').replace('_', '')
        key = METHOD_ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown method {name!r}") from None


METHOD_ALIASES = {
    'lkc': 'localkace',
    'local': 'localkace',
    'central': 'centralized',
    'centralised': 'centralized',
    'fedavgnobuffer': 'fedavg',
}


@dataclass(frozen=True)
class VariantSpec:
    """The protocol modifications a method makes."""

    description: str
    aggregation: Optional[str]              # 'mean' | 'weighted' | None for no server
    replay: bool
    buffer_policy: Optional[BufferPolicy]   # None: no buffer kept
    lambda_mode: LambdaMode
    switch_rule: Optional[SwitchRule]       # None: no switch check
    inference: InferencePolicy
    centralized: bool = False


VARIANTS: Dict[MethodVariant, VariantSpec] = {
    MethodVariant.FEDKACE: VariantSpec(
        'full protocol', 'mean', True, BufferPolicy.KERNEL, LambdaMode.ADAPTIVE,
        SwitchRule.CONSECUTIVE, InferencePolicy.ADAPTIVE),
    MethodVariant.FEDAVG: VariantSpec(
        'sample-weighted averaging, no buffer or replay', 'weighted', False, None,
        LambdaMode.ADAPTIVE, None, InferencePolicy.GLOBAL),
    MethodVariant.LOCALKACE: VariantSpec(
        'FedKACE without aggregation', None, True, BufferPolicy.KERNEL, LambdaMode.ADAPTIVE,
        SwitchRule.CONSECUTIVE, InferencePolicy.ADAPTIVE),
    MethodVariant.CENTRALIZED: VariantSpec(
        'per-client training on cumulative data', None, False, None, LambdaMode.ADAPTIVE,
        None, InferencePolicy.LOCAL, centralized=True),
    MethodVariant.AS1: VariantSpec(
        'switch on the first shrinking gap', 'mean', True, BufferPolicy.KERNEL,
        LambdaMode.ADAPTIVE, SwitchRule.SINGLE, InferencePolicy.ADAPTIVE),
    MethodVariant.AS2: VariantSpec(
        'always infer with the global model', 'mean', True, BufferPolicy.KERNEL,
        LambdaMode.ADAPTIVE, SwitchRule.CONSECUTIVE, InferencePolicy.GLOBAL),
    MethodVariant.AS3: VariantSpec(
        'always infer with the local model', 'mean', True, BufferPolicy.KERNEL,
        LambdaMode.ADAPTIVE, SwitchRule.CONSECUTIVE, InferencePolicy.LOCAL),
    MethodVariant.AS4: VariantSpec(
        'replay weight pinned at 1', 'mean', True, BufferPolicy.KERNEL,
        LambdaMode.FIXED, SwitchRule.CONSECUTIVE, InferencePolicy.ADAPTIVE),
    MethodVariant.AS5: VariantSpec(
        'IDV-weighted sampling for every category', 'mean', True, BufferPolicy.IDV_SAMPLING,
        LambdaMode.ADAPTIVE, SwitchRule.CONSECUTIVE, InferencePolicy.ADAPTIVE),
    MethodVariant.AS6: VariantSpec(
        'category-balanced random buffer', 'mean', True, BufferPolicy.RANDOM,
        LambdaMode.ADAPTIVE, SwitchRule.CONSECUTIVE, InferencePolicy.ADAPTIVE),
    MethodVariant.AS7: VariantSpec(
        'random buffer and replay weight pinned at 1', 'mean', True, BufferPolicy.RANDOM,
        LambdaMode.FIXED, SwitchRule.CONSECUTIVE, InferencePolicy.ADAPTIVE),
}


# ========== State ==========


@dataclass
class ClientState:
    """
    Everything one client owns between rounds.

    Random streams are not stored: each round derives its own from
    (seed, purpose, client, round).
    """

    client_id: int
    model: ModelParams
    buffer: Buffer
    seen: CategoryMask
    schedule: List[Tuple[int, ...]]
    monitor: GapMonitorState = field(default_factory=GapMonitorState)
    cumulative: List[Sample] = field(default_factory=list)
    gap_log: List[float] = field(default_factory=list)
    buffer_log: List[str] = field(default_factory=list)


@dataclass
class ServerState:
    """Global model and round counter."""

    global_model: ModelParams
    initial_model: ModelParams
    round: int = 0


@dataclass
class ClientUpdate:
    """Result of one client's training and buffer steps, applied at the barrier."""

    client_id: int
    report: LocalTrainReport
    buffer: Buffer
    seen: CategoryMask
    num_samples: int
    new_cumulative: List[Sample]


@dataclass
class ExperimentResult:
    """Everything a finished run produced."""

    variant: MethodVariant
    series: List[RoundMetrics]
    summary: RunSummary
    clients: List[ClientState]
    server: ServerState


def resolve_aggregation(spec: VariantSpec, override: str) -> Optional[str]:
    """Aggregation weighting actually used; variants without a server stay None."""
    if spec.aggregation is None or override == 'auto':
        return spec.aggregation
    return override


def resolve_lambda_mode(spec: VariantSpec, override: str) -> LambdaMode:
    """Replay-weight mode actually used; methods without replay keep their own."""
    if not spec.replay or override == 'auto':
        return spec.lambda_mode
    return LambdaMode(override)


def init_states(cfg: 'ExperimentConfig',
                variant: MethodVariant) -> Tuple[ServerState, List[ClientState]]:
    """Initial server model and per-client states for a run."""
    scfg = cfg.schedule_config()
    initial = ModelParams.initialize(stream(cfg.seed, Stream.MODEL_INIT),
                                     cfg.feature_dim, cfg.hidden_dim, cfg.c_max)
    server = ServerState(global_model=initial.copy(), initial_model=initial)
    clients = [
        ClientState(client_id=k, model=initial.copy(), buffer=Buffer(capacity=cfg.capacity),
                    seen=CategoryMask(frozenset(), cfg.c_max), schedule=build_schedule(scfg, k))
        for k in range(cfg.num_clients)
    ]
    return server, clients


# ========== Round ==========


def _client_step(client: ClientState, start_model: ModelParams, t: int, spec: VariantSpec,
                 scfg: ScheduleConfig, tcfg: LocalTrainingConfig,
                 cfg: 'ExperimentConfig') -> ClientUpdate:
    """Steps (1) to (3) for one client; reads shared state only."""
    window = client.schedule[t - 1]
    task = draw_round_data(scfg, client.client_id, t, window)
    all_mask = client.seen.union(window)
    train_rng = stream(cfg.seed, Stream.SHUFFLE, client.client_id, t)

    if spec.centralized:
        cumulative = client.cumulative + task.samples
        cumulative_task = RoundTask(client=client.client_id, round=t,
                                    categories=tuple(sorted(all_mask.active)), samples=cumulative)
        report = train_round(start_model, cumulative_task, Buffer(capacity=0), client.seen,
                             tcfg, stream(cfg.seed, Stream.CENTRALIZED, client.client_id, t))
        return ClientUpdate(client.client_id, report, client.buffer, all_mask,
                            len(task.samples), cumulative)

    replay_buffer = client.buffer if spec.replay else Buffer(capacity=client.buffer.capacity)
    report = train_round(start_model, task, replay_buffer, client.seen, tcfg, train_rng)

    if spec.buffer_policy is None:
        new_buffer = client.buffer
    else:
        new_buffer = maintain(
            MaintenanceInputs(old_buffer=client.buffer, new_data=task.samples, model=report.model,
                              old_categories=client.seen, all_categories=all_mask),
            stream(cfg.seed, Stream.BUFFER, client.client_id, t),
            spec.buffer_policy, cfg.log_base_value,
        )
        logger.debug("client %d round %d quotas %s", client.client_id, t, new_buffer.quotas)
    return ClientUpdate(client.client_id, report, new_buffer, all_mask, len(task.samples), [])


def _collect(futures_or_results: Sequence[Any], t: int) -> List[ClientUpdate]:
    updates, failures = [], {}
    for client_id, outcome in futures_or_results:
        try:
            updates.append(outcome.result() if hasattr(outcome, 'result') else outcome)
        except SimulationError as e:
            failures[client_id] = {'error': str(e), 'type': type(e).__name__,
                                   **getattr(e, 'diagnostics', {})}
        except (ArithmeticError, ValueError, MemoryError) as e:
            failures[client_id] = {'error': str(e), 'type': type(e).__name__}
    if failures:
        for diag in failures.values():
            diag['host'] = get_host_info()
        raise RunAbortedError(f"round {t}: {len(failures)} client(s) failed", failures)
    return updates


def run_round(server: ServerState, clients: Sequence[ClientState], t: int,
              variant: MethodVariant, cfg: 'ExperimentConfig',
              pool: Optional[Executor] = None) -> RoundMetrics:
    """
    Execute FL round t and update every state in place.

    Order per round: local training, buffer update, aggregation, switch
    check. Client steps run concurrently on the pool; the server state
    changes only after every client has finished.

    Args:
        server: Server state; server.round must equal t - 1
        clients: Client states ordered by id
        t: Round index
        variant: Method to execute
        cfg: Experiment configuration
        pool: Optional executor for the client steps

    Returns:
        RoundMetrics with one record per client

    Raises:
        RunAbortedError: if any client step failed
    """
    if t != server.round + 1:
        raise ContractViolationError(f"round {t} does not follow round {server.round}")
    spec = VARIANTS[variant]
    scfg = cfg.schedule_config()
    tcfg = replace(cfg.training_config(), replay=spec.replay,
                   lambda_mode=resolve_lambda_mode(spec, cfg.replay_weight))
    aggregation = resolve_aggregation(spec, cfg.aggregation)

    def start_model(client: ClientState) -> ModelParams:
        if aggregation is not None:
            return server.global_model
        if spec.centralized and cfg.centralized_start == 'cold':
            return server.initial_model
        return client.model

    def step(client: ClientState) -> ClientUpdate:
        return _client_step(client, start_model(client), t, spec, scfg, tcfg, cfg)

    if pool is None:
        outcomes = []
        for client in clients:
            try:
                outcomes.append((client.client_id, step(client)))
            except (SimulationError, ArithmeticError, ValueError, MemoryError) as e:
                outcomes.append((client.client_id, _Failed(e)))
    else:
        outcomes = [(client.client_id, pool.submit(step, client)) for client in clients]
    updates = _collect(outcomes, t)

    # Barrier: apply client results, then aggregate
    for client, update in zip(clients, updates):
        client.model = update.report.model
        client.buffer = update.buffer
        client.seen = update.seen
        if spec.centralized:
            client.cumulative = update.new_cumulative
        if cfg.dump_buffers:
            client.buffer_log.extend(client.buffer.snapshot_lines(t))

    if aggregation == 'weighted':
        server.global_model = params_average([c.model for c in clients],
                                             [u.num_samples for u in updates])
    elif aggregation == 'mean':
        server.global_model = params_average([c.model for c in clients])
    server.round = t

    metrics = RoundMetrics(round=t)
    for client, update in zip(clients, updates):
        received = server.global_model if aggregation is not None else client.model
        if spec.switch_rule is not None and not client.monitor.switched:
            if client.buffer.is_empty():
                logger.warning("client %d round %d: empty buffer, switch check skipped",
                               client.client_id, t)
            else:
                _, _, gap = evaluate_gap(received, client.buffer, client.seen)
                client.gap_log.append(gap)
                client.monitor = observe(client.monitor, t, gap, spec.switch_rule)
                if client.monitor.switched:
                    logger.info("client %d switched to global inference at round %d",
                                client.client_id, t)

        model = inference_model(client.monitor, client.model, received, spec.inference)
        acc = eval_accuracy(model, client.seen, test_set(scfg, client.seen.active))
        cond = None
        if not client.buffer.is_empty():
            cond = condition_number(client.buffer, client.buffer.beta)
            logger.debug("client %d round %d buffer %d items, beta %.4g, cond %.4g",
                         client.client_id, t, len(client.buffer), client.buffer.beta, cond)
        record = ClientRoundRecord(
            client=client.client_id, acc=acc, lambda_mean=update.report.lambda_mean,
            switched=client.monitor.switched, buffer_size=len(client.buffer), buffer_cond=cond,
        )
        ratios = update.report.ratio_means(tcfg.eps_den, tcfg.lambda_max)
        if ratios is not None:
            record.ratio_output, record.ratio_full = ratios
            logger.debug("client %d round %d replay ratio: output layer %.4g, full model %.4g",
                         client.client_id, t, *ratios)
        metrics.clients.append(record)
    return metrics


class _Failed:
    """Stand-in for a future whose call raised, used by sequential execution."""

    def __init__(self, error: BaseException):
        self.error = error

    def result(self):
        raise self.error


# ========== Experiment ==========


def decision_log(cfg: 'ExperimentConfig', variant: MethodVariant) -> Dict[str, Any]:
    """Choices recorded in the run summary."""
    spec = VARIANTS[variant]
    return {
        'aggregation': resolve_aggregation(spec, cfg.aggregation),
        'buffer_policy': spec.buffer_policy.value if spec.buffer_policy else None,
        'centralized_start': cfg.centralized_start if spec.centralized else None,
        'eps_den': cfg.eps_den,
        'gap_mask': 'seen categories',
        'inference': spec.inference.value,
        'lambda_averaging': cfg.lambda_averaging,
        'lambda_max': cfg.lambda_max,
        'lambda_mode': resolve_lambda_mode(spec, cfg.replay_weight).value,
        'log_base': cfg.log_base,
        'new_category_sampling': 'gumbel-top-k',
        'switch_rule': spec.switch_rule.value if spec.switch_rule else None,
    }


def run_experiment(cfg: 'ExperimentConfig', variant: Optional[MethodVariant] = None,
                   reference: Optional[Sequence[RoundMetrics]] = None) -> ExperimentResult:
    """
    Run T rounds of one method.

    Args:
        cfg: Validated experiment configuration
        variant: Method to run; defaults to cfg.method
        reference: Centralized series of the same config and seed; when
            given, every record gets its regret

    Returns:
        ExperimentResult with the per-round series and the summary
    """
    cfg.validate()
    variant = variant or MethodVariant.parse(cfg.method)
    server, clients = init_states(cfg, variant)
    workers = cfg.workers or default_worker_count(cfg.num_clients)

    logger.info("Starting %s: K=%d T=%d C_max=%d w=%d O=%d M=%d J=%d seed=%d",
                variant.value, cfg.num_clients, cfg.num_rounds, cfg.c_max, cfg.window,
                cfg.overlap, cfg.capacity, cfg.epochs, cfg.seed)
    logger.debug("Host: %s", get_host_info())
    if VARIANTS[variant].centralized and cfg.centralized_start == 'cold':
        logger.info("Centralized baseline retrains from the initial model every round")

    series: List[RoundMetrics] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, cfg.num_rounds + 1):
            rm = run_round(server, clients, t, variant, cfg, pool)
            series.append(rm)
            logger.info("round %d/%d: mean accuracy %s", t, cfg.num_rounds,
                        format_percentage(rm.mean_acc))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    if reference is not None:
        attach_regret(series, reference)

    echo = cfg.echo()
    echo['method'] = variant.value
    summary = summarize(
        series,
        run_id=make_run_id(variant.value, cfg.seed, echo),
        method=variant.value,
        seed=cfg.seed,
        config=echo,
        decisions=decision_log(cfg, variant),
        t_switch={c.client_id: c.monitor.t_switch for c in clients},
        coverage={c.client_id: coverage_round(c.schedule, cfg.c_max) for c in clients},
        cond_window=cfg.cond_window,
    )
    if summary.aa is not None:
        logger.info("Finished %s: AA %s%s", variant.value, format_percentage(summary.aa),
                    '' if summary.ar is None else f", AR {format_percentage(summary.ar)}")
    return ExperimentResult(variant=variant, series=series, summary=summary,
                            clients=clients, server=server)


def run_with_reference(cfg: 'ExperimentConfig',
                       variant: Optional[MethodVariant] = None) -> ExperimentResult:
    """Run a method together with its paired Centralized baseline for regret."""
    variant = variant or MethodVariant.parse(cfg.method)
    central = run_experiment(cfg, MethodVariant.CENTRALIZED)
    if variant == MethodVariant.CENTRALIZED:
        attach_regret(central.series, central.series)
        central.summary = _resummarize(cfg, central)
        return central
    return run_experiment(cfg, variant, reference=central.series)


def _resummarize(cfg: 'ExperimentConfig', result: ExperimentResult) -> RunSummary:
    s = result.summary
    return summarize(result.series, run_id=s.run_id, method=s.method, seed=s.seed,
                     config=s.config, decisions=s.decisions, t_switch=s.t_switch,
                     coverage=s.coverage, cond_window=cfg.cond_window)


def mean_aa(results: Sequence[ExperimentResult]) -> float:
    """Mean AA across seeds; NaN when no run produced rounds."""
    values = [r.summary.aa for r in results if r.summary.aa is not None]
    return float(sum(values) / len(values)) if values else math.nan
