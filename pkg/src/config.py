"""
Experiment configuration.

Values resolve as dataclass defaults < JSON config file < command-line
flags. The default output directory comes from FEDKACE_OUTPUT_DIR.
"""

import argparse
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from data_stream import ScheduleConfig
from errors import ConfigurationError, UsageError
from federation import MethodVariant
from replay_trainer import GradientAveraging, LambdaMode, LocalTrainingConfig

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = 'FEDKACE_OUTPUT_DIR'
DEFAULT_OUTPUT_DIR = 'results'
LOG_BASES = {'e': math.e, '2': 2.0, '10': 10.0}
COMMANDS = ('run', 'suite', 'dump-schedule', 'dump-buffer')


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration of one run."""

    method: str = 'fedkace'
    num_clients: int = 5
    num_rounds: int = 30
    c_max: int = 20
    window: int = 5
    overlap: int = 2
    capacity: int = 200
    epochs: int = 20
    batch_size: int = 32
    lr0: float = 0.01
    weight_decay: float = 0.001
    optimizer: str = 'adamw'
    feature_dim: int = 16
    hidden_dim: int = 32
    n_per_cat: int = 40
    n_test_per_cat: int = 20
    noise_sigma: float = 1.5
    separation: float = 1.0
    seed: int = 1
    output_dir: str = field(default_factory=default_output_dir)
    log_base: str = 'e'
    lambda_max: float = 1e3
    eps_den: float = 1e-12
    lambda_averaging: str = 'vector'
    centralized_start: str = 'warm'
    aggregation: str = 'auto'
    replay_weight: str = 'auto'
    cond_window: int = 0
    workers: int = 0
    regret: bool = True
    track_full_ratio: bool = False
    dump_buffers: bool = False

    def validate(self) -> None:
        """
        Check every range constraint.

        Raises:
            UsageError: naming the first offending key
        """
        try:
            MethodVariant.parse(self.method)
        except ConfigurationError as e:
            raise UsageError('method', str(e)) from None
        positive = ('num_clients', 'c_max', 'window', 'epochs', 'batch_size',
                    'feature_dim', 'hidden_dim', 'n_test_per_cat')
        for key in positive:
            if getattr(self, key) < 1:
                raise UsageError(key, f"must be >= 1, got {getattr(self, key)}")
        non_negative = ('num_rounds', 'capacity', 'n_per_cat', 'cond_window', 'workers',
                        'weight_decay', 'noise_sigma', 'seed')
        for key in non_negative:
            if getattr(self, key) < 0:
                raise UsageError(key, f"must be >= 0, got {getattr(self, key)}")
        if self.n_per_cat < 1 and self.num_rounds > 0:
            raise UsageError('n_per_cat', "rounds need at least one sample per category")
        if self.window > self.c_max:
            raise UsageError('window', f"must be <= c_max ({self.c_max}), got {self.window}")
        if not 0 <= self.overlap <= self.window:
            raise UsageError('overlap', f"must lie in [0, window={self.window}], got {self.overlap}")
        if not self.lr0 > 0:
            raise UsageError('lr0', f"must be > 0, got {self.lr0}")
        if not self.lambda_max > 0:
            raise UsageError('lambda_max', f"must be > 0, got {self.lambda_max}")
        if not self.eps_den > 0:
            raise UsageError('eps_den', f"must be > 0, got {self.eps_den}")
        choices = {
            'optimizer': ('adamw', 'sgd'),
            'log_base': tuple(LOG_BASES),
            'lambda_averaging': tuple(m.value for m in GradientAveraging),
            'centralized_start': ('warm', 'cold'),
            'aggregation': ('auto', 'mean', 'weighted'),
            'replay_weight': ('auto',) + tuple(m.value for m in LambdaMode),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise UsageError(key, f"must be one of {', '.join(allowed)}, got {getattr(self, key)!r}")

    @property
    def log_base_value(self) -> float:
        return LOG_BASES[self.log_base]

    def schedule_config(self) -> ScheduleConfig:
        """Environment view of the configuration."""
        return ScheduleConfig(
            c_max=self.c_max, num_clients=self.num_clients, num_rounds=self.num_rounds,
            window=self.window, overlap=self.overlap, n_per_cat=self.n_per_cat,
            n_test_per_cat=self.n_test_per_cat, feature_dim=self.feature_dim,
            noise_sigma=self.noise_sigma, separation=self.separation, seed=self.seed,
        )

    def training_config(self) -> LocalTrainingConfig:
        """Local-training view of the configuration."""
        return LocalTrainingConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0,
            weight_decay=self.weight_decay, optimizer=self.optimizer,
            averaging=GradientAveraging(self.lambda_averaging), lambda_max=self.lambda_max,
            eps_den=self.eps_den, track_full_ratio=self.track_full_ratio,
        )

    def echo(self) -> Dict[str, Any]:
        """Result-affecting fields, as echoed into the run summary."""
        data = asdict(self)
        for key in ('output_dir', 'workers', 'dump_buffers'):
            data.pop(key)
        return data

    def with_overrides(self, **changes: Any) -> 'ExperimentConfig':
        return replace(self, **changes)


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    """Convert a raw file or flag value to the field's type."""
    kind = FIELD_TYPES[key]
    kind = kind if isinstance(kind, type) else {'int': int, 'float': float, 'str': str,
                                                'bool': bool}[kind]
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise UsageError(key, f"expected true/false, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise UsageError(key, f"expected an integer, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(key, f"expected {kind.__name__}, got {value!r}") from None


def load_config_file(path: Path) -> Dict[str, Any]:
    """
    Read a JSON object of config overrides.

    Raises:
        UsageError: for unknown keys or badly typed values
        ConfigurationError: if the file cannot be read or parsed
    """
    try:
        with open(path, 'r') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    values = {}
    for key, value in raw.items():
        if key not in FIELD_TYPES:
            raise UsageError(key, "unknown configuration key")
        values[key] = _coerce(key, value)
    return values


# ========== Command line ==========

# flag -> (field, type, help)
FLAGS: List[Tuple[str, str, Any, str]] = [
    ('--method', 'method', str, "fedkace, fedavg, localkace (lkc), centralized, as1..as7"),
    ('--clients', 'num_clients', int, "number of clients K"),
    ('--rounds', 'num_rounds', int, "number of FL rounds T"),
    ('--c-max', 'c_max', int, "number of categories C_max"),
    ('--window', 'window', int, "categories per round w"),
    ('--overlap', 'overlap', int, "categories shared by adjacent rounds O"),
    ('--capacity', 'capacity', int, "buffer capacity M"),
    ('--epochs', 'epochs', int, "local epochs J"),
    ('--batch-size', 'batch_size', int, "batch size"),
    ('--lr', 'lr0', float, "initial learning rate"),
    ('--weight-decay', 'weight_decay', float, "decoupled weight decay"),
    ('--optimizer', 'optimizer', str, "adamw or sgd"),
    ('--feature-dim', 'feature_dim', int, "input dimension"),
    ('--hidden-dim', 'hidden_dim', int, "hidden layer width"),
    ('--n-per-cat', 'n_per_cat', int, "training samples per category per round"),
    ('--n-test-per-cat', 'n_test_per_cat', int, "test samples per category"),
    ('--noise-sigma', 'noise_sigma', float, "within-category noise"),
    ('--separation', 'separation', float, "scale of the category means"),
    ('--seed', 'seed', int, "run seed"),
    ('--output', 'output_dir', str, f"output directory (default ${OUTPUT_DIR_ENV} or ./results)"),
    ('--log-base', 'log_base', str, "base of the selection-score logarithms: e, 2 or 10"),
    ('--lambda-max', 'lambda_max', float, "upper clamp of the replay weight"),
    ('--eps-den', 'eps_den', float, "floor of the replay-weight denominator"),
    ('--lambda-averaging', 'lambda_averaging', str, "vector or norm"),
    ('--centralized-start', 'centralized_start', str, "warm or cold"),
    ('--aggregation', 'aggregation', str, "auto, mean or weighted"),
    ('--replay-weight', 'replay_weight', str, "auto (the method's own), adaptive, fixed or zero"),
    ('--cond-window', 'cond_window', int, "rounds in the condition-number mean (0: last 75%%)"),
    ('--workers', 'workers', int, "worker threads (0: min(K, cpu count))"),
]

SWITCHES: List[Tuple[str, str, bool, str]] = [
    ('--no-regret', 'regret', False, "skip the paired Centralized run"),
    ('--track-full-ratio', 'track_full_ratio', True, "also report the full-model replay ratio"),
    ('--dump-buffers', 'dump_buffers', True, "write per-round buffer snapshots"),
]


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, default=argparse.SUPPRESS,
                        help="JSON file of configuration overrides")
    for flag, dest, kind, help_text in FLAGS:
        parser.add_argument(flag, dest=dest, type=kind, default=argparse.SUPPRESS, help=help_text)
    for flag, dest, value, help_text in SWITCHES:
        parser.add_argument(flag, dest=dest, action='store_const', const=value,
                            default=argparse.SUPPRESS, help=help_text)
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help="logging level")
    parser.add_argument('-v', '--verbose', action='store_true', help="same as --log-level DEBUG")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fedkace-sim',
        description='Streaming federated continual learning simulator',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --method fedkace --seed 1
  %(prog)s run --method as6 --rounds 10
  %(prog)s suite --quick
  %(prog)s dump-schedule --clients 2 --rounds 12
  %(prog)s dump-buffer --method fedkace --rounds 5
        """,
    )
    sub = parser.add_subparsers(dest='command', required=True)
    for name, help_text in [
        ('run', "run one method (and its paired Centralized baseline)"),
        ('suite', "run the acceptance suite"),
        ('dump-schedule', "write every client's category schedule and training data"),
        ('dump-buffer', "run one method and write per-round buffer snapshots"),
    ]:
        cmd = sub.add_parser(name, help=help_text)
        _add_config_arguments(cmd)
        if name == 'suite':
            cmd.add_argument('--quick', action='store_true',
                             help="criteria only, without the overlap sweep and ablation table")
    return parser


def resolve(file_path: Optional[Path], flag_values: Dict[str, Any]) -> ExperimentConfig:
    """Apply file then flag values over the defaults and validate."""
    values: Dict[str, Any] = {}
    if file_path is not None:
        values.update(load_config_file(file_path))
    values.update(flag_values)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def parse_config(argv: Optional[Sequence[str]] = None) -> Tuple[argparse.Namespace, ExperimentConfig]:
    """
    Parse a command line into its namespace and the resolved configuration.

    Args:
        argv: Arguments without the program name; None reads sys.argv

    Returns:
        (namespace, config)

    Raises:
        UsageError: for unknown keys or out-of-range values
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:
            raise
        raise UsageError('arguments', "invalid command line") from None
    known = {dest for _, dest, _, _ in FLAGS} | {dest for _, dest, _, _ in SWITCHES}
    flag_values = {k: v for k, v in vars(args).items() if k in known}
    cfg = resolve(getattr(args, 'config', None), flag_values)
    return args, cfg
