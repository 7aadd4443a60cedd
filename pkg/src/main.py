#!/usr/bin/env python3
"""
FedKACE simulator - Main Entry Point
Runs streaming federated continual learning experiments from the command line.
"""

import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

from config import ExperimentConfig, parse_config
from data_stream import build_schedule, dump_client_data
from errors import ConfigurationError, OutputError, RunAbortedError, SimulationError
from federation import ExperimentResult, MethodVariant, run_experiment, run_with_reference
from metrics import write_outputs
import suite

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def write_buffer_snapshots(result: ExperimentResult, directory: Path) -> List[Path]:
    """Write each client's buffer log to <directory>/<method>-client<k>.txt."""
    paths = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for client in result.clients:
            path = directory / f"{result.variant.value}-client{client.client_id}.txt"
            path.write_text(''.join(line + '\n' for line in client.buffer_log))
            paths.append(path)
    except OSError as e:
        raise OutputError(directory, e) from e
    return paths


def command_run(cfg: ExperimentConfig) -> int:
    """Run the configured method and write its outputs."""
    variant = MethodVariant.parse(cfg.method)
    result = run_with_reference(cfg, variant) if cfg.regret else run_experiment(cfg, variant)
    out_dir = Path(cfg.output_dir) / result.summary.run_id
    write_outputs(out_dir, result.series, result.summary)
    if cfg.dump_buffers:
        write_buffer_snapshots(result, out_dir / 'buffers')
    return EXIT_OK


def command_dump_schedule(cfg: ExperimentConfig) -> int:
    """Write every client's schedule and its full training stream."""
    scfg = cfg.schedule_config()
    out_dir = Path(cfg.output_dir) / 'schedule'
    lines = []
    for k in range(cfg.num_clients):
        for t, window in enumerate(build_schedule(scfg, k), start=1):
            lines.append(f"client={k} round={t} categories={','.join(str(c) for c in window)}")
        count = dump_client_data(out_dir / f"client{k}.csv", scfg, k)
        logger.info("client %d: %d training samples", k, count)
    try:
        (out_dir / 'schedule.txt').write_text(''.join(line + '\n' for line in lines))
    except OSError as e:
        raise OutputError(out_dir / 'schedule.txt', e) from e
    logger.info("Schedules written to %s", out_dir)
    return EXIT_OK


def command_dump_buffer(cfg: ExperimentConfig) -> int:
    """Run the configured method and write per-round buffer snapshots."""
    result = run_experiment(cfg.with_overrides(dump_buffers=True))
    paths = write_buffer_snapshots(result, Path(cfg.output_dir) / 'buffers')
    logger.info("Buffer snapshots written: %d files", len(paths))
    return EXIT_OK


def command_suite(cfg: ExperimentConfig, quick: bool) -> int:
    report = suite.run_suite(cfg, quick=quick)
    suite.write_report(report, Path(cfg.output_dir) / 'suite')
    return EXIT_OK if report.passed else EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point."""
    try:
        args, cfg = parse_config(argv)
    except ConfigurationError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_USAGE

    level = 'DEBUG' if args.verbose else args.log_level
    logging.getLogger().setLevel(getattr(logging, level))

    try:
        if args.command == 'run':
            return command_run(cfg)
        if args.command == 'suite':
            return command_suite(cfg, args.quick)
        if args.command == 'dump-schedule':
            return command_dump_schedule(cfg)
        return command_dump_buffer(cfg)
    except ConfigurationError as e:
        logger.error("Invalid configuration: %s", e, exc_info=True)
        return EXIT_USAGE
    except RunAbortedError as e:
        logger.error("Run aborted: %s; per-client diagnostics: %s", e, e.diagnostics,
                     exc_info=True)
        return EXIT_FAILURE
    except (SimulationError, OSError) as e:
        logger.error("Run failed: %s", e, exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
