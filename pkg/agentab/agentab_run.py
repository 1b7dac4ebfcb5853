from logging import getLogger
from pathlib import Path

from .agentab_allocate import load_matching_pool
from .allocation import load_allocation
from .config import ConfigError
from .experiment import (
    Artifacts,
    ConfigArgument,
    ExperimentConfig,
    OutputOption,
    ParallelismOption,
    RunSeedOption,
    exit_codes,
    load_for_command,
)
from .orchestrator import RunManifest, run_experiment
from .trace_store import INDEX_NAME
from .util import BOLD, NC, Y

logger = getLogger(__name__)


def clear_traces(directory: Path) -> None:
    """Remove traces from an earlier run so a re-run starts clean"""
    if not directory.is_dir():
        return
    stale = sorted(directory.glob("*.json")) + sorted(directory.glob("*.json.tmp"))
    if stale:
        logger.info(f"Removing {Y}{len(stale)}{NC} traces from a previous run")
    for path in stale:
        path.unlink()
    (directory / INDEX_NAME).unlink(missing_ok=True)


def run_sessions(config: ExperimentConfig, base_dir: Path) -> RunManifest:
    artifacts = Artifacts(config.output_dir)
    record = load_allocation(artifacts.require(artifacts.allocation, "allocate"))
    if tuple(record.arms) != tuple(config.arms):
        raise ConfigError(
            f"{artifacts.allocation} was made for different arms; run '{BOLD}agentab allocate{NC}' again"
        )
    pool = load_matching_pool(config)
    by_id = pool.by_id()
    if missing := [pid for pid in record.assignment if pid not in by_id]:
        raise ConfigError(f"Allocation names personas missing from the pool: {', '.join(missing[:5])}")
    allocated = pool.subset([by_id[pid] for pid in sorted(record.assignment)])

    clear_traces(artifacts.traces)
    return run_experiment(config.plan(record.allocation), allocated, base_dir=base_dir)


def run(
    config: ConfigArgument = None,
    output: OutputOption = None,
    parallelism: ParallelismOption = None,
    run_seed: RunSeedOption = None,
):
    """
    Run one agent session per allocated persona against its arm's variant.
    """
    with exit_codes():
        loaded = load_for_command(config, output, parallelism, seeds={"run": run_seed})
        run_sessions(loaded.config, loaded.base_dir)
