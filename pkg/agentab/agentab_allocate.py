from logging import getLogger

from .allocation import AllocationRecord, rerandomize, save_allocation
from .config import ConfigError
from .experiment import (
    AllocationSeedOption,
    Artifacts,
    ConfigArgument,
    ExperimentConfig,
    OutputOption,
    SampleSeedOption,
    exit_codes,
    load_for_command,
)
from .persona import PersonaPool, load_pool, sample
from .util import BOLD, NC, G, R, fingerprint

logger = getLogger(__name__)


def load_matching_pool(config: ExperimentConfig) -> PersonaPool:
    """Load personas.json, refusing a pool made from a different agent spec"""
    artifacts = Artifacts(config.output_dir)
    pool = load_pool(artifacts.require(artifacts.personas, "personas"))
    if pool.spec_fingerprint != fingerprint(config.agent_spec):
        raise ConfigError(
            f"{artifacts.personas} was generated from a different agent spec; run '{BOLD}agentab personas{NC}' again"
        )
    return pool


def make_allocation(config: ExperimentConfig) -> AllocationRecord:
    artifacts = Artifacts(config.output_dir)
    pool = load_matching_pool(config)
    chosen = sample(pool, config.sample_n, config.seeds.sample)
    logger.info(
        f"Allocating {G}{len(chosen)}{NC} of {len(pool)} personas between {', '.join(config.arm_names)}"
    )
    alloc, report = rerandomize(
        chosen,
        config.arms,
        config.balance_attributes(),
        threshold=config.allocation.threshold,
        max_attempts=config.allocation.max_attempts,
        seed=config.seeds.allocation,
    )
    for name, metric in report.per_attribute.items():
        colour = G if metric.value <= report.threshold else R
        logger.info(f"    {name:<16} {metric.metric_kind} {colour}{metric.value:.3f}{NC}")
    record = save_allocation(artifacts.allocation, alloc, report, config.arms)
    logger.info(
        f"Written {BOLD}{artifacts.allocation}{NC} (attempt {alloc.attempt}, sizes {alloc.sizes()})"
    )
    return record


def allocate(
    config: ConfigArgument = None,
    output: OutputOption = None,
    sample_seed: SampleSeedOption = None,
    allocation_seed: AllocationSeedOption = None,
):
    """
    Sample personas from the pool and split them between the arms, rerandomizing until the arms are balanced.
    """
    with exit_codes():
        loaded = load_for_command(
            config, output, seeds={"sample": sample_seed, "allocation": allocation_seed}
        )
        make_allocation(loaded.config)
