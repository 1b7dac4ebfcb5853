import time
from logging import getLogger

from .agentab_allocate import make_allocation
from .agentab_analyze import check_abandoned, make_report
from .agentab_personas import make_personas
from .agentab_run import run_sessions
from .experiment import (
    ConfigArgument,
    OutputOption,
    AllocationSeedOption,
    ParallelismOption,
    PersonaSeedOption,
    RunSeedOption,
    SampleSeedOption,
    exit_codes,
    load_for_command,
)
from .util import B, NC, elapsed_time_string

logger = getLogger(__name__)


def pipeline(
    config: ConfigArgument = None,
    output: OutputOption = None,
    parallelism: ParallelismOption = None,
    persona_seed: PersonaSeedOption = None,
    sample_seed: SampleSeedOption = None,
    allocation_seed: AllocationSeedOption = None,
    run_seed: RunSeedOption = None,
):
    """
    Run every stage in order: personas, allocate, run and analyze.
    """
    start_time = time.monotonic()
    with exit_codes():
        seeds = {
            "personas": persona_seed,
            "sample": sample_seed,
            "allocation": allocation_seed,
            "run": run_seed,
        }
        loaded = load_for_command(config, output, parallelism, seeds=seeds)
        experiment = loaded.config
        logger.info(f"{B}Stage 1/4{NC}: personas")
        make_personas(experiment)
        logger.info(f"{B}Stage 2/4{NC}: allocate")
        make_allocation(experiment)
        logger.info(f"{B}Stage 3/4{NC}: run")
        run_sessions(experiment, loaded.base_dir)
        logger.info(f"{B}Stage 4/4{NC}: analyze")
        result = make_report(experiment, loaded.base_dir)
    logger.info(f"Pipeline finished in {elapsed_time_string(start_time)}")
    print(result.report_path)
    check_abandoned(experiment, result)
