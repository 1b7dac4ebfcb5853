import contextlib
import time
from collections.abc import Iterator
from logging import getLogger
from pathlib import Path

from .experiment import (
    Artifacts,
    ConfigArgument,
    ExperimentConfig,
    OutputOption,
    ParallelismOption,
    PersonaSeedOption,
    exit_codes,
    load_for_command,
)
from .model_client import HttpModelClient, ModelClient, ModelConfig
from .persona import PersonaPool, TemplateNarrator, generate_personas, save_pool
from .util import BOLD, NC, G, elapsed_time_string

logger = getLogger(__name__)


@contextlib.contextmanager
def persona_model(config: ExperimentConfig) -> Iterator[ModelClient]:
    """Live configs write personas with their model; scripted ones use the offline narrator"""
    if isinstance(config.model, ModelConfig):
        with HttpModelClient(config.model) as client:
            yield client
    else:
        yield TemplateNarrator()


def make_personas(config: ExperimentConfig) -> tuple[PersonaPool, Path]:
    start_time = time.monotonic()
    artifacts = Artifacts(config.output_dir)
    spec = config.agent_spec
    logger.info(f"Generating {G}{spec.count}{NC} personas with seed {BOLD}{config.seeds.personas}{NC}")
    with persona_model(config) as model:
        pool = generate_personas(
            spec, model, config.seeds.personas, parallelism=config.parallelism
        )
    save_pool(pool, artifacts.personas)
    logger.info(f"Written {BOLD}{artifacts.personas}{NC} in {elapsed_time_string(start_time)}")
    return pool, artifacts.personas


def personas(
    config: ConfigArgument = None,
    output: OutputOption = None,
    parallelism: ParallelismOption = None,
    persona_seed: PersonaSeedOption = None,
):
    """
    Generate the persona pool described by the agent spec of an experiment.
    """
    with exit_codes():
        loaded = load_for_command(config, output, parallelism, seeds={"personas": persona_seed})
        make_personas(loaded.config)
