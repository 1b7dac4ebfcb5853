"""
experiment - The experiment document and the artifacts each stage leaves behind.
"""

from __future__ import annotations

import contextlib
import json
import logging
from collections.abc import Iterator
from pathlib import Path
from typing import Annotated, Literal, NamedTuple, Optional

import typer
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agent import SessionLimits
from .allocation import Allocation, Arm, check_arms
from .analysis import BaselineSummary, load_baseline
from .config import ConfigError, data_path, default, format_validation_error, resolve_input_path
from .orchestrator import (
    MANIFEST_NAME,
    TRACES_DIR,
    EnvBackend,
    ExperimentPlan,
    ModelBlock,
    ScriptedModel,
    variant_bindings,
)
from .persona import AgentSpec
from .util import BOLD, NC

logger = logging.getLogger(__name__)

DEMO_CONFIG = "demo_config.json"


class MissingArtifactError(RuntimeError):
    """A stage needs the output of an earlier stage that is not there"""


class _Strict(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Seeds(_Strict):
    personas: int
    sample: int
    allocation: int
    run: int


class AllocationSettings(_Strict):
    threshold: float = Field(default_factory=lambda: default("allocation", "threshold", float), ge=0)
    max_attempts: int = Field(
        default_factory=lambda: default("allocation", "max_attempts", int), ge=1
    )
    # Attributes to balance on; None means every attribute of the agent spec
    balance_on: tuple[str, ...] | None = None


class AnalysisSettings(_Strict):
    stratify_by: tuple[str, ...] = ()
    cut_points: dict[str, tuple[float, ...]] = {}
    t_mode: Literal["pooled", "welch"] = "pooled"
    baseline: str | None = None
    max_abandoned_fraction: float = Field(
        default_factory=lambda: default("analysis", "max_abandoned_fraction", float), ge=0, le=1
    )


class ExperimentConfig(_Strict):
    agent_spec: AgentSpec
    sample_n: int = Field(ge=2)
    arms: tuple[Arm, ...]
    env_backend: EnvBackend
    model: ModelBlock
    limits: SessionLimits = SessionLimits()
    allocation: AllocationSettings = AllocationSettings()
    parallelism: int = Field(default_factory=lambda: default("run", "parallelism", int), ge=1)
    seeds: Seeds
    output_dir: Path
    analysis: AnalysisSettings = AnalysisSettings()

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        check_arms(self.arms)
        if self.sample_n > self.agent_spec.count:
            raise ValueError(
                f"sample_n ({self.sample_n}) is larger than the persona pool ({self.agent_spec.count})"
            )
        if self.sample_n < len(self.arms):
            raise ValueError("sample_n must give every arm at least one persona")
        bindings = variant_bindings(self.env_backend)
        for arm in self.arms:
            if arm.variant_id not in bindings:
                raise ValueError(
                    f"Arm {arm.name} uses variant {arm.variant_id!r}, which the environment backend does not define"
                )
        names = {a.name for a in self.arms}
        if isinstance(self.model, ScriptedModel):
            if unknown := set(self.model.per_arm) - names:
                raise ValueError(f"Scripted policies for unknown arms: {', '.join(sorted(unknown))}")
        attributes = {a.name for a in self.agent_spec.attributes}
        for name in (*(self.allocation.balance_on or ()), *self.analysis.stratify_by):
            if name not in attributes:
                raise ValueError(f"Unknown attribute {name!r}; the agent spec defines {sorted(attributes)}")
        return self

    @property
    def arm_names(self) -> list[str]:
        return [a.name for a in self.arms]

    def balance_attributes(self):
        wanted = self.allocation.balance_on
        return [a for a in self.agent_spec.attributes if wanted is None or a.name in wanted]

    def plan(self, allocation: Allocation) -> ExperimentPlan:
        return ExperimentPlan(
            arms=self.arms,
            allocation=allocation,
            env_backend=self.env_backend,
            model=self.model,
            limits=self.limits,
            parallelism=self.parallelism,
            seed=self.seeds.run,
            output_dir=self.output_dir,
        )


class LoadedConfig(NamedTuple):
    config: ExperimentConfig
    # Folder of the config document, for resolving relative inputs
    base_dir: Path


def load_experiment(path: Path | None = None) -> LoadedConfig:
    """Read and validate an experiment document; the bundled demo if no path"""
    if path is None:
        path = data_path(DEMO_CONFIG)
        logger.debug(f"Using the bundled demo config {BOLD}{path}{NC}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"Config file {path} does not exist")
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read config {path}: {e}") from e
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(
            f"Invalid config {path}:\n  " + "\n  ".join(format_validation_error(e))
        ) from e
    return LoadedConfig(config, path.parent.resolve())


def load_config_baseline(config: ExperimentConfig, base_dir: Path) -> BaselineSummary | None:
    if config.analysis.baseline is None:
        return None
    path = resolve_input_path(config.analysis.baseline, base_dir)
    try:
        return load_baseline(path)
    except (OSError, ValidationError) as e:
        raise ConfigError(f"Could not read baseline {path}: {e}") from e


class Artifacts:
    """Paths of everything the pipeline stages write into an output folder"""

    def __init__(self, output_dir: Path):
        self.output_dir = output_dir

    @property
    def personas(self) -> Path:
        return self.output_dir / "personas.json"

    @property
    def allocation(self) -> Path:
        return self.output_dir / "allocation.json"

    @property
    def traces(self) -> Path:
        return self.output_dir / TRACES_DIR

    @property
    def manifest(self) -> Path:
        return self.output_dir / MANIFEST_NAME

    @property
    def report_text(self) -> Path:
        return self.output_dir / "report.txt"

    @property
    def report_json(self) -> Path:
        return self.output_dir / "report.json"

    @property
    def sessions_csv(self) -> Path:
        return self.output_dir / "sessions.csv"

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(
                f"Missing {BOLD}{path}{NC}; run '{BOLD}agentab {stage}{NC}' first"
            )
        return path


#
# Shared command-line pieces
#

ConfigArgument = Annotated[
    Optional[Path],
    typer.Argument(
        help="Experiment config document (JSON). [default: the bundled demo experiment]",
        show_default=False,
    ),
]
OutputOption = Annotated[
    Optional[Path],
    typer.Option("-o", "--output", help="Output folder, overriding output_dir from the config", show_default=False),
]
ParallelismOption = Annotated[
    Optional[int],
    typer.Option("-j", "--parallelism", help="Number of concurrent sessions or persona requests", min=1, show_default=False),
]
RunSeedOption = Annotated[
    Optional[int],
    typer.Option("--run-seed", help="Override the run seed from the config", show_default=False),
]
PersonaSeedOption = Annotated[
    Optional[int],
    typer.Option("--persona-seed", help="Override the persona generation seed from the config", show_default=False),
]
SampleSeedOption = Annotated[
    Optional[int],
    typer.Option("--sample-seed", help="Override the pool sampling seed from the config", show_default=False),
]
AllocationSeedOption = Annotated[
    Optional[int],
    typer.Option("--allocation-seed", help="Override the arm allocation seed from the config", show_default=False),
]


def load_for_command(
    path: Path | None,
    output: Path | None = None,
    parallelism: int | None = None,
    *,
    seeds: dict[str, int | None] | None = None,
) -> LoadedConfig:
    """
    Load a config and apply the few overrides the command line allows.

    ``seeds`` maps a field of ``Seeds`` to its replacement; None leaves the
    config's seed alone.
    """
    loaded = load_experiment(path)
    update: dict = {}
    if output is not None:
        update["output_dir"] = output
    if parallelism is not None:
        update["parallelism"] = parallelism
    if overrides := {k: v for k, v in (seeds or {}).items() if v is not None}:
        for name, value in overrides.items():
            logger.debug(f"Using {name} seed {BOLD}{value}{NC} from the command line")
        update["seeds"] = loaded.config.seeds.model_copy(update=overrides)
    if update:
        return LoadedConfig(loaded.config.model_copy(update=update), loaded.base_dir)
    return loaded


@contextlib.contextmanager
def exit_codes() -> Iterator[None]:
    """Turn failures into exit status 1 (bad input) or 2 (runtime failure)"""
    try:
        yield
    except (ConfigError, MissingArtifactError) as e:
        logger.error(f"Error: {e}")
        raise typer.Exit(1)
    except typer.Exit:
        raise
    except Exception as e:
        logger.debug("Traceback:", exc_info=True)
        logger.error(f"Error: {e}")
        raise typer.Exit(2)
