"""
orchestrator - Run every allocated session of an experiment.

Sessions run on a local worker pool. Each worker builds its own environment
and closes it afterwards; finished traces are handed back to the calling
thread, which alone writes traces, progress records and the manifest.
"""

from __future__ import annotations

import contextlib
import importlib.metadata
import json
import logging
import sys
import threading
import time
from collections.abc import Callable
from concurrent.futures import Future, ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Annotated, Literal, NamedTuple, TextIO, Union

import tqdm
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .agent import SessionLimits, run_session
from .allocation import Allocation, Arm, check_arms
from .config import resolve_input_path
from .environment import EnvSession
from .mock_shop import Catalog, MockShopSession, VariantConfig, load_catalog
from .model_client import (
    HttpModelClient,
    ModelClient,
    ModelConfig,
    ScriptedModelClient,
    ScriptedPolicy,
)
from .persona import Intention, Persona, PersonaPool
from .trace_store import OutcomeKind, SessionTrace, write_trace
from .util import BOLD, G, NC, R, derive_seed, elapsed_time_string, fingerprint, utc_timestamp
from .webdriver_env import BrowserConfig, WebDriverEnv, load_ruleset

logger = logging.getLogger(__name__)

TRACES_DIR = "traces"
MANIFEST_NAME = "manifest.json"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class MockShopBackend(_Frozen):
    kind: Literal["mockshop"] = "mockshop"
    # None means the bundled catalog
    catalog: str | None = None
    variants: dict[str, VariantConfig]


class WebDriverBackend(_Frozen):
    kind: Literal["webdriver"] = "webdriver"
    driver_endpoint: str
    ruleset: str = "mockshop"
    start_urls: dict[str, str]
    headless: bool = True


EnvBackend = Annotated[Union[MockShopBackend, WebDriverBackend], Field(discriminator="kind")]


class ScriptedModel(_Frozen):
    kind: Literal["scripted"] = "scripted"
    policy: ScriptedPolicy
    # Optional per-arm overrides, keyed by arm name
    per_arm: dict[str, ScriptedPolicy] = {}


ModelBlock = Annotated[Union[ModelConfig, ScriptedModel], Field(discriminator="kind")]


def variant_bindings(backend: MockShopBackend | WebDriverBackend) -> dict:
    if isinstance(backend, MockShopBackend):
        return backend.variants
    return backend.start_urls


class ExperimentPlan(_Frozen):
    arms: tuple[Arm, ...]
    allocation: Allocation
    env_backend: EnvBackend
    model: ModelBlock
    limits: SessionLimits = SessionLimits()
    parallelism: int = Field(default=1, ge=1)
    seed: int
    output_dir: Path

    @model_validator(mode="after")
    def _check(self) -> "ExperimentPlan":
        check_arms(self.arms)
        names = {a.name for a in self.arms}
        if unknown := set(self.allocation.assignment.values()) - names:
            raise ValueError(f"Allocation uses arms not in the plan: {', '.join(sorted(unknown))}")
        bindings = variant_bindings(self.env_backend)
        for arm in self.arms:
            if arm.variant_id not in bindings:
                raise ValueError(
                    f"Arm {arm.name} uses variant {arm.variant_id!r}, which the environment backend does not define"
                )
        if isinstance(self.model, ScriptedModel):
            if unknown := set(self.model.per_arm) - names:
                raise ValueError(f"Scripted policies for unknown arms: {', '.join(sorted(unknown))}")
        return self


class SessionStatus(_Frozen):
    session_id: str
    arm: str
    status: Literal["done", "retried", "abandoned"]
    outcome: OutcomeKind | None = None
    attempts: int = Field(ge=1)
    error: str | None = None


class RunManifest(_Frozen):
    plan_fingerprint: str
    sessions: dict[str, SessionStatus]
    counts: dict[str, dict[str, int]]
    started_at: str
    finished_at: str
    tool_version: str

    @property
    def abandoned(self) -> int:
        return sum(1 for s in self.sessions.values() if s.status == "abandoned")


class Job(NamedTuple):
    session_id: str
    arm: Arm
    persona: Persona
    intention: Intention
    seed: int


EnvFactory = Callable[[Arm], EnvSession]
ClientFactory = Callable[[Arm], ModelClient]


#
# Progress
#


class ArmProgress(_Frozen):
    pending: int
    running: int
    done: int
    abandoned: int

    @property
    def total(self) -> int:
        return self.pending + self.running + self.done + self.abandoned


class ProgressSnapshot(_Frozen):
    arms: dict[str, ArmProgress]

    @property
    def total(self) -> ArmProgress:
        return ArmProgress(
            pending=sum(a.pending for a in self.arms.values()),
            running=sum(a.running for a in self.arms.values()),
            done=sum(a.done for a in self.arms.values()),
            abandoned=sum(a.abandoned for a in self.arms.values()),
        )


class ProgressTracker:
    """Session counts by state; safe to update from worker threads"""

    def __init__(self, sessions: dict[str, str]):
        self._arm_of = dict(sessions)
        self._state = {sid: "pending" for sid in sessions}
        self._lock = threading.Lock()

    def mark(self, session_id: str, state: Literal["pending", "running", "done", "abandoned"]) -> None:
        with self._lock:
            self._state[session_id] = state

    def snapshot(self) -> ProgressSnapshot:
        with self._lock:
            counts: dict[str, dict[str, int]] = {}
            for sid, state in self._state.items():
                arm = counts.setdefault(
                    self._arm_of[sid], {"pending": 0, "running": 0, "done": 0, "abandoned": 0}
                )
                arm[state] += 1
        return ProgressSnapshot(
            arms={name: ArmProgress(**c) for name, c in sorted(counts.items())}
        )


def progress(tracker: ProgressTracker) -> ProgressSnapshot:
    return tracker.snapshot()


def _emit(stream: TextIO | None, record: dict) -> None:
    if stream is not None:
        stream.write(json.dumps(record, sort_keys=True) + "\n")
        stream.flush()


#
# Factories
#


def make_env_factory(plan: ExperimentPlan, base_dir: Path | None = None) -> EnvFactory:
    """Build per-arm environment constructors; shared data is loaded once"""
    backend = plan.env_backend
    if isinstance(backend, MockShopBackend):
        catalog: Catalog = load_catalog(
            resolve_input_path(backend.catalog, base_dir) if backend.catalog else None
        )
        return lambda arm: MockShopSession(catalog, backend.variants[arm.variant_id])

    rules = load_ruleset(backend.ruleset, base_dir)
    return lambda arm: WebDriverEnv(
        BrowserConfig(
            driver_endpoint=backend.driver_endpoint,
            start_url=backend.start_urls[arm.variant_id],
            variant=arm.variant_id,
            headless=backend.headless,
        ),
        rules,
    )


def make_client_factory(plan: ExperimentPlan, stack: contextlib.ExitStack) -> ClientFactory:
    """Per-arm model clients; live clients are closed when the stack unwinds"""
    model = plan.model
    if isinstance(model, ScriptedModel):
        clients = {
            arm.name: ScriptedModelClient(model.per_arm.get(arm.name, model.policy))
            for arm in plan.arms
        }
        return lambda arm: clients[arm.name]
    # One pooled HTTP client serves every worker
    shared = stack.enter_context(HttpModelClient(model))
    return lambda arm: shared


def plan_jobs(plan: ExperimentPlan, pool: PersonaPool) -> list[Job]:
    personas = pool.by_id()
    arms = {a.name: a for a in plan.arms}
    jobs = []
    for persona_id, arm_name in sorted(plan.allocation.assignment.items()):
        if persona_id not in personas:
            raise ValueError(f"Allocation names persona {persona_id}, which is not in the pool")
        jobs.append(
            Job(
                session_id=f"{arm_name}-{persona_id}",
                arm=arms[arm_name],
                persona=personas[persona_id],
                intention=pool.intentions[persona_id],
                seed=derive_seed(plan.seed, persona_id),
            )
        )
    return jobs


def tool_version() -> str:
    try:
        return importlib.metadata.version("agentab")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


#
# Running
#


def run_experiment(
    plan: ExperimentPlan,
    pool: PersonaPool,
    *,
    env_factory: EnvFactory | None = None,
    client_factory: ClientFactory | None = None,
    clock: Callable[[], float] = time.time,
    session_clock: Callable[[], Callable[[], float]] | None = None,
    progress_stream: TextIO | None = sys.stderr,
    base_dir: Path | None = None,
) -> RunManifest:
    """
    Run all sessions of a plan and write traces plus a manifest.

    A session that raises is retried once with a fresh environment, then
    abandoned. ``session_clock`` makes a clock for each session attempt, so
    timings can be made deterministic regardless of scheduling.
    """
    env_factory = env_factory or make_env_factory(plan, base_dir)
    jobs = plan_jobs(plan, pool)
    trace_dir = plan.output_dir / TRACES_DIR
    trace_dir.mkdir(parents=True, exist_ok=True)

    tracker = ProgressTracker({j.session_id: j.arm.name for j in jobs})
    started_at = clock()
    start_time = time.monotonic()
    statuses: dict[str, SessionStatus] = {}
    attempts: dict[str, int] = {}

    def work(job: Job) -> SessionTrace:
        tracker.mark(job.session_id, "running")
        env = env_factory(job.arm)
        try:
            return run_session(
                job.persona,
                job.intention,
                env,
                client_factory(job.arm),
                plan.limits,
                job.seed,
                arm=job.arm.name,
                session_id=job.session_id,
                clock=session_clock() if session_clock else time.time,
            )
        finally:
            env.close()

    show_bar = progress_stream is not None and progress_stream.isatty()
    _emit(progress_stream, {"event": "start", "sessions": len(jobs), "parallelism": plan.parallelism})
    with (
        contextlib.ExitStack() as stack,
        ThreadPoolExecutor(max_workers=plan.parallelism) as executor,
        tqdm.tqdm(total=len(jobs), leave=False, disable=not show_bar, file=progress_stream) as bar,
    ):
        client_factory = client_factory or make_client_factory(plan, stack)
        pending: dict[Future[SessionTrace], Job] = {}
        for job in jobs:
            attempts[job.session_id] = 1
            pending[executor.submit(work, job)] = job
        while pending:
            future = next(as_completed(pending))
            job = pending.pop(future)
            try:
                trace = future.result()
            except Exception as e:
                if attempts[job.session_id] == 1:
                    logger.warning(
                        f"Session {BOLD}{job.session_id}{NC} crashed ({e!r}), retrying with a fresh environment"
                    )
                    attempts[job.session_id] = 2
                    tracker.mark(job.session_id, "pending")
                    pending[executor.submit(work, job)] = job
                    continue
                logger.error(f"Error: Session {BOLD}{job.session_id}{NC} crashed twice, abandoning: {e!r}")
                tracker.mark(job.session_id, "abandoned")
                statuses[job.persona.id] = SessionStatus(
                    session_id=job.session_id,
                    arm=job.arm.name,
                    status="abandoned",
                    attempts=2,
                    error=repr(e),
                )
            else:
                write_trace(trace, trace_dir)
                tracker.mark(job.session_id, "done")
                statuses[job.persona.id] = SessionStatus(
                    session_id=job.session_id,
                    arm=job.arm.name,
                    status="done" if attempts[job.session_id] == 1 else "retried",
                    outcome=trace.outcome.kind,
                    attempts=attempts[job.session_id],
                )
            bar.update(1)
            status = statuses[job.persona.id]
            _emit(
                progress_stream,
                {
                    "event": "session",
                    "session_id": job.session_id,
                    "status": status.status,
                    "outcome": status.outcome,
                    "progress": tracker.snapshot().total.model_dump(),
                },
            )

    counts: dict[str, dict[str, int]] = {a.name: {} for a in plan.arms}
    for status in statuses.values():
        arm_counts = counts[status.arm]
        arm_counts[status.status] = arm_counts.get(status.status, 0) + 1
    manifest = RunManifest(
        plan_fingerprint=fingerprint(plan),
        sessions=dict(sorted(statuses.items())),
        counts={arm: dict(sorted(c.items())) for arm, c in counts.items()},
        started_at=utc_timestamp(started_at),
        finished_at=utc_timestamp(clock()),
        tool_version=tool_version(),
    )
    write_manifest(manifest, plan.output_dir)
    _emit(progress_stream, {"event": "finish", "abandoned": manifest.abandoned})
    colour = R if manifest.abandoned else G
    logger.info(
        f"Ran {G}{len(jobs)}{NC} sessions ({colour}{manifest.abandoned}{NC} abandoned) in {elapsed_time_string(start_time)}"
    )
    return manifest


def write_manifest(manifest: RunManifest, output_dir: Path) -> Path:
    path = output_dir / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_manifest(output_dir: Path) -> RunManifest:
    return RunManifest.model_validate_json(
        (output_dir / MANIFEST_NAME).read_text(encoding="utf-8")
    )
