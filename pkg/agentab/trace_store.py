"""
trace_store - Versioned session traces on disk.

Each session is written as ``<session_id>.json`` next to an append-only
``index.jsonl``. Loading re-derives every total from the recorded steps and
rejects files that disagree, so a hand-edited trace cannot slip into the
analysis unnoticed.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Literal, NamedTuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .environment import ACTION_KINDS, Action, ActionKind, ExecResult, Observation, Purchase
from .util import BOLD, NC, fingerprint

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
INDEX_NAME = "index.jsonl"
SPEND_TOLERANCE = 1e-9

OutcomeKind = Literal[
    "stopped", "action_cap", "time_cap", "looping", "exec_failure", "parse_failure"
]
OUTCOME_KINDS: tuple[OutcomeKind, ...] = (
    "stopped",
    "action_cap",
    "time_cap",
    "looping",
    "exec_failure",
    "parse_failure",
)

CSV_COLUMNS = [
    "session_id",
    "persona_id",
    "arm",
    "n_search",
    "n_click_product",
    "n_click_filter_option",
    "n_purchase",
    "n_stop",
    "total_actions",
    "converted",
    "spend",
    "outcome_kind",
    "duration_s",
]


class TraceValidationError(ValueError):
    """A stored trace is malformed or its totals do not match its steps"""


class StepRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    step_index: int = Field(ge=0)
    observation: Observation
    prompt_digest: str
    raw_model_text: str
    action: Action | None = None
    # Set instead of an action when the reply could not be parsed
    parse_error: str | None = None
    reprompted: bool = False
    exec: ExecResult | None = None
    rationale: str | None = None
    wall_time: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _action_or_marker(self) -> "StepRecord":
        if (self.action is None) == (self.parse_error is None):
            raise ValueError("A step has either an action or a parse-failure marker")
        if self.action is not None and self.exec is None:
            raise ValueError("A step with an action needs its execution result")
        return self

    @property
    def took_effect(self) -> bool:
        return self.action is not None and self.exec is not None and self.exec.status != "failed"


class SessionOutcome(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: OutcomeKind
    converted: bool
    purchases: int = Field(ge=0)
    spend: float = Field(ge=0)

    @model_validator(mode="after")
    def _converted(self) -> "SessionOutcome":
        if self.converted != (self.purchases >= 1):
            raise ValueError("converted must hold exactly when there is a purchase")
        return self


class SessionTrace(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int = SCHEMA_VERSION
    session_id: str
    persona_id: str
    arm: str
    seed: int = 0
    steps: tuple[StepRecord, ...]
    outcome: SessionOutcome
    totals: dict[ActionKind, int]
    spend: float = Field(ge=0)
    started_at: float = 0.0
    duration: float = Field(default=0.0, ge=0)

    @property
    def total_actions(self) -> int:
        return sum(self.totals.values())


def compute_totals(steps: Iterable[StepRecord]) -> tuple[dict[ActionKind, int], float]:
    """Per-kind counts of actions that took effect, and the purchase spend"""
    totals: dict[ActionKind, int] = {kind: 0 for kind in ACTION_KINDS}
    prices = []
    for step in steps:
        if not step.took_effect:
            continue
        assert step.action is not None
        totals[step.action.kind] += 1
        if isinstance(step.action, Purchase) and step.observation.detail is not None:
            prices.append(step.observation.detail.price)
    return totals, math.fsum(prices)


def check_trace(trace: SessionTrace) -> None:
    """Raise TraceValidationError unless a trace is internally consistent"""
    if trace.schema_version != SCHEMA_VERSION:
        raise TraceValidationError(
            f"Unsupported schema_version {trace.schema_version} (expected {SCHEMA_VERSION})"
        )
    totals, spend = compute_totals(trace.steps)
    if dict(trace.totals) != totals:
        raise TraceValidationError(
            f"totals {dict(trace.totals)} do not match the recorded steps {totals}"
        )
    if abs(trace.spend - spend) > SPEND_TOLERANCE:
        raise TraceValidationError(f"spend {trace.spend} does not match purchases ({spend})")
    if trace.outcome.purchases != totals["purchase"]:
        raise TraceValidationError(
            f"outcome counts {trace.outcome.purchases} purchases, steps have {totals['purchase']}"
        )
    if abs(trace.outcome.spend - spend) > SPEND_TOLERANCE:
        raise TraceValidationError("outcome spend does not match purchases")
    for position, step in enumerate(trace.steps):
        if step.step_index != position:
            raise TraceValidationError(f"step {position} is numbered {step.step_index}")


def trace_digest(trace: SessionTrace) -> str:
    """A digest of everything in a trace except timing"""
    data = trace.model_dump(mode="json", exclude={"started_at", "duration"})
    for step in data["steps"]:
        step.pop("wall_time", None)
        if step.get("exec"):
            step["exec"].pop("latency", None)
    return fingerprint(data)


def trace_path(directory: Path, session_id: str) -> Path:
    return directory / f"{session_id}.json"


def write_trace(trace: SessionTrace, directory: Path) -> Path:
    """Write one trace file and append its index entry. Single writer only."""
    directory.mkdir(parents=True, exist_ok=True)
    path = trace_path(directory, trace.session_id)
    temporary = path.with_suffix(".json.tmp")
    temporary.write_text(trace.model_dump_json(indent=2), encoding="utf-8")
    os.replace(temporary, path)
    entry = {
        "session_id": trace.session_id,
        "persona_id": trace.persona_id,
        "arm": trace.arm,
        "outcome": trace.outcome.kind,
        "file": path.name,
        "digest": trace_digest(trace),
    }
    with (directory / INDEX_NAME).open("a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_trace(path: Path) -> SessionTrace:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TraceValidationError(f"unreadable: {e}") from e
    if isinstance(raw, dict) and raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise TraceValidationError(
            f"Unsupported schema_version {raw.get('schema_version')} (expected {SCHEMA_VERSION})"
        )
    try:
        trace = SessionTrace.model_validate(raw)
    except ValidationError as e:
        raise TraceValidationError(f"schema mismatch: {e.error_count()} errors, first: {e.errors()[0]['msg']}") from e
    check_trace(trace)
    return trace


class Rejected(NamedTuple):
    path: Path
    reason: str


def scan_traces(directory: Path) -> tuple[list[SessionTrace], list[Rejected]]:
    """Load every trace in a folder, collecting per-file diagnostics for bad ones"""
    traces, rejected = [], []
    if not directory.is_dir():
        return traces, rejected
    for path in sorted(directory.glob("*.json")):
        try:
            traces.append(read_trace(path))
        except TraceValidationError as e:
            logger.warning(f"Rejecting trace {BOLD}{path.name}{NC}: {e}")
            rejected.append(Rejected(path, str(e)))
    traces.sort(key=lambda t: t.session_id)
    return traces, rejected


def load_traces(directory: Path) -> list[SessionTrace]:
    return scan_traces(directory)[0]


def tabular(traces: Sequence[SessionTrace]) -> pd.DataFrame:
    rows = [
        {
            "session_id": t.session_id,
            "persona_id": t.persona_id,
            "arm": t.arm,
            **{f"n_{kind}": t.totals.get(kind, 0) for kind in ACTION_KINDS},
            "total_actions": t.total_actions,
            "converted": t.outcome.converted,
            "spend": t.spend,
            "outcome_kind": t.outcome.kind,
            "duration_s": t.duration,
        }
        for t in sorted(traces, key=lambda t: t.session_id)
    ]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def export_tabular(traces: Sequence[SessionTrace], path: Path) -> int:
    """Write one CSV row per session; returns the number of rows"""
    if not traces:
        raise ValueError("No traces to export")
    frame = tabular(traces)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return len(frame)
