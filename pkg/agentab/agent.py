"""
agent - The observe, prompt, parse, act loop of one shopping session.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
import string
import time
from collections.abc import Callable, Sequence
from functools import lru_cache
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .config import data_path, default
from .environment import (
    Action,
    ActionSpace,
    ClickFilter,
    ClickProduct,
    EnvError,
    EnvSession,
    ExecResult,
    Observation,
    OutOfSpaceError,
    Purchase,
    Search,
    Stop,
    action_space,
    execute,
)
from .model_client import ChatContext, Message, ModelClient, ModelTransportError
from .persona import Intention, Persona
from .trace_store import (
    OutcomeKind,
    SessionOutcome,
    SessionTrace,
    StepRecord,
    compute_totals,
)
from .util import fingerprint

logger = logging.getLogger(__name__)

GRAMMAR = """search("<query>")
click_product(<index>)
click_filter_option("<Group>: <Value>")
purchase
stop"""


class ActionParseError(ValueError):
    """A model reply did not yield a usable action"""


class ActionSyntaxError(ActionParseError):
    """No well-formed action in the reply"""


class ActionSpaceError(ActionParseError):
    """The reply named an action the current page does not offer"""

    def __init__(self, message: str, action: Action):
        self.action = action
        super().__init__(message)


class SessionLimits(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_actions: int = Field(default_factory=lambda: default("limits", "max_actions", int), ge=1)
    max_wall_time: float = Field(
        default_factory=lambda: default("limits", "max_wall_time", float), gt=0
    )
    loop_window: int = Field(default_factory=lambda: default("limits", "loop_window", int), ge=1)


class AgentState(BaseModel):
    persona: Persona
    intention: Intention
    arm: str
    history: list[StepRecord] = []
    status: Literal["running", "done"] = "running"
    outcome: OutcomeKind | None = None

    @property
    def step_index(self) -> int:
        return len(self.history)


#
# Action grammar
#


def serialize_action(action: Action) -> str:
    """The canonical text form of an action"""
    match action:
        case Search(query=query):
            return f"search({json.dumps(query, ensure_ascii=False)})"
        case ClickProduct(index=index):
            return f"click_product({index})"
        case ClickFilter(group=group, value=value):
            return f"click_filter_option({json.dumps(f'{group}: {value}', ensure_ascii=False)})"
        case Purchase():
            return "purchase"
        case Stop():
            return "stop"
    raise AssertionError(f"Unhandled action {action!r}")


_QUOTED = r'(?:"(?P<{0}_json>(?:[^"\\]|\\.)*)"|[“”](?P<{0}_smart>[^“”]*)[“”])'

_CALLS: dict[str, re.Pattern[str]] = {
    "search": re.compile(r"\bsearch\s*\(\s*" + _QUOTED.format("q") + r"\s*\)", re.I),
    "brace_search": re.compile(r"\{\s*search\s+" + _QUOTED.format("q") + r"\s*\}", re.I),
    "click_product": re.compile(
        r"(?:\b(?:click_product|product_click)\s*\(\s*(?P<index>\d+)\s*\)"
        r"|\{\s*(?:click_product|product_click)\s+(?P<brace_index>\d+)\s*\})",
        re.I,
    ),
    "click_filter_option": re.compile(
        r"\b(?:click_filter_option|filter)\s*\(\s*(?:"
        + _QUOTED.format("f")
        + r"|(?P<f_bare>[^()\"“”]+?))\s*\)",
        re.I,
    ),
    "brace_filter": re.compile(
        r"\{\s*(?:click_filter_option|filter)\s+" + _QUOTED.format("f") + r"\s*\}", re.I
    ),
    "purchase": re.compile(r"\{\s*purchase\s*\}|\bpurchase\s*\(\s*\)", re.I),
    "stop": re.compile(r"\{\s*(?:stop|terminate)\s*\}|\b(?:stop|terminate)\s*\(\s*\)", re.I),
}
_KEYWORDS = {"purchase": "purchase", "stop": "stop|terminate"}
# Inside an Action: line a bare keyword anywhere counts
_LOOSE_KEYWORDS = {
    kind: re.compile(rf"\b(?:{words})\b", re.I) for kind, words in _KEYWORDS.items()
}
# In free text a bare keyword only counts on a line of its own
_KEYWORD_LINES = {
    kind: re.compile(rf"^[^\w\n]*(?:{words})[^\w\n]*$", re.I | re.M)
    for kind, words in _KEYWORDS.items()
}
_ACTION_LINE = re.compile(r"^[\s*>#-]*action\s*\**\s*:", re.I | re.M)


def _quoted(match: re.Match[str], name: str) -> str | None:
    if (raw := match.group(f"{name}_json")) is not None:
        return json.loads(f'"{raw}"')
    return match.group(f"{name}_smart")


def _filter_option(text: str, *, verbatim: bool) -> ClickFilter:
    """
    Split 'Group: Value'.

    Quoted options keep their text exactly, apart from the ': ' separator
    that serialize_action writes; bare ones are trimmed.
    """
    if verbatim and ": " in text:
        group, _, value = text.partition(": ")
        return ClickFilter(group=group, value=value)
    group, sep, value = text.partition(":")
    if not sep:
        raise ValueError(f"Filter option {text!r} is not of the form 'Group: Value'")
    return ClickFilter(group=group.strip(), value=value.strip())


def _build(kind: str, match: re.Match[str]) -> Action:
    match kind:
        case "search" | "brace_search":
            return Search(query=_quoted(match, "q") or "")
        case "click_product":
            return ClickProduct(index=int(match.group("index") or match.group("brace_index")))
        case "click_filter_option" | "brace_filter":
            if (text := _quoted(match, "f")) is not None:
                return _filter_option(text, verbatim=True)
            return _filter_option(match.group("f_bare"), verbatim=False)
        case "purchase":
            return Purchase()
        case "stop":
            return Stop()
    raise AssertionError(f"Unhandled pattern {kind}")


def _scan(text: str, *, action_line: bool) -> Action | None:
    """
    The well-formed action in some text.

    The earliest action wins. In the text of an Action: line bare keywords
    count anywhere; in free prose ``purchase`` and ``stop`` only count in call
    syntax or on a line of their own.
    """
    keywords = _LOOSE_KEYWORDS if action_line else _KEYWORD_LINES
    patterns = itertools.chain(_CALLS.items(), keywords.items())
    found = []
    for kind, pattern in patterns:
        for match in pattern.finditer(text):
            try:
                found.append((match.start(), match.end(), _build(kind, match)))
            except (ValueError, ValidationError, json.JSONDecodeError):
                continue
    if not found:
        return None
    # Longest match at the earliest position
    return min(found, key=lambda x: (x[0], -x[1]))[2]


def split_reply(text: str) -> tuple[str | None, str]:
    """Separate a 'Thought: ... Action: ...' reply into rationale and action text"""
    match = _ACTION_LINE.search(text)
    if match is None:
        return None, text
    rationale = text[: match.start()].strip()
    rationale = re.sub(r"^\s*thought\s*:\s*", "", rationale, flags=re.I).strip()
    return rationale or None, text[match.end() :]


def parse_action(text: str, space: ActionSpace) -> Action:
    """
    Find the action in a model reply.

    An ``Action:`` line is scanned first; otherwise the earliest action written
    in call syntax, or a bare ``purchase``/``stop`` line, wins.
    """
    _, action_text = split_reply(text)
    action = None
    if action_text is not text:
        action = _scan(action_text, action_line=True)
    if action is None:
        action = _scan(text, action_line=False)
    if action is None:
        raise ActionSyntaxError(f"No action found in reply: {text.strip()[:120]!r}")
    if not space.contains(action):
        raise ActionSpaceError(
            f"{serialize_action(action)} is not available on this page", action
        )
    return action


def enumerate_space(space: ActionSpace) -> list[str]:
    lines = []
    if space.search or space.unrestricted:
        lines.append('search("<query>")')
    lines += [f"click_product({i})" for i in space.product_indices]
    lines += [
        serialize_action(ClickFilter(group=group, value=value))
        for group, value in space.filter_options
    ]
    if space.purchase:
        lines.append("purchase")
    lines.append("stop")
    return lines


#
# Prompts
#


@lru_cache
def prompt_template() -> tuple[string.Template, string.Template]:
    text = data_path("agent_prompt.txt").read_text(encoding="utf-8")
    system, _, user = text.partition("[user]")
    return (
        string.Template(system.replace("[system]", "", 1).strip()),
        string.Template(user.strip()),
    )


def _intention_lines(intention: Intention) -> str:
    lines = [f"Goal: {intention.goal_text}"]
    if intention.budget_limit is not None:
        lines.append(f"Budget: ${intention.budget_limit:,.2f}")
    if intention.category_hint:
        lines.append(f"Category: {intention.category_hint}")
    return "\n".join(lines)


def summarize_step(step: StepRecord) -> str:
    if step.action is None:
        return f"step {step.step_index + 1}: (no usable action) → {step.parse_error}"
    assert step.exec is not None
    return f"step {step.step_index + 1}: {serialize_action(step.action)} → {step.exec.describe()}"


def build_prompt(
    state: AgentState, obs: Observation, space: ActionSpace, *, window: int | None = None
) -> list[Message]:
    """System message with persona and intention; user message with history, page and choices"""
    if window is None:
        window = default("limits", "loop_window", int) * 3
    system, user = prompt_template()
    history = ""
    recent = state.history[-window:] if window else []
    if recent:
        history = "Your recent steps:\n" + "\n".join(summarize_step(s) for s in recent) + "\n\n"
    return [
        Message(
            role="system",
            content=system.substitute(
                persona=state.persona.document(), intention=_intention_lines(state.intention)
            ),
        ),
        Message(
            role="user",
            content=user.substitute(
                history=history,
                observation=obs.to_json(),
                space="\n".join(f"- {x}" for x in enumerate_space(space)),
                grammar=GRAMMAR,
            ).strip(),
        ),
    ]


def prompt_digest(messages: Sequence[Message]) -> str:
    return fingerprint([m.model_dump() for m in messages])


def corrective_prompt(messages: Sequence[Message], reply: str, error: Exception) -> list[Message]:
    return [
        *messages,
        Message(role="assistant", content=reply),
        Message(
            role="user",
            content=f"That reply could not be used: {error}.\nReply with exactly one action:\n{GRAMMAR}",
        ),
    ]


#
# The loop
#


def decide_termination(
    state: AgentState, limits: SessionLimits, elapsed: float = 0.0
) -> OutcomeKind | None:
    """Which terminal condition, if any, the session has reached"""
    actions = [s.action for s in state.history if s.action is not None]
    if actions and isinstance(actions[-1], Stop):
        return "stopped"
    window = state.history[-limits.loop_window :]
    if (
        len(window) == limits.loop_window
        and all(s.action is not None for s in window)
        and all(s.action == window[0].action for s in window)
    ):
        return "looping"
    if state.step_index >= limits.max_actions:
        return "action_cap"
    if elapsed >= limits.max_wall_time:
        return "time_cap"
    return None


def close_trace(
    state: AgentState,
    session_id: str,
    seed: int,
    kind: OutcomeKind,
    started_at: float,
    duration: float,
) -> SessionTrace:
    totals, spend = compute_totals(state.history)
    return SessionTrace(
        session_id=session_id,
        persona_id=state.persona.id,
        arm=state.arm,
        seed=seed,
        steps=tuple(state.history),
        outcome=SessionOutcome(
            kind=kind,
            converted=totals["purchase"] >= 1,
            purchases=totals["purchase"],
            spend=spend,
        ),
        totals=totals,
        spend=spend,
        started_at=started_at,
        duration=max(duration, 0.0),
    )


def _stop_quietly(env: EnvSession) -> None:
    try:
        env.perform(Stop(), ActionSpace())
    except (EnvError, OutOfSpaceError) as e:
        logger.debug(f"Ignoring error stopping environment: {e}")


def run_session(
    persona: Persona,
    intention: Intention,
    env: EnvSession,
    model: ModelClient,
    limits: SessionLimits,
    seed: int,
    *,
    arm: str = "",
    session_id: str | None = None,
    clock: Callable[[], float] = time.time,
) -> SessionTrace:
    """
    Run one shopping session to a terminal condition.

    Environment and model failures end the session with an exec_failure or
    parse_failure outcome; they are not raised.
    """
    session_id = session_id or f"{arm}-{persona.id}"
    state = AgentState(persona=persona, intention=intention, arm=arm)
    started_at = clock()

    def finish(kind: OutcomeKind) -> SessionTrace:
        state.status, state.outcome = "done", kind
        logger.debug(f"Session {session_id} ended: {kind} after {state.step_index} steps")
        return close_trace(state, session_id, seed, kind, started_at, clock() - started_at)

    while True:
        try:
            obs = env.observe()
        except EnvError as e:
            logger.warning(f"Session {session_id}: could not observe page: {e}")
            return finish("exec_failure")
        space = action_space(obs)
        messages = build_prompt(state, obs, space, window=limits.loop_window * 3)
        context = ChatContext(session_id, state.step_index, seed)
        step = {
            "step_index": state.step_index,
            "observation": obs,
            "prompt_digest": prompt_digest(messages),
        }

        try:
            reply = model.complete(messages, context)
        except ModelTransportError as e:
            logger.warning(f"Session {session_id}: model unavailable: {e}")
            state.history.append(
                StepRecord(
                    **step,
                    raw_model_text="",
                    parse_error=f"model transport failure: {e}",
                    wall_time=clock() - started_at,
                )
            )
            _stop_quietly(env)
            return finish("parse_failure")

        reprompted = False
        try:
            action = parse_action(reply, space)
        except ActionParseError as first_error:
            logger.debug(f"Session {session_id}: re-prompting after {first_error}")
            reprompted = True
            try:
                reply = model.complete(corrective_prompt(messages, reply, first_error), context)
                action = parse_action(reply, space)
            except (ActionParseError, ModelTransportError) as e:
                state.history.append(
                    StepRecord(
                        **step,
                        raw_model_text=reply,
                        parse_error=str(e),
                        reprompted=True,
                        rationale=split_reply(reply)[0],
                        wall_time=clock() - started_at,
                    )
                )
                _stop_quietly(env)
                return finish("parse_failure")

        exec_started = clock()
        try:
            result = execute(env, action, space)
        except EnvError as e:
            result = ExecResult.failed(str(e))
        result = result.model_copy(update={"latency": max(clock() - exec_started, 0.0)})
        state.history.append(
            StepRecord(
                **step,
                raw_model_text=reply,
                action=action,
                reprompted=reprompted,
                exec=result,
                rationale=split_reply(reply)[0],
                wall_time=clock() - started_at,
            )
        )
        if result.status == "failed":
            logger.warning(f"Session {session_id}: {serialize_action(action)} {result.describe()}")
            return finish("exec_failure")
        if kind := decide_termination(state, limits, clock() - started_at):
            return finish(kind)
