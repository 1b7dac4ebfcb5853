"""
model_client - Text generation backends for the agent.

Live runs talk to an OpenAI-style chat-completions endpoint over HTTP.
Tests and desk-scale experiments use a scripted policy instead, which picks
actions from rules over the observation embedded in the prompt and resolves
any randomness from (seed, session, step) so runs replay exactly.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from collections.abc import Callable, Sequence
from typing import Literal, NamedTuple, Protocol

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .config import default
from .environment import Observation, PageType
from .util import stable_hash

logger = logging.getLogger(__name__)

JSON_BLOCK = re.compile(r"```json\s*\n(.*?)\n```", re.DOTALL)


class ModelTransportError(RuntimeError):
    """The model backend could not produce a completion"""


class Message(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    role: Literal["system", "user", "assistant"]
    content: str

    @model_validator(mode="after")
    def _non_empty(self) -> "Message":
        if self.role in {"system", "user"} and not self.content.strip():
            raise ValueError(f"{self.role} messages must have content")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["http"] = "http"
    endpoint: str
    model_name: str
    temperature: float = Field(
        default_factory=lambda: default("model", "temperature", float), ge=0, le=2
    )
    max_tokens: int = Field(default_factory=lambda: default("model", "max_tokens", int), gt=0)
    timeout: float = Field(default_factory=lambda: default("model", "timeout", float), gt=0)
    retries: int = Field(default_factory=lambda: default("model", "retries", int), ge=0)
    backoff_base: float = Field(
        default_factory=lambda: default("model", "backoff_base", float), ge=1
    )
    backoff_initial: float = Field(
        default_factory=lambda: default("model", "backoff_initial", float), ge=0
    )
    api_key_env: str = Field(default_factory=lambda: default("model", "api_key_env", str))

    def backoff(self, attempt: int) -> float:
        """Seconds to wait before re-attempt number ``attempt`` (from 0)"""
        return self.backoff_initial * self.backoff_base**attempt


class ChatContext(NamedTuple):
    """Identifies the call site, for backends that key randomness on it"""

    session_id: str
    step_index: int
    seed: int = 0


class ChatResponse(NamedTuple):
    text: str
    retries: int


class ModelClient(Protocol):
    def complete(
        self, messages: Sequence[Message], context: ChatContext | None = None
    ) -> str: ...


#
# HTTP chat-completions backend
#


def _is_transient(response: httpx.Response) -> bool:
    return response.status_code == 429 or response.status_code >= 500


def chat_completion(
    messages: Sequence[Message],
    config: ModelConfig,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> ChatResponse:
    """Request one completion, retrying transient failures with backoff"""
    if not messages:
        raise ValueError("Cannot request a completion for an empty message list")

    payload = {
        "model": config.model_name,
        "messages": [m.model_dump() for m in messages],
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }
    headers = {}
    if api_key := os.getenv(config.api_key_env):
        headers["Authorization"] = f"Bearer {api_key}"

    owned = client is None
    client = client or httpx.Client(timeout=config.timeout)
    try:
        last_problem = "no attempt made"
        for attempt in range(config.retries + 1):
            if attempt:
                delay = config.backoff(attempt - 1)
                logger.debug(
                    f"Retrying model request ({attempt}/{config.retries}) in {delay:.2f}s: {last_problem}"
                )
                sleep(delay)
            try:
                response = client.post(
                    config.endpoint, json=payload, headers=headers, timeout=config.timeout
                )
            except httpx.TimeoutException:
                last_problem = f"timed out after {config.timeout:g}s"
                continue
            except httpx.TransportError as e:
                last_problem = f"transport error: {e}"
                continue
            if _is_transient(response):
                last_problem = f"HTTP {response.status_code}"
                continue
            if response.is_error:
                raise ModelTransportError(
                    f"Model endpoint {config.endpoint} returned HTTP {response.status_code}: {response.text[:200]}"
                )
            try:
                text = response.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise ModelTransportError(
                    f"Malformed completion payload from {config.endpoint}: {e!r}"
                ) from e
            if not isinstance(text, str):
                raise ModelTransportError(
                    f"Malformed completion payload from {config.endpoint}: content is {type(text).__name__}"
                )
            return ChatResponse(text, attempt)
        raise ModelTransportError(
            f"Model endpoint {config.endpoint} failed after {config.retries} retries: {last_problem}"
        )
    finally:
        if owned:
            client.close()


def chat(messages: Sequence[Message], config: ModelConfig, client: httpx.Client | None = None) -> str:
    return chat_completion(messages, config, client).text


class HttpModelClient:
    """A model client sharing one connection pool between workers"""

    def __init__(
        self,
        config: ModelConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._http = httpx.Client(timeout=config.timeout, transport=transport)
        self._sleep = sleep

    def complete(
        self, messages: Sequence[Message], context: ChatContext | None = None
    ) -> str:
        response = chat_completion(messages, self.config, self._http, self._sleep)
        if response.retries:
            logger.debug(f"Model call needed {response.retries} retries")
        return response.text

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "HttpModelClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


#
# Scripted policies
#


class RulePredicate(BaseModel):
    """Conditions on the current observation; unset fields always match"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    page_type: PageType | None = None
    has_products: bool | None = None
    has_filters: bool | None = None
    filters_active: bool | None = None
    purchased: bool | None = None
    min_step: int | None = Field(default=None, ge=0)

    @property
    def unconditional(self) -> bool:
        return all(getattr(self, name) is None for name in type(self).model_fields)

    def matches(self, obs: Observation, step_index: int) -> bool:
        checks = {
            "page_type": obs.page_type,
            "has_products": bool(obs.products),
            "has_filters": any(g.options for g in obs.filter_groups),
            "filters_active": any(o.selected for g in obs.filter_groups for o in g.options),
            "purchased": obs.cart_count > 0,
        }
        for name, actual in checks.items():
            wanted = getattr(self, name)
            if wanted is not None and wanted != actual:
                return False
        return self.min_step is None or step_index >= self.min_step


class PolicyRule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    when: RulePredicate = RulePredicate()
    actions: tuple[str, ...] = Field(min_length=1)
    weights: tuple[float, ...] | None = None

    @model_validator(mode="after")
    def _check_weights(self) -> "PolicyRule":
        if self.weights is None:
            if len(self.actions) > 1:
                raise ValueError("Rules with several actions need weights")
            return self
        if len(self.weights) != len(self.actions):
            raise ValueError("Need one weight per action")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1) > 1e-9:
            raise ValueError(f"Rule weights must be non-negative and sum to 1, got {sum(self.weights)}")
        return self


class ScriptedPolicy(BaseModel):
    """Ordered rules; the first one that matches (and can be filled in) fires"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rules: tuple[PolicyRule, ...] = Field(min_length=1)
    seed: int = 0

    @model_validator(mode="after")
    def _has_fallback(self) -> "ScriptedPolicy":
        if not any(rule.when.unconditional for rule in self.rules):
            raise ValueError("A scripted policy needs at least one unconditional rule")
        return self


def _prompt_line(messages: Sequence[Message], label: str) -> str | None:
    for message in messages:
        if message.role != "system":
            continue
        for line in message.content.splitlines():
            if line.strip().lower().startswith(label.lower() + ":"):
                return line.split(":", 1)[1].strip() or None
    return None


def _observation(messages: Sequence[Message]) -> Observation:
    for message in reversed(messages):
        if message.role == "user" and (match := JSON_BLOCK.search(message.content)):
            try:
                return Observation.model_validate_json(match.group(1))
            except ValidationError as e:
                raise ValueError(f"Prompt observation block is not valid: {e}") from e
    raise ValueError("Scripted policies need the observation JSON block in the prompt")


def _escape(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)[1:-1]


def template_values(obs: Observation, messages: Sequence[Message]) -> dict[str, str]:
    """Values a rule template may refer to. Absent keys make the rule skip."""
    values = {}
    if query := _prompt_line(messages, "Category") or _prompt_line(messages, "Goal"):
        values["query"] = _escape(query)
    unselected = [
        (g.name, o.value) for g in obs.filter_groups for o in g.options if not o.selected
    ]
    if unselected:
        values["first_filter"] = _escape(f"{unselected[0][0]}: {unselected[0][1]}")
    budget_text = _prompt_line(messages, "Budget")
    budget = None
    if budget_text:
        try:
            budget = float(budget_text.lstrip("$").replace(",", ""))
        except ValueError:
            logger.debug(f"Ignoring unreadable budget {budget_text!r}")
    affordable = [p for p in obs.products if budget is None or p.price <= budget]
    if affordable:
        values["affordable_index"] = str(affordable[0].index)
    if obs.products:
        best = max(obs.products, key=lambda p: (p.rating, -p.index))
        values["top_rated_index"] = str(best.index)
    return values


def scripted_chat(
    policy: ScriptedPolicy,
    messages: Sequence[Message],
    context: ChatContext | None = None,
) -> str:
    """Pick the reply a scripted policy gives for the observation in the prompt"""
    context = context or ChatContext(session_id="", step_index=0)
    obs = _observation(messages)
    values = template_values(obs, messages)
    for number, rule in enumerate(policy.rules):
        if not rule.when.matches(obs, context.step_index):
            continue
        choice = 0
        if rule.weights is not None:
            rng = np.random.default_rng(
                [policy.seed, context.seed, stable_hash(context.session_id), context.step_index, number]
            )
            choice = int(rng.choice(len(rule.actions), p=rule.weights))
        try:
            return rule.actions[choice].format(**values)
        except KeyError as e:
            logger.debug(f"Skipping rule {number}: no value for {e}")
    # Only reached when the fallback itself needs a missing value
    return "stop"


class ScriptedModelClient:
    def __init__(self, policy: ScriptedPolicy):
        self.policy = policy

    def complete(
        self, messages: Sequence[Message], context: ChatContext | None = None
    ) -> str:
        return scripted_chat(self.policy, messages, context)
