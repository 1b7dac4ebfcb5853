"""
persona - Generate, validate and sample pools of shopper personas.

Demographics are drawn host-side from the agent spec and injected into the
generation prompt; the model only writes the narrative around them. The
returned document is read back with a tolerant section parser, checked
against the agent spec, and regenerated a bounded number of times if it drifts.
"""

from __future__ import annotations

import logging
import math
import re
import string
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Annotated, Literal, NamedTuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import data_path, default
from .model_client import ChatContext, Message, ModelClient
from .util import BOLD, NC, fingerprint, stable_hash

logger = logging.getLogger(__name__)

DEMOGRAPHIC_KEYS = ("age", "gender", "education", "profession", "income")
NARRATIVE_SECTIONS = (
    "background",
    "financial_situation",
    "shopping_habits",
    "professional_life",
    "personal_style",
)
NUMERIC_DEMOGRAPHICS = {"age", "income"}

Demographic = Union[int, float, str]


class PersonaGenerationError(RuntimeError):
    """A persona kept failing validation against its agent spec"""

    def __init__(self, message: str, attribute: str | None = None):
        self.attribute = attribute
        super().__init__(message)


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class CategoricalAttribute(_Frozen):
    kind: Literal["categorical"] = "categorical"
    name: str
    values: tuple[str, ...] = Field(min_length=1)
    weights: tuple[float, ...] | None = None

    @model_validator(mode="after")
    def _check(self) -> "CategoricalAttribute":
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"Duplicate labels in attribute {self.name}")
        if self.weights is not None:
            if len(self.weights) != len(self.values):
                raise ValueError(f"Attribute {self.name} needs one weight per label")
            if any(w < 0 for w in self.weights) or abs(math.fsum(self.weights) - 1) > 1e-9:
                raise ValueError(
                    f"Weights of attribute {self.name} must be non-negative and sum to 1"
                )
        return self

    @property
    def probabilities(self) -> tuple[float, ...]:
        return self.weights or tuple(1 / len(self.values) for _ in self.values)


class NumericAttribute(_Frozen):
    kind: Literal["numeric"] = "numeric"
    name: str
    min: float
    max: float
    distribution: Literal["uniform", "normal"] = "uniform"
    mean: float | None = None
    sd: float | None = Field(default=None, gt=0)
    integer: bool = True

    @model_validator(mode="after")
    def _check(self) -> "NumericAttribute":
        if not self.min < self.max:
            raise ValueError(f"Attribute {self.name} needs min < max")
        if self.distribution == "normal" and self.sd is None:
            raise ValueError(f"Normally distributed attribute {self.name} needs an sd")
        return self

    def draw(self, rng: np.random.Generator) -> int | float:
        if self.distribution == "uniform":
            value = rng.uniform(self.min, self.max)
        else:
            mean = self.mean if self.mean is not None else (self.min + self.max) / 2
            # Truncated by clipping, so every draw is in range
            value = float(np.clip(rng.normal(mean, self.sd), self.min, self.max))
        if self.integer:
            return int(np.clip(round(value), math.ceil(self.min), math.floor(self.max)))
        return float(value)


AttributeSpec = Annotated[
    Union[CategoricalAttribute, NumericAttribute], Field(discriminator="kind")
]


class IntentionTemplate(_Frozen):
    """A goal sentence with {slots}, each filled from its list of choices"""

    template: str
    slots: dict[str, tuple[str, ...]]
    category_slot: str | None = "product"
    budget_slot: str | None = "budget"

    @model_validator(mode="after")
    def _slots_cover_template(self) -> "IntentionTemplate":
        names = {f for _, f, _, _ in string.Formatter().parse(self.template) if f}
        if missing := names - set(self.slots):
            raise ValueError(f"Template slots without choices: {', '.join(sorted(missing))}")
        for name, choices in self.slots.items():
            if not choices:
                raise ValueError(f"Slot {name} has no choices")
        return self


class AgentSpec(_Frozen):
    count: int
    attributes: tuple[AttributeSpec, ...] = ()
    population_description: str = ""
    intention_spec: tuple[IntentionTemplate, ...]

    @field_validator("count")
    @classmethod
    def _positive(cls, count: int) -> int:
        if count < 1:
            raise ValueError("count must be ≥ 1")
        return count

    @model_validator(mode="after")
    def _check(self) -> "AgentSpec":
        if not self.intention_spec:
            raise ValueError("At least one intention template is required")
        names = [a.name for a in self.attributes]
        if len(names) != len(set(names)):
            raise ValueError("Attribute names must be unique")
        return self

    def attribute(self, name: str) -> CategoricalAttribute | NumericAttribute | None:
        for attribute in self.attributes:
            if attribute.name == name:
                return attribute
        return None


class Persona(_Frozen):
    id: str
    name: str
    demographics: dict[str, Demographic]
    narrative: dict[str, str]

    def document(self) -> str:
        """The persona as a labelled text document"""
        lines = [f"Persona: {self.name}", ""]
        for section in NARRATIVE_SECTIONS:
            lines += [f"{_heading(section)}:", self.narrative.get(section, ""), ""]
            if section == "background":
                lines.append("Demographics:")
                for key, value in self.demographics.items():
                    if key == "income" and isinstance(value, (int, float)):
                        value = f"${value:,.0f}"
                    lines.append(f"{_heading(key)}: {value}")
                lines.append("")
        return "\n".join(lines).strip()


class Intention(_Frozen):
    goal_text: str
    budget_limit: float | None = Field(default=None, ge=0)
    category_hint: str | None = None

    @field_validator("goal_text")
    @classmethod
    def _non_empty(cls, goal: str) -> str:
        if not goal.strip():
            raise ValueError("Intention goal text must be non-empty")
        return goal


class PersonaPool(_Frozen):
    spec_fingerprint: str
    personas: tuple[Persona, ...]
    intentions: dict[str, Intention]

    @model_validator(mode="after")
    def _check(self) -> "PersonaPool":
        ids = [p.id for p in self.personas]
        if len(ids) != len(set(ids)):
            raise ValueError("Persona ids must be unique within a pool")
        if set(ids) != set(self.intentions):
            raise ValueError("Every persona needs exactly one intention")
        return self

    def __len__(self) -> int:
        return len(self.personas)

    def by_id(self) -> dict[str, Persona]:
        return {p.id: p for p in self.personas}

    def subset(self, personas: Sequence[Persona]) -> "PersonaPool":
        return PersonaPool(
            spec_fingerprint=self.spec_fingerprint,
            personas=tuple(personas),
            intentions={p.id: self.intentions[p.id] for p in personas},
        )


class Violation(NamedTuple):
    attribute: str
    message: str


class ValidationReport(BaseModel):
    persona_id: str
    violations: list[Violation] = []

    @property
    def valid(self) -> bool:
        return not self.violations


#
# Reading persona documents
#


def _heading(key: str) -> str:
    return key.replace("_", " ").title()


def _normalise(label: str) -> str:
    return re.sub(r"\s+", "_", label.strip().strip("#* ").lower())


_LABELLED = re.compile(r"^[\s#*>-]*([A-Za-z][A-Za-z /'-]{0,40}?)\s*\**\s*:\s*\**\s*(.*?)\s*$")
_NUMBER = re.compile(r"\d[\d,]*(?:\.\d+)?")


def _number(text: str) -> int | float | None:
    match = _NUMBER.search(text)
    if match is None:
        return None
    value = float(match.group(0).replace(",", ""))
    return int(value) if value.is_integer() else value


def parse_demographic(
    key: str, raw: str, spec: AgentSpec | None = None
) -> Demographic:
    attribute = spec.attribute(key) if spec else None
    if key in NUMERIC_DEMOGRAPHICS or isinstance(attribute, NumericAttribute):
        number = _number(raw)
        if number is not None:
            return number
    return raw.strip()


def parse_persona(text: str, persona_id: str, spec: AgentSpec | None = None) -> Persona:
    """
    Read a persona document.

    Headings are matched case-insensitively and may carry markdown
    decoration; text under a heading runs until the next known heading.
    Inside the demographics section every ``Key: value`` line is a field.
    """
    name = ""
    demographics: dict[str, Demographic] = {}
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        if match := _LABELLED.match(line):
            key, rest = _normalise(match.group(1)), match.group(2)
            if key in ("persona", "name") and not name:
                name = rest.strip("*# ")
                current = None
                continue
            if key in NARRATIVE_SECTIONS or key == "demographics":
                current = key
                sections.setdefault(key, [])
                if rest:
                    sections[key].append(rest)
                continue
            if current == "demographics" or (current is None and key in DEMOGRAPHIC_KEYS):
                demographics[key] = parse_demographic(key, rest, spec)
                continue
        if current is not None and current != "demographics" and line.strip():
            sections[current].append(line.strip())
    narrative = {
        key: " ".join(lines).strip()
        for key, lines in sections.items()
        if key in NARRATIVE_SECTIONS
    }
    return Persona(id=persona_id, name=name, demographics=demographics, narrative=narrative)


def validate_persona(p: Persona, spec: AgentSpec) -> ValidationReport:
    """Check a persona against its spec; never raises"""
    violations = []
    if not p.name.strip():
        violations.append(Violation("structure", "persona has no name"))
    for key in DEMOGRAPHIC_KEYS:
        if key not in p.demographics or p.demographics[key] in ("", None):
            violations.append(Violation("structure", f"missing demographic {key}"))
    for section in NARRATIVE_SECTIONS:
        if not p.narrative.get(section, "").strip():
            violations.append(Violation("structure", f"missing narrative section {section}"))

    for attribute in spec.attributes:
        value = p.demographics.get(attribute.name)
        if value is None:
            violations.append(Violation(attribute.name, "missing"))
        elif isinstance(attribute, CategoricalAttribute):
            if str(value) not in attribute.values:
                violations.append(
                    Violation(attribute.name, f"{value!r} is not one of {list(attribute.values)}")
                )
        elif not isinstance(value, (int, float)) or isinstance(value, bool):
            violations.append(Violation(attribute.name, f"{value!r} is not a number"))
        elif not attribute.min <= value <= attribute.max:
            violations.append(
                Violation(
                    attribute.name,
                    f"{value} is outside [{attribute.min:g}, {attribute.max:g}]",
                )
            )
        elif attribute.integer and not float(value).is_integer():
            violations.append(Violation(attribute.name, f"{value} is not a whole number"))
    return ValidationReport(persona_id=p.id, violations=violations)


#
# Generation
#


def persona_id(index: int) -> str:
    return f"persona-{index:06d}"


def draw_demographics(spec: AgentSpec, rng: np.random.Generator) -> dict[str, Demographic]:
    drawn: dict[str, Demographic] = {}
    for attribute in spec.attributes:
        if isinstance(attribute, CategoricalAttribute):
            drawn[attribute.name] = attribute.values[
                int(rng.choice(len(attribute.values), p=attribute.probabilities))
            ]
        else:
            drawn[attribute.name] = attribute.draw(rng)
    return drawn


def draw_intention(spec: AgentSpec, rng: np.random.Generator) -> Intention:
    template = spec.intention_spec[int(rng.integers(len(spec.intention_spec)))]
    chosen = {
        slot: choices[int(rng.integers(len(choices)))]
        for slot, choices in template.slots.items()
    }
    budget = None
    if template.budget_slot and template.budget_slot in chosen:
        budget = _number(chosen[template.budget_slot])
    return Intention(
        goal_text=template.template.format(**chosen),
        budget_limit=budget,
        category_hint=chosen.get(template.category_slot) if template.category_slot else None,
    )


def persona_prompt(spec: AgentSpec, demographics: dict[str, Demographic]) -> list[Message]:
    template = string.Template(data_path("persona_prompt.txt").read_text(encoding="utf-8"))
    fixed = []
    for key, value in demographics.items():
        if key == "income" and isinstance(value, (int, float)):
            value = f"${value:,.0f}"
        fixed.append(f"{_heading(key)}: {value}")
    extra = [f"{_heading(k)}: <value>" for k in demographics if k not in DEMOGRAPHIC_KEYS]
    text = template.substitute(
        population=spec.population_description or "Online shoppers in the United States.",
        demographics="\n".join(fixed) or "(none, choose freely)",
        extra_keys="\n".join(extra) + ("\n" if extra else ""),
    )
    return [Message(role="user", content=text)]


def _generate_one(
    spec: AgentSpec, model: ModelClient, seed: int, index: int, attempts: int
) -> tuple[Persona, Intention]:
    rng = np.random.default_rng([seed, index])
    drawn = draw_demographics(spec, rng)
    intention = draw_intention(spec, rng)
    messages = persona_prompt(spec, drawn)
    pid = persona_id(index)

    report = None
    for attempt in range(attempts):
        text = model.complete(messages, ChatContext(pid, attempt, seed))
        parsed = parse_persona(text, pid, spec)
        restated = parsed.demographics
        if changed := sorted(k for k, v in drawn.items() if k in restated and restated[k] != v):
            logger.debug(f"Persona {pid} document restated {', '.join(changed)}; keeping the drawn values")
        # Drawn values are authoritative; the document only adds what was not drawn
        demographics = {**parsed.demographics, **drawn}
        persona = parsed.model_copy(update={"demographics": demographics})
        report = validate_persona(persona, spec)
        if report.valid:
            return persona, intention
        logger.debug(
            f"Persona {pid} attempt {attempt + 1} invalid: "
            + "; ".join(f"{v.attribute}: {v.message}" for v in report.violations)
        )
    assert report is not None
    first = report.violations[0]
    raise PersonaGenerationError(
        f"Persona {pid} failed validation after {attempts} attempts on {BOLD}{first.attribute}{NC}: {first.message}",
        attribute=first.attribute,
    )


def generate_personas(
    spec: AgentSpec,
    model: ModelClient,
    seed: int,
    *,
    parallelism: int = 1,
    attempts: int | None = None,
) -> PersonaPool:
    """Generate exactly spec.count validated personas, one model request each"""
    attempts = attempts or default("persona", "attempts", int)
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(
            pool.map(
                lambda i: _generate_one(spec, model, seed, i, attempts), range(spec.count)
            )
        )
    return PersonaPool(
        spec_fingerprint=fingerprint(spec),
        personas=tuple(p for p, _ in results),
        intentions={p.id: i for p, i in results},
    )


def sample(pool: PersonaPool, n: int, seed: int) -> list[Persona]:
    """Draw n distinct personas, reproducibly"""
    if not 1 <= n <= len(pool):
        raise ValueError(f"Cannot sample {n} personas from a pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=n, replace=False)
    return [pool.personas[int(i)] for i in chosen]


def save_pool(pool: PersonaPool, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(pool.model_dump_json(indent=2), encoding="utf-8")


def load_pool(path: Path) -> PersonaPool:
    return PersonaPool.model_validate_json(path.read_text(encoding="utf-8"))


#
# An offline narrator, for runs without a live model
#

_NAMES = (
    "Marcus", "Priya", "Elena", "Tomás", "Aisha", "Jun", "Grace", "Omar",
    "Hannah", "Diego", "Mei", "Samuel", "Fatima", "Lukas", "Nora", "Kwame",
)
_PROFESSIONS = (
    "Freelance Graphic Designer", "Registered Nurse", "Software Engineer",
    "High School Teacher", "Retail Manager", "Electrician", "Accountant",
    "Graduate Student",
)
_EDUCATION = ("High school diploma", "Bachelor's degree", "Master's degree", "Associate degree")
_FIXED_LINE = re.compile(r"^([A-Z][A-Za-z ]*): (.+)$")


class TemplateNarrator:
    """
    A model client that writes persona documents from fixed text blocks.

    It echoes the demographics it was asked to keep and fills the rest from
    a small vocabulary chosen by a stable hash of the persona id.
    """

    def complete(
        self, messages: Sequence[Message], context: ChatContext | None = None
    ) -> str:
        context = context or ChatContext(session_id="persona", step_index=0)
        fixed: dict[str, str] = {}
        in_block = False
        for line in messages[-1].content.splitlines():
            if line.startswith("Fixed demographics"):
                in_block = True
                continue
            if in_block:
                if not line.strip():
                    break
                if match := _FIXED_LINE.match(line):
                    fixed[_normalise(match.group(1))] = match.group(2)

        pick = stable_hash(context.session_id, context.seed)
        name = _NAMES[pick % len(_NAMES)]
        fixed.setdefault("age", str(25 + pick % 40))
        fixed.setdefault("gender", ("Female", "Male")[pick % 2])
        fixed.setdefault("education", _EDUCATION[pick % len(_EDUCATION)])
        fixed.setdefault("profession", _PROFESSIONS[pick % len(_PROFESSIONS)])
        fixed.setdefault("income", f"${30_000 + (pick % 90) * 1_000:,}")
        profession = fixed["profession"]
        lines = [
            f"Persona: {name}",
            "",
            "Background:",
            f"{name} is a {fixed['age']}-year-old {profession.lower()} who shops online most weeks.",
            "",
            "Demographics:",
            *(f"{_heading(k)}: {v}" for k, v in fixed.items()),
            "",
            "Financial Situation:",
            f"{name} earns {fixed['income']} a year and keeps to a monthly budget.",
            "",
            "Shopping Habits:",
            f"{name} compares a few options, reads reviews, and prefers well rated products.",
            "",
            "Professional Life:",
            f"{name} works as a {profession.lower()} and values tools that save time.",
            "",
            "Personal Style:",
            f"{name} likes practical, comfortable things over flashy ones.",
        ]
        return "\n".join(lines)
