"""
allocation - Split personas between arms and rerandomize until balanced.

Numeric attributes are compared with the absolute standardized mean
difference, categorical ones with total variation distance. Attempts use
seeds seed, seed+1, ... so a run, passing or not, can be reproduced exactly.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import default
from .persona import AttributeSpec, CategoricalAttribute, Persona
from .util import G, NC, Y

logger = logging.getLogger(__name__)


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Arm(_Frozen):
    name: str
    variant_id: str


class Allocation(_Frozen):
    assignment: dict[str, str]
    seed: int
    attempt: int = Field(default=1, ge=1)

    def members(self, arm: str) -> list[str]:
        return [pid for pid, name in self.assignment.items() if name == arm]

    def sizes(self) -> dict[str, int]:
        return dict(Counter(self.assignment.values()))


class BalanceMetric(_Frozen):
    # Zero-variance arms with different means score infinity
    model_config = ConfigDict(frozen=True, extra="forbid", ser_json_inf_nan="constants")

    metric_kind: Literal["SMD", "TVD"]
    value: float = Field(ge=0)


class BalanceReport(_Frozen):
    per_attribute: dict[str, BalanceMetric]
    passed: bool
    threshold: float

    @model_validator(mode="after")
    def _consistent(self) -> "BalanceReport":
        if self.passed != all(m.value <= self.threshold for m in self.per_attribute.values()):
            raise ValueError("passed must hold exactly when every metric is within threshold")
        return self

    @property
    def worst(self) -> float:
        return max((m.value for m in self.per_attribute.values()), default=0.0)


class AllocationRecord(_Frozen):
    """The persisted form of an allocation and its balance check"""

    seed: int
    attempt: int
    arms: tuple[Arm, ...]
    assignment: dict[str, str]
    balance_report: BalanceReport

    @property
    def allocation(self) -> Allocation:
        return Allocation(assignment=self.assignment, seed=self.seed, attempt=self.attempt)


def check_arms(arms: Sequence[Arm]) -> None:
    if len(arms) < 2:
        raise ValueError("An experiment needs at least two arms")
    names = [a.name for a in arms]
    if len(names) != len(set(names)):
        raise ValueError(f"Arm names must be unique, got {names}")


def allocate(
    personas: Sequence[Persona], arms: Sequence[Arm], seed: int, *, attempt: int = 1
) -> Allocation:
    """Seeded uniform random equal split"""
    check_arms(arms)
    if len(personas) < len(arms):
        raise ValueError(
            f"Too few personas ({len(personas)}) to fill {len(arms)} arms"
        )
    order = np.random.default_rng(seed).permutation(len(personas))
    assignment = {
        personas[int(i)].id: arms[position % len(arms)].name
        for position, i in enumerate(order)
    }
    return Allocation(assignment=assignment, seed=seed, attempt=attempt)


def _sample_variance(values: np.ndarray) -> float:
    return float(np.var(values, ddof=1)) if len(values) > 1 else 0.0


def standardized_mean_difference(a: Sequence[float], b: Sequence[float]) -> float:
    """|mean_a - mean_b| / sqrt((var_a + var_b) / 2), with sample variances"""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    difference = abs(float(a.mean()) - float(b.mean()))
    pooled = math.sqrt((_sample_variance(a) + _sample_variance(b)) / 2)
    if pooled == 0:
        return 0.0 if difference == 0 else math.inf
    return difference / pooled


def total_variation_distance(a: Sequence[str], b: Sequence[str]) -> float:
    """Half the summed absolute difference of label frequencies"""
    count_a, count_b = Counter(a), Counter(b)
    labels = set(count_a) | set(count_b)
    return 0.5 * math.fsum(
        abs(count_a[x] / len(a) - count_b[x] / len(b)) for x in labels
    )


def balance_metrics(
    alloc: Allocation,
    personas: Sequence[Persona],
    attributes: Sequence[AttributeSpec],
    threshold: float | None = None,
) -> BalanceReport:
    """Score covariate balance between the two arms of an allocation"""
    if threshold is None:
        threshold = default("allocation", "threshold", float)
    arm_names = sorted(set(alloc.assignment.values()))
    if len(arm_names) != 2:
        raise ValueError(f"Balance scoring needs exactly two arms, got {len(arm_names)}")
    by_id = {p.id: p for p in personas}
    groups = [[by_id[pid] for pid in alloc.members(name)] for name in arm_names]
    if any(not g for g in groups):
        raise ValueError("Cannot score balance with an empty arm")

    per_attribute = {}
    for attribute in attributes:
        a, b = ([p.demographics[attribute.name] for p in g] for g in groups)
        if isinstance(attribute, CategoricalAttribute):
            metric = BalanceMetric(
                metric_kind="TVD",
                value=total_variation_distance([str(x) for x in a], [str(x) for x in b]),
            )
        else:
            metric = BalanceMetric(metric_kind="SMD", value=standardized_mean_difference(a, b))
        per_attribute[attribute.name] = metric
    return BalanceReport(
        per_attribute=per_attribute,
        passed=all(m.value <= threshold for m in per_attribute.values()),
        threshold=threshold,
    )


def rerandomize(
    personas: Sequence[Persona],
    arms: Sequence[Arm],
    attributes: Sequence[AttributeSpec],
    threshold: float | None = None,
    max_attempts: int | None = None,
    seed: int = 0,
) -> tuple[Allocation, BalanceReport]:
    """
    Try seeds seed, seed+1, ... and keep the first balanced split.

    If none passes, the attempt with the smallest worst-case metric is
    returned, and its report says it did not pass.
    """
    if threshold is None:
        threshold = default("allocation", "threshold", float)
    if max_attempts is None:
        max_attempts = default("allocation", "max_attempts", int)
    if threshold < 0:
        raise ValueError("Balance threshold must not be negative")
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")

    best: tuple[Allocation, BalanceReport] | None = None
    for k in range(max_attempts):
        alloc = allocate(personas, arms, seed + k, attempt=k + 1)
        if len(arms) == 2:
            report = balance_metrics(alloc, personas, attributes, threshold)
        else:
            # Balance is only scored for two arms
            report = BalanceReport(per_attribute={}, passed=True, threshold=threshold)
        if report.passed:
            logger.debug(f"Allocation balanced on attempt {G}{k + 1}{NC}")
            return alloc, report
        if best is None or report.worst < best[1].worst:
            best = (alloc, report)
    assert best is not None
    logger.warning(
        f"No balanced allocation within {max_attempts} attempts; using attempt {Y}{best[0].attempt}{NC} (worst metric {best[1].worst:.3f})"
    )
    return best


def save_allocation(
    path: Path, alloc: Allocation, report: BalanceReport, arms: Sequence[Arm]
) -> AllocationRecord:
    record = AllocationRecord(
        seed=alloc.seed,
        attempt=alloc.attempt,
        arms=tuple(arms),
        assignment=alloc.assignment,
        balance_report=report,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(record.model_dump_json(indent=2), encoding="utf-8")
    return record


def load_allocation(path: Path) -> AllocationRecord:
    return AllocationRecord.model_validate_json(path.read_text(encoding="utf-8"))
