"""
analysis - Per-arm summaries, hypothesis tests and the A/B report.

Two-sided p-values come from the regularized incomplete beta function (Student
t) and the regularized upper incomplete gamma function (chi-square with one
degree of freedom), both from scipy.special.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special

from .environment import ACTION_KINDS, ActionKind
from .persona import Persona
from .trace_store import OUTCOME_KINDS, SessionTrace
from .util import BOLD, NC

logger = logging.getLogger(__name__)

TestKind = Literal["pooled_t", "welch_t", "chi_square_2x2"]
TMode = Literal["pooled", "welch"]

# Report rows, in the order the comparison table is printed
METRIC_ROWS: tuple[str, ...] = (
    *ACTION_KINDS,
    "average_actions",
    "purchases",
    "average_spend",
)
ROW_LABELS = {
    "search": "search",
    "click_product": "click_product",
    "click_filter_option": "click_filter_option",
    "purchase": "purchase",
    "stop": "stop",
    "average_actions": "average actions",
    "purchases": "# purchases",
    "average_spend": "average spend",
}
FAILURE_KINDS: tuple[str, ...] = (*OUTCOME_KINDS, "abandoned")


class DegenerateVarianceError(ValueError):
    """Both samples have zero variance but different means"""


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ArmSummary(_Frozen):
    arm: str
    n_sessions: int = Field(ge=1)
    mean_actions: dict[ActionKind, float]
    mean_total_actions: float
    total_purchases: int = Field(ge=0)
    conversion_rate: float = Field(ge=0, le=1)
    mean_spend: float = Field(ge=0)
    # None when no session in the arm converted
    mean_spend_converting: float | None = None
    mean_steps: float = Field(ge=0)
    abandoned: int = Field(default=0, ge=0)
    outcome_rates: dict[str, float]

    def row(self, metric: str) -> float:
        if metric in ACTION_KINDS:
            return self.mean_actions[metric]  # type: ignore[index]
        return {
            "average_actions": self.mean_total_actions,
            "purchases": float(self.total_purchases),
            "average_spend": self.mean_spend,
        }[metric]


class Effect(_Frozen):
    absolute: float
    relative: float | None
    standardized: float
    standardized_kind: Literal["cohen_d", "cohen_h"]


class TestResult(_Frozen):
    __test__ = False

    test_kind: TestKind
    statistic: float
    df: float = Field(gt=0)
    p_value: float = Field(ge=0, le=1)
    effect: Effect
    metric: str = ""


class Contrast(_Frozen):
    treatment: str
    control: str
    tests: tuple[TestResult, ...]
    # metric -> why no test was run
    skipped: dict[str, str] = {}


class BaselineSummary(_Frozen):
    """Published aggregates for comparison only; there is no raw data behind them"""

    label: str
    values: dict[str, float | None]
    provenance: str = ""

    @model_validator(mode="after")
    def _known_metrics(self) -> "BaselineSummary":
        unknown = set(self.values) - set(METRIC_ROWS)
        if unknown:
            raise ValueError(f"Unknown baseline metrics: {', '.join(sorted(unknown))}")
        return self


class Stratum(_Frozen):
    label: str
    n_sessions: int
    summaries: tuple[ArmSummary, ...]
    # None when some arm has fewer than two sessions
    contrasts: tuple[Contrast, ...] | None


class Stratification(_Frozen):
    attribute: str
    cut_points: tuple[float, ...] = ()
    strata: tuple[Stratum, ...]


def load_baseline(path: Path) -> BaselineSummary:
    return BaselineSummary.model_validate_json(path.read_text(encoding="utf-8"))


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def summarize(traces: Sequence[SessionTrace], arm: str, abandoned: int = 0) -> ArmSummary:
    """Aggregate the traces belonging to one arm"""
    own = [t for t in traces if t.arm == arm]
    if not own:
        raise ValueError(f"No sessions recorded for arm {arm!r}")
    n = len(own)
    spends = [t.spend for t in own]
    converting = [t.spend for t in own if t.outcome.converted]
    outcomes = Counter(t.outcome.kind for t in own)
    attempted = n + abandoned
    rates = {kind: outcomes.get(kind, 0) / attempted for kind in OUTCOME_KINDS}
    rates["abandoned"] = abandoned / attempted
    return ArmSummary(
        arm=arm,
        n_sessions=n,
        mean_actions={kind: _mean([t.totals.get(kind, 0) for t in own]) for kind in ACTION_KINDS},
        mean_total_actions=_mean([t.total_actions for t in own]),
        total_purchases=sum(t.outcome.purchases for t in own),
        conversion_rate=len(converting) / n,
        mean_spend=_mean(spends),
        mean_spend_converting=_mean(converting) if converting else None,
        mean_steps=_mean([len(t.steps) for t in own]),
        abandoned=abandoned,
        outcome_rates=rates,
    )


def t_p_value(t: float, df: float) -> float:
    """Two-sided p-value of Student's t via the regularized incomplete beta"""
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return min(1.0, max(0.0, p))


def chi_square_p_value(statistic: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom"""
    p = float(special.gammaincc(0.5, statistic / 2))
    return min(1.0, max(0.0, p))


def _relative(difference: float, reference: float) -> float | None:
    return difference / reference if reference != 0 else None


def two_sample_t(
    a: Sequence[float], b: Sequence[float], mode: TMode = "pooled"
) -> TestResult:
    """
    Compare the means of two independent samples.

    ``pooled`` assumes a common variance (df = n_a + n_b - 2); ``welch`` uses
    separate variances with the Welch-Satterthwaite degrees of freedom. The
    effect is reported as a minus b.
    """
    x, y = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n_a, n_b = len(x), len(y)
    if n_a < 2 or n_b < 2:
        raise ValueError("A t-test needs at least two values in each sample")
    mean_a, mean_b = float(x.mean()), float(y.mean())
    var_a, var_b = float(np.var(x, ddof=1)), float(np.var(y, ddof=1))
    difference = mean_a - mean_b
    pooled_df = n_a + n_b - 2
    pooled_var = ((n_a - 1) * var_a + (n_b - 1) * var_b) / pooled_df

    if mode == "pooled":
        se = math.sqrt(pooled_var * (1 / n_a + 1 / n_b))
        df = float(pooled_df)
    elif mode == "welch":
        se = math.sqrt(var_a / n_a + var_b / n_b)
        if se > 0:
            df = se**4 / (
                (var_a / n_a) ** 2 / (n_a - 1) + (var_b / n_b) ** 2 / (n_b - 1)
            )
        else:
            df = float(pooled_df)
    else:
        raise ValueError(f"Unknown t-test mode: {mode}")

    if se == 0:
        if difference != 0:
            raise DegenerateVarianceError("degenerate variance")
        t, p, d = 0.0, 1.0, 0.0
    else:
        t = difference / se
        p = t_p_value(t, df)
        d = difference / math.sqrt(pooled_var) if pooled_var > 0 else 0.0

    return TestResult(
        test_kind="pooled_t" if mode == "pooled" else "welch_t",
        statistic=t,
        df=df,
        p_value=p,
        effect=Effect(
            absolute=difference,
            relative=_relative(difference, mean_b),
            standardized=d,
            standardized_kind="cohen_d",
        ),
    )


def chi_square_2x2(a_success: int, a_fail: int, b_success: int, b_fail: int) -> TestResult:
    """
    Pearson chi-square on a 2x2 table, rows a and b, without continuity
    correction. The effect is the difference in success rates, a minus b.
    """
    cells = (a_success, a_fail, b_success, b_fail)
    if any(c < 0 for c in cells):
        raise ValueError("Counts must not be negative")
    row_a, row_b = a_success + a_fail, b_success + b_fail
    col_s, col_f = a_success + b_success, a_fail + b_fail
    if 0 in (row_a, row_b, col_s, col_f):
        raise ValueError("A 2x2 table with a zero row or column total cannot be tested")
    n = row_a + row_b
    statistic = n * (a_success * b_fail - a_fail * b_success) ** 2 / (row_a * row_b * col_s * col_f)
    rate_a, rate_b = a_success / row_a, b_success / row_b
    h = 2 * math.asin(math.sqrt(rate_a)) - 2 * math.asin(math.sqrt(rate_b))
    return TestResult(
        test_kind="chi_square_2x2",
        statistic=float(statistic),
        df=1.0,
        p_value=chi_square_p_value(statistic),
        effect=Effect(
            absolute=rate_a - rate_b,
            relative=_relative(rate_a - rate_b, rate_b),
            standardized=h,
            standardized_kind="cohen_h",
        ),
    )


def contrast(
    traces: Sequence[SessionTrace], treatment: str, control: str, mode: TMode = "pooled"
) -> Contrast:
    """Test every reported metric of treatment against control"""
    arm_t = [t for t in traces if t.arm == treatment]
    arm_c = [t for t in traces if t.arm == control]
    tests: list[TestResult] = []
    skipped: dict[str, str] = {}
    samples: dict[str, tuple[list[float], list[float]]] = {
        kind: ([t.totals.get(kind, 0) for t in arm_t], [t.totals.get(kind, 0) for t in arm_c])
        for kind in ACTION_KINDS
    }
    samples["total_actions"] = ([t.total_actions for t in arm_t], [t.total_actions for t in arm_c])
    samples["spend"] = ([t.spend for t in arm_t], [t.spend for t in arm_c])
    for metric, (a, b) in samples.items():
        try:
            tests.append(two_sample_t(a, b, mode).model_copy(update={"metric": metric}))
        except ValueError as e:
            logger.debug(f"No {metric} test for {treatment} vs {control}: {e}")
            skipped[metric] = str(e)

    converted_t = sum(t.outcome.converted for t in arm_t)
    converted_c = sum(t.outcome.converted for t in arm_c)
    try:
        result = chi_square_2x2(
            converted_t, len(arm_t) - converted_t, converted_c, len(arm_c) - converted_c
        )
        tests.append(result.model_copy(update={"metric": "conversion"}))
    except ValueError as e:
        skipped["conversion"] = str(e)
    return Contrast(treatment=treatment, control=control, tests=tuple(tests), skipped=skipped)


def contrasts(
    traces: Sequence[SessionTrace], arms: Sequence[str], mode: TMode = "pooled"
) -> tuple[Contrast, ...]:
    """Every arm after the first against the first, which is the control"""
    return tuple(contrast(traces, arm, arms[0], mode) for arm in arms[1:])


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _bucket_labels(attribute: str, cuts: Sequence[float]) -> list[str]:
    labels = [f"{attribute} < {cuts[0]:g}"]
    labels += [f"{lo:g} ≤ {attribute} < {hi:g}" for lo, hi in zip(cuts, cuts[1:])]
    labels.append(f"{attribute} ≥ {cuts[-1]:g}")
    return labels


def stratify(
    traces: Sequence[SessionTrace],
    personas: Mapping[str, Persona],
    attribute: str,
    cut_points: Sequence[float] | None = None,
    arms: Sequence[str] | None = None,
    mode: TMode = "pooled",
) -> Stratification:
    """
    Split sessions by one persona attribute and analyse each stratum.

    Numeric attributes are bucketed at the given cut points, or at the
    median when none are given. Strata where some arm has fewer than two
    sessions carry summaries only.
    """
    values = {}
    for t in traces:
        if t.persona_id not in personas:
            raise ValueError(f"Trace {t.session_id} refers to unknown persona {t.persona_id}")
        demographics = personas[t.persona_id].demographics
        if attribute not in demographics:
            raise ValueError(f"Unknown attribute {attribute!r}")
        values[t.session_id] = demographics[attribute]
    if arms is None:
        arms = sorted({t.arm for t in traces})

    numeric = bool(values) and all(_is_number(v) for v in values.values())
    cuts: tuple[float, ...] = ()
    if numeric:
        cuts = tuple(sorted(cut_points)) if cut_points else (float(np.median(list(values.values()))),)
        labels = _bucket_labels(attribute, cuts)
        key = {sid: labels[int(np.searchsorted(cuts, v, side="right"))] for sid, v in values.items()}
        order = labels
    else:
        key = {sid: str(v) for sid, v in values.items()}
        order = sorted(set(key.values()))

    strata = []
    for label in order:
        members = [t for t in traces if key[t.session_id] == label]
        if not members:
            continue
        present = [arm for arm in arms if any(t.arm == arm for t in members)]
        summaries = tuple(summarize(members, arm) for arm in present)
        testable = len(present) == len(arms) and all(s.n_sessions >= 2 for s in summaries)
        strata.append(
            Stratum(
                label=label,
                n_sessions=len(members),
                summaries=summaries,
                contrasts=contrasts(members, arms, mode) if testable else None,
            )
        )
    return Stratification(attribute=attribute, cut_points=cuts, strata=tuple(strata))


class Report(_Frozen):
    arms: tuple[ArmSummary, ...]
    baseline: BaselineSummary | None = None
    contrasts: tuple[Contrast, ...]
    strata: tuple[Stratification, ...] = ()


def _fmt(metric: str, value: float | None) -> str:
    if value is None:
        return "-"
    if metric == "purchases":
        return f"{value:.0f}"
    if metric == "average_spend":
        return f"${value:.2f}"
    return f"{value:.2f}"


def _fmt_effect(result: TestResult) -> str:
    effect = result.effect
    relative = f" ({effect.relative:+.1%})" if effect.relative is not None else ""
    symbol = "d" if effect.standardized_kind == "cohen_d" else "h"
    return f"diff {effect.absolute:+.4f}{relative}  {symbol} = {effect.standardized:+.3f}"


def _fmt_test(result: TestResult) -> str:
    if result.test_kind == "chi_square_2x2":
        stat = f"χ²({result.df:g}) = {result.statistic:.4f}"
    else:
        stat = f"t({result.df:.4g}) = {result.statistic:.4f}"
    return f"{result.metric:<20} {result.test_kind:<15} {stat:<22} p = {result.p_value:.4f}  {_fmt_effect(result)}"


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = []
    for row in [header, *rows]:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return lines


def _render_text(report: Report) -> str:
    summaries, baseline = report.arms, report.baseline
    header = ["metric (per session)"]
    if baseline is not None:
        header.append(baseline.label)
    header += [f"{s.arm} (n={s.n_sessions})" for s in summaries]
    rows = []
    for metric in METRIC_ROWS:
        row = [ROW_LABELS[metric]]
        if baseline is not None:
            row.append(_fmt(metric, baseline.values.get(metric)))
        row += [_fmt(metric, s.row(metric)) for s in summaries]
        rows.append(row)

    lines = ["A/B test report", "", *_table(header, rows), ""]
    lines.append(
        "spend per converting session: "
        + ", ".join(f"{s.arm} {_fmt('average_spend', s.mean_spend_converting)}" for s in summaries)
    )
    lines.append("conversion rate: " + ", ".join(f"{s.arm} {s.conversion_rate:.3f}" for s in summaries))
    lines.append("mean steps: " + ", ".join(f"{s.arm} {s.mean_steps:.2f}" for s in summaries))
    if baseline is not None and baseline.provenance:
        lines.append(f"baseline: {baseline.provenance}")

    for c in report.contrasts:
        lines += ["", f"Tests: {c.treatment} vs {c.control}"]
        lines += [f"  {_fmt_test(result)}" for result in c.tests]
        lines += [f"  {metric:<20} not tested: {reason}" for metric, reason in c.skipped.items()]

    lines += ["", "Session outcomes"]
    outcome_rows = [
        [kind] + [f"{s.outcome_rates.get(kind, 0.0):.1%}" for s in summaries]
        for kind in FAILURE_KINDS
    ]
    lines += [f"  {line}" for line in _table(["outcome", *(s.arm for s in summaries)], outcome_rows)]

    for stratification in report.strata:
        cuts = f" (cut at {', '.join(f'{c:g}' for c in stratification.cut_points)})" if stratification.cut_points else ""
        lines += ["", f"Strata by {stratification.attribute}{cuts}"]
        for stratum in stratification.strata:
            arms = ", ".join(
                f"{s.arm} n={s.n_sessions} actions={s.mean_total_actions:.2f} conversion={s.conversion_rate:.3f}"
                for s in stratum.summaries
            )
            lines.append(f"  {stratum.label}: {arms}")
            if stratum.contrasts is None:
                lines.append("    tests suppressed: fewer than two sessions in an arm")
                continue
            for c in stratum.contrasts:
                for result in c.tests:
                    if result.metric in ("total_actions", "conversion"):
                        lines.append(f"    {c.treatment} vs {c.control}: {_fmt_test(result)}")
    return "\n".join(lines) + "\n"


def render_report(
    summaries: Sequence[ArmSummary],
    tests: Sequence[Contrast],
    baseline: BaselineSummary | None = None,
    format: Literal["text", "json"] = "text",
    strata: Sequence[Stratification] = (),
) -> str:
    """Render the comparison table, tests, outcomes and strata"""
    if len(summaries) < 2:
        raise ValueError("A report compares at least two arms")
    report = Report(
        arms=tuple(summaries), baseline=baseline, contrasts=tuple(tests), strata=tuple(strata)
    )
    if format == "json":
        return json.dumps(report.model_dump(mode="json"), indent=2, ensure_ascii=False) + "\n"
    if format == "text":
        return _render_text(report)
    raise ValueError(f"Unknown report format: {format}")


def analyze(
    traces: Sequence[SessionTrace],
    arms: Sequence[str],
    *,
    abandoned: Mapping[str, int] | None = None,
    personas: Mapping[str, Persona] | None = None,
    stratify_by: Sequence[str] = (),
    cut_points: Mapping[str, Sequence[float]] | None = None,
    mode: TMode = "pooled",
) -> tuple[list[ArmSummary], tuple[Contrast, ...], list[Stratification]]:
    """Summaries, contrasts and strata for a finished run"""
    abandoned = abandoned or {}
    cut_points = cut_points or {}
    summaries = [summarize(traces, arm, abandoned.get(arm, 0)) for arm in arms]
    tests = contrasts(traces, arms, mode)
    strata = []
    for attribute in stratify_by:
        if personas is None:
            raise ValueError("Stratified analysis needs the persona pool")
        logger.debug(f"Stratifying by {BOLD}{attribute}{NC}")
        strata.append(
            stratify(traces, personas, attribute, cut_points.get(attribute), arms, mode)
        )
    return summaries, tests, strata
