import io
import json
import threading

import pytest
from pydantic import ValidationError
from scipy import stats

from agentab.agent import SessionLimits
from agentab.allocation import Arm, allocate
from agentab.analysis import contrast
from agentab.mock_shop import MockShopSession, VariantConfig
from agentab.orchestrator import (
    MANIFEST_NAME,
    TRACES_DIR,
    ExperimentPlan,
    MockShopBackend,
    ProgressTracker,
    ScriptedModel,
    load_manifest,
    plan_jobs,
    run_experiment,
)
from agentab.persona import TemplateNarrator, generate_personas
from agentab.trace_store import INDEX_NAME, load_traces, trace_digest

from .conftest import buyer_policy, make_spec

ARMS = (Arm(name="control", variant_id="full"), Arm(name="treatment", variant_id="reduced"))
BACKEND = MockShopBackend(
    variants={"full": VariantConfig(), "reduced": VariantConfig(filter_mode="reduced", threshold=0.8)}
)


@pytest.fixture(scope="module")
def pool():
    return generate_personas(make_spec(count=12), TemplateNarrator(), seed=1)


def make_plan(pool, output_dir, **kwargs) -> ExperimentPlan:
    settings = {
        "arms": ARMS,
        "allocation": allocate(pool.personas, ARMS, seed=3),
        "env_backend": BACKEND,
        "model": ScriptedModel(policy=buyer_policy(purchase=0.7)),
        "limits": SessionLimits(max_actions=20, max_wall_time=600, loop_window=3),
        "parallelism": 3,
        "seed": 42,
        "output_dir": output_dir,
    }
    settings.update(kwargs)
    return ExperimentPlan(**settings)


def run(plan, pool, **kwargs):
    kwargs.setdefault("progress_stream", io.StringIO())
    return run_experiment(plan, pool, clock=lambda: 1_700_000_000.0, session_clock=lambda: (lambda: 0.0), **kwargs)


class Crashing(MockShopSession):
    def observe(self):
        raise RuntimeError("worker fell over")


class TestPlan:
    def test_unknown_variant(self, pool, tmp_path):
        arms = (ARMS[0], Arm(name="treatment", variant_id="nope"))
        with pytest.raises(ValidationError, match="nope"):
            make_plan(pool, tmp_path, arms=arms)

    def test_allocation_arms_must_exist(self, pool, tmp_path):
        other = (ARMS[0], Arm(name="other", variant_id="full"))
        with pytest.raises(ValidationError):
            make_plan(pool, tmp_path, arms=other)

    def test_per_arm_names(self, pool, tmp_path):
        model = ScriptedModel(policy=buyer_policy(), per_arm={"bogus": buyer_policy()})
        with pytest.raises(ValidationError, match="bogus"):
            make_plan(pool, tmp_path, model=model)

    def test_jobs(self, pool, tmp_path):
        jobs = plan_jobs(make_plan(pool, tmp_path), pool)
        assert len(jobs) == 12
        assert [j.persona.id for j in jobs] == sorted(j.persona.id for j in jobs)
        assert all(j.session_id == f"{j.arm.name}-{j.persona.id}" for j in jobs)
        assert len({j.seed for j in jobs}) == 12

    def test_jobs_need_pool_members(self, pool, tmp_path):
        with pytest.raises(ValueError):
            plan_jobs(make_plan(pool, tmp_path), pool.subset(pool.personas[:3]))


class TestRun:
    def test_every_session_runs(self, pool, tmp_path):
        stream = io.StringIO()
        manifest = run(make_plan(pool, tmp_path), pool, progress_stream=stream)
        assert manifest.counts == {"control": {"done": 6}, "treatment": {"done": 6}}
        assert manifest.abandoned == 0
        traces = load_traces(tmp_path / TRACES_DIR)
        assert len(traces) == 12
        assert {t.session_id for t in traces} == {s.session_id for s in manifest.sessions.values()}
        assert len((tmp_path / TRACES_DIR / INDEX_NAME).read_text().splitlines()) == 12
        events = [json.loads(line) for line in stream.getvalue().splitlines()]
        assert events[0] == {"event": "start", "parallelism": 3, "sessions": 12}
        assert events[-1] == {"event": "finish", "abandoned": 0}
        assert events[-2]["progress"] == {"pending": 0, "running": 0, "done": 12, "abandoned": 0}
        assert load_manifest(tmp_path) == manifest

    def test_reproducible_across_parallelism(self, pool, tmp_path):
        run(make_plan(pool, tmp_path / "a", parallelism=1), pool)
        run(make_plan(pool, tmp_path / "b", parallelism=4), pool)
        a = load_traces(tmp_path / "a" / TRACES_DIR)
        b = load_traces(tmp_path / "b" / TRACES_DIR)
        assert [trace_digest(t) for t in a] == [trace_digest(t) for t in b]
        assert a == b

    def test_per_arm_policy(self, pool, tmp_path):
        never = buyer_policy(purchase=0.0)
        model = ScriptedModel(policy=buyer_policy(), per_arm={"treatment": never})
        run(make_plan(pool, tmp_path, model=model), pool)
        traces = load_traces(tmp_path / TRACES_DIR)
        assert all(t.outcome.converted for t in traces if t.arm == "control")
        assert not any(t.outcome.converted for t in traces if t.arm == "treatment")

    def test_crash_is_retried(self, pool, tmp_path, catalog):
        crashes = iter([True])
        lock = threading.Lock()

        def env_factory(arm):
            with lock:
                crash = next(crashes, False)
            return (Crashing if crash else MockShopSession)(catalog, BACKEND.variants[arm.variant_id])

        manifest = run(make_plan(pool, tmp_path), pool, env_factory=env_factory)
        statuses = [s.status for s in manifest.sessions.values()]
        assert statuses.count("retried") == 1
        assert statuses.count("done") == 11
        assert len(load_traces(tmp_path / TRACES_DIR)) == 12

    def test_abandoned(self, pool, tmp_path, catalog):
        def env_factory(arm):
            cls = Crashing if arm.name == "treatment" else MockShopSession
            return cls(catalog, BACKEND.variants[arm.variant_id])

        manifest = run(make_plan(pool, tmp_path), pool, env_factory=env_factory)
        assert manifest.abandoned == 6
        assert manifest.counts["treatment"] == {"abandoned": 6}
        abandoned = [s for s in manifest.sessions.values() if s.status == "abandoned"]
        assert all(s.attempts == 2 and "worker fell over" in s.error for s in abandoned)
        assert len(load_traces(tmp_path / TRACES_DIR)) == 6
        assert (tmp_path / MANIFEST_NAME).exists()


def test_progress_tracker():
    tracker = ProgressTracker({"a-1": "a", "a-2": "a", "b-1": "b"})
    tracker.mark("a-1", "running")
    tracker.mark("b-1", "done")
    snapshot = tracker.snapshot()
    assert snapshot.arms["a"].pending == 1
    assert snapshot.arms["a"].running == 1
    assert snapshot.total.done == 1
    assert snapshot.total.total == 3


def test_conversion_calibration(tmp_path):
    pool = generate_personas(make_spec(count=1000), TemplateNarrator(), seed=1)
    model = ScriptedModel(policy=buyer_policy(purchase=0.81), per_arm={"treatment": buyer_policy(purchase=0.83)})
    plan = make_plan(pool, tmp_path, model=model, allocation=allocate(pool.personas, ARMS, seed=3), parallelism=4)
    manifest = run(plan, pool)
    assert manifest.abandoned == 0
    traces = load_traces(tmp_path / TRACES_DIR)
    assert len(traces) == 1000
    assert all(t.outcome.kind == "stopped" for t in traces)

    table = []
    for arm, purchase in (("treatment", 0.83), ("control", 0.81)):
        sessions = [t for t in traces if t.arm == arm]
        assert len(sessions) == 500
        assert sum(t.totals["purchase"] for t in sessions) / 500 == pytest.approx(purchase, abs=0.05)
        converted = sum(t.outcome.converted for t in sessions)
        table.append([converted, 500 - converted])

    conversion = next(t for t in contrast(traces, "treatment", "control").tests if t.metric == "conversion")
    (a, b), (c, d) = table
    by_hand = 1000 * (a * d - b * c) ** 2 / ((a + b) * (c + d) * (a + c) * (b + d))
    assert conversion.statistic == pytest.approx(by_hand, abs=1e-9)
    statistic, p_value, _, _ = stats.chi2_contingency(table, correction=False)
    assert conversion.statistic == pytest.approx(statistic, rel=1e-9)
    assert conversion.p_value == pytest.approx(p_value, rel=1e-6)
