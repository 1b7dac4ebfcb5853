import json
from pathlib import Path

import pytest
import typer
from typer.testing import CliRunner

from agentab.agentab import app
from agentab.agentab_analyze import AnalysisResult, check_abandoned
from agentab.agentab_personas import persona_model
from agentab.config import data_path
from agentab.experiment import Seeds, load_experiment, load_for_command
from agentab.model_client import HttpModelClient, ModelConfig
from agentab.orchestrator import load_manifest
from agentab.persona import TemplateNarrator

runner = CliRunner()

ARTIFACTS = ("personas.json", "allocation.json", "manifest.json", "report.txt", "report.json", "sessions.csv")


def demo_config(tmp_path: Path, **changes) -> Path:
    raw = json.loads(data_path("demo_config.json").read_text())
    raw["analysis"]["baseline"] = str(data_path("baseline_human.json"))
    raw.update(changes)
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(raw))
    return path


def test_help_lists_stages_in_order():
    result = runner.invoke(app, ["-h"])
    assert result.exit_code == 0
    positions = [result.stdout.index(name) for name in ("personas", "allocate", "run", "analyze", "pipeline")]
    assert positions == sorted(positions)


def test_demo_pipeline(tmp_path):
    output = tmp_path / "demo"
    result = runner.invoke(app, ["pipeline", "-o", str(output)])
    assert result.exit_code == 0, result.output
    assert result.stdout.strip().splitlines()[-1] == str(output / "report.txt")
    for name in ARTIFACTS:
        assert (output / name).is_file(), name
    assert len(list((output / "traces").glob("*.json"))) == 100

    manifest = load_manifest(output)
    assert sum(sum(c.values()) for c in manifest.counts.values()) == 100
    report = (output / "report.txt").read_text()
    assert report.startswith("A/B test report")
    assert "Human, N=1M" in report
    assert "Strata by gender" in report
    assert "Strata by age" in report
    assert [a["arm"] for a in json.loads((output / "report.json").read_text())["arms"]] == ["control", "treatment"]


def test_stages_reproduce_the_pipeline(tmp_path):
    config = demo_config(tmp_path)
    staged, piped = tmp_path / "staged", tmp_path / "piped"
    for stage in ("personas", "allocate", "run", "analyze"):
        result = runner.invoke(app, [stage, str(config), "-o", str(staged)])
        assert result.exit_code == 0, (stage, result.output)
    result = runner.invoke(app, ["pipeline", str(config), "-o", str(piped), "-j", "1"])
    assert result.exit_code == 0, result.output
    assert (staged / "report.json").read_bytes() == (piped / "report.json").read_bytes()
    assert (staged / "allocation.json").read_bytes() == (piped / "allocation.json").read_bytes()


def test_run_needs_an_allocation(tmp_path):
    config = demo_config(tmp_path)
    assert runner.invoke(app, ["personas", str(config), "-o", str(tmp_path / "out")]).exit_code == 0
    result = runner.invoke(app, ["run", str(config), "-o", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "agentab allocate" in result.output


def test_analyze_needs_a_run(tmp_path):
    result = runner.invoke(app, ["analyze", str(demo_config(tmp_path)), "-o", str(tmp_path / "out")])
    assert result.exit_code == 1


def test_invalid_config(tmp_path):
    config = demo_config(
        tmp_path,
        arms=[{"name": "control", "variant_id": "full"}, {"name": "treatment", "variant_id": "tiny"}],
    )
    result = runner.invoke(app, ["personas", str(config)])
    assert result.exit_code == 1
    assert "tiny" in result.output


def test_missing_config(tmp_path):
    result = runner.invoke(app, ["personas", str(tmp_path / "nothing.json")])
    assert result.exit_code == 1


@pytest.mark.parametrize(("abandoned", "fails"), [(5, False), (6, True)])
def test_abandoned_fraction(abandoned, fails):
    config = load_experiment().config
    result = AnalysisResult(Path("report.txt"), abandoned=abandoned, attempted=100)
    if fails:
        with pytest.raises(typer.Exit) as e:
            check_abandoned(config, result)
        assert e.value.exit_code == 3
    else:
        check_abandoned(config, result)


def test_persona_model_is_closed():
    config = load_experiment().config
    live = config.model_copy(update={"model": ModelConfig(endpoint="http://model.test/v1", model_name="m")})
    with persona_model(live) as model:
        assert isinstance(model, HttpModelClient)
    assert model._http.is_closed
    with persona_model(config) as model:
        assert isinstance(model, TemplateNarrator)


def test_seed_overrides(tmp_path):
    config = demo_config(tmp_path)
    loaded = load_for_command(config, seeds={"sample": 5, "run": None})
    assert loaded.config.seeds == Seeds(personas=7, sample=5, allocation=2024, run=42)

    default, seeded = tmp_path / "default", tmp_path / "seeded"
    assert runner.invoke(app, ["personas", str(config), "-o", str(default)]).exit_code == 0
    result = runner.invoke(app, ["personas", str(config), "-o", str(seeded), "--persona-seed", "8"])
    assert result.exit_code == 0, result.output
    assert (default / "personas.json").read_bytes() != (seeded / "personas.json").read_bytes()

    result = runner.invoke(app, ["allocate", str(config), "-o", str(seeded), "--allocation-seed", "99"])
    assert result.exit_code == 0, result.output
    record = json.loads((seeded / "allocation.json").read_text())
    assert record["seed"] == 99 + record["attempt"] - 1
