from logging import getLogger
from pathlib import Path
from typing import NamedTuple

import typer

from .agentab_allocate import load_matching_pool
from .analysis import analyze as analyze_traces
from .analysis import render_report
from .experiment import (
    Artifacts,
    ConfigArgument,
    ExperimentConfig,
    OutputOption,
    exit_codes,
    load_config_baseline,
    load_for_command,
)
from .orchestrator import load_manifest
from .trace_store import export_tabular, scan_traces
from .util import BOLD, NC, G, R, Y

logger = getLogger(__name__)


class AnalysisResult(NamedTuple):
    report_path: Path
    abandoned: int
    attempted: int

    @property
    def abandoned_fraction(self) -> float:
        return self.abandoned / self.attempted if self.attempted else 0.0


def make_report(config: ExperimentConfig, base_dir: Path) -> AnalysisResult:
    artifacts = Artifacts(config.output_dir)
    artifacts.require(artifacts.manifest, "run")
    manifest = load_manifest(config.output_dir)
    traces, rejected = scan_traces(artifacts.require(artifacts.traces, "run"))
    if rejected:
        logger.warning(f"Ignoring {Y}{len(rejected)}{NC} invalid trace files")
    if not traces:
        raise RuntimeError(f"No usable traces in {artifacts.traces}")

    settings = config.analysis
    personas = load_matching_pool(config).by_id() if settings.stratify_by else None
    abandoned = {arm: counts.get("abandoned", 0) for arm, counts in manifest.counts.items()}
    summaries, tests, strata = analyze_traces(
        traces,
        config.arm_names,
        abandoned=abandoned,
        personas=personas,
        stratify_by=settings.stratify_by,
        cut_points=settings.cut_points,
        mode=settings.t_mode,
    )
    baseline = load_config_baseline(config, base_dir)
    for format, path in (("text", artifacts.report_text), ("json", artifacts.report_json)):
        path.write_text(
            render_report(summaries, tests, baseline, format=format, strata=strata),
            encoding="utf-8",
        )
    rows = export_tabular(traces, artifacts.sessions_csv)
    logger.info(
        f"Analysed {G}{len(traces)}{NC} sessions; written {BOLD}{artifacts.report_text}{NC}, {BOLD}{artifacts.report_json.name}{NC} and {BOLD}{artifacts.sessions_csv.name}{NC} ({rows} rows)"
    )
    return AnalysisResult(artifacts.report_text, manifest.abandoned, len(manifest.sessions))


def check_abandoned(config: ExperimentConfig, result: AnalysisResult) -> None:
    limit = config.analysis.max_abandoned_fraction
    if result.abandoned_fraction > limit:
        logger.warning(
            f"{R}{result.abandoned}{NC} of {result.attempted} sessions were abandoned ({result.abandoned_fraction:.1%}, above the allowed {limit:.1%})"
        )
        raise typer.Exit(3)


def analyze(
    config: ConfigArgument = None,
    output: OutputOption = None,
):
    """
    Summarise the traces of a run, test treatment against control and write the report.
    """
    with exit_codes():
        loaded = load_for_command(config, output)
        result = make_report(loaded.config, loaded.base_dir)
    print(result.report_path)
    check_abandoned(loaded.config, result)
