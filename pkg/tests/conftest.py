"""Shared fixtures: each bundled scenario is executed at most once per test
session and the (config, world, trace, report) tuple is cached for reuse."""
from dataclasses import dataclass

import pytest

from overchain.cli import bundled_scenarios
from overchain.config import ScenarioConfig, load_scenario
from overchain.report import ScenarioReport, build_report
from overchain.world import World, run_scenario


@dataclass
class ScenarioRun:
    config: ScenarioConfig
    world: World
    trace_text: str
    report: ScenarioReport

    @property
    def metrics(self) -> dict:
        return self.report.metrics


@pytest.fixture(scope="session")
def bundled():
    """Lazy cache: `bundled(name)` runs a bundled scenario once and memoizes."""
    paths = bundled_scenarios()
    cache: dict[str, ScenarioRun] = {}

    def get(name: str) -> ScenarioRun:
        if name not in cache:
            config = load_scenario(paths[name])
            world = run_scenario(config)
            trace_text = world.engine.trace.text()
            cache[name] = ScenarioRun(config, world, trace_text,
                                      build_report(trace_text, config))
        return cache[name]

    get.names = tuple(paths)
    return get
