from .report import Report, ScenarioReport
from .scenarios import DEFAULT_SCENARIOS, SCENARIO_ORDER, Credentials, Scenario, run_all, run_scenario
from .targets import HttpTarget, InProcessTarget, SimClock, TargetUnreachable, WallClock

__all__ = [
    "Credentials",
    "DEFAULT_SCENARIOS",
    "HttpTarget",
    "InProcessTarget",
    "Report",
    "SCENARIO_ORDER",
    "Scenario",
    "ScenarioReport",
    "SimClock",
    "TargetUnreachable",
    "WallClock",
    "run_all",
    "run_scenario",
]
