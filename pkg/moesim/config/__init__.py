"""
Scenario configuration for moesim.

Modules:
    schemas: Pydantic scenario schema and loader
    settings: Environment-backed runtime settings
    scenario_builder: Scenario -> simulation inputs
"""

from moesim.config.schemas import ScenarioConfig, load_scenario, parse_scenario
from moesim.config.settings import RuntimeSettings

__all__ = ["ScenarioConfig", "load_scenario", "parse_scenario", "RuntimeSettings"]
