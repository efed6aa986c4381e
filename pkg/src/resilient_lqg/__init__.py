"""Attack-resilient LQG reference tracking with barrier-certified safety
and reachability guarantees under unknown false-data-injection sensor
attacks."""

__version__ = "0.1.0"

from .model import (AttackPatternSet, Reference, Region, ScenarioConfig,
                    SystemModel, ValidatedScenario, case_study_config,
                    load_scenario, save_scenario, validate_scenario)

__all__ = [
    "AttackPatternSet", "Reference", "Region", "ScenarioConfig",
    "SystemModel", "ValidatedScenario", "case_study_config",
    "load_scenario", "save_scenario", "validate_scenario",
]
