"""Data-assisted control simulation workbench."""
from .airframe import Airframe, DamageCase, ExtraTermSpec, InertialParams, RegressorSet
from .scenario import ConfigError, RunRecord, SimulationAbort, load_scenario, run

__all__ = [
    "Airframe",
    "ConfigError",
    "DamageCase",
    "ExtraTermSpec",
    "InertialParams",
    "RegressorSet",
    "RunRecord",
    "SimulationAbort",
    "load_scenario",
    "run",
]
__version__ = "0.1.0"
