"""Slot-level 5G cell simulator with subflow-aware prioritization of video calls."""

from .controller import Action, Controller, ControllerParams, qoe_gain
from .packets import Direction, Priority, SimPacket, SubflowKind
from .ran import Cell, CellConfig, ConfigError
from .scenarios import RunReport, ScenarioConfig, load_preset, run, sweep

__all__ = [
    "Action",
    "Cell",
    "CellConfig",
    "ConfigError",
    "Controller",
    "ControllerParams",
    "Direction",
    "Priority",
    "RunReport",
    "ScenarioConfig",
    "SimPacket",
    "SubflowKind",
    "load_preset",
    "qoe_gain",
    "run",
    "sweep",
]
