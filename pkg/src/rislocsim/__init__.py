"""Simulation and estimation toolkit for panel-aided joint 3D position,
velocity, and clock estimation from multi-snapshot single-link pilots."""

__version__ = "0.1.0"

from .geometry import (
    AnchorSet,
    ChannelParams,
    EpochSchedule,
    UEState,
    propagate_state,
    true_channel_params,
    unit_frame,
)
from .signal import (
    OfdmConfig,
    PathGains,
    ReceivedSnapshot,
    RisConfig,
    design_ris_profile,
    snr_of,
    synthesize_all,
    synthesize_snapshot,
)
from .tensor import CpdFactors, Tensor3, als_refine, reshape_to_tensor, vscpd
from .chanest import ChannelEstimate, estimate_channel, refine_channel
from .stateest import MeasurementSet, StateEstimate, solve_state
from .crlb import FimReport, evaluate_bounds, rank_analysis
from .config import ExperimentConfig, Scenario, build_scenario

__all__ = [
    "AnchorSet", "ChannelParams", "EpochSchedule", "UEState",
    "propagate_state", "true_channel_params", "unit_frame",
    "OfdmConfig", "PathGains", "ReceivedSnapshot", "RisConfig",
    "design_ris_profile", "snr_of", "synthesize_all", "synthesize_snapshot",
    "CpdFactors", "Tensor3", "als_refine", "reshape_to_tensor", "vscpd",
    "ChannelEstimate", "estimate_channel", "refine_channel",
    "MeasurementSet", "StateEstimate", "solve_state",
    "FimReport", "evaluate_bounds", "rank_analysis",
    "ExperimentConfig", "Scenario", "build_scenario",
]
