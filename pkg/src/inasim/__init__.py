"""Packet-level simulator for in-network gradient aggregation with preemptive
switch-memory allocation."""
from .core import Packet, PacketHeader, PacketKind, Payload, is_complete, payload_add
from .experiment import (
    ConfigError,
    RunReport,
    ScenarioConfig,
    build_scenario,
    config_from_dict,
    export_trace,
    load_config,
    run_matrix,
    run_scenario,
)
from .netsim import LivenessError, Simulator
from .priority import JobProfile, QuantScale, compute_priority, downgrade, quantize_priority
from .switchd import ALWAYS_PREEMPT, ATP, ESA, SWITCHML, AllocationPolicy, SwitchState, coin_flip

__version__ = "0.1.0"

__all__ = [
    "Packet", "PacketHeader", "PacketKind", "Payload", "is_complete", "payload_add",
    "ConfigError", "RunReport", "ScenarioConfig", "build_scenario", "config_from_dict",
    "export_trace", "load_config", "run_matrix", "run_scenario", "LivenessError", "Simulator",
    "JobProfile", "QuantScale", "compute_priority", "downgrade", "quantize_priority",
    "ALWAYS_PREEMPT", "ATP", "ESA", "SWITCHML", "AllocationPolicy", "SwitchState", "coin_flip",
]
