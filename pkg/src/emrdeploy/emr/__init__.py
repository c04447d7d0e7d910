"""Simulated EMR: generative world, warehouse export, transactional HTTP API."""

from .world import (
    ClinicalEvent,
    DiagnosticOrder,
    DriftConfig,
    InvalidConfig,
    LabResult,
    PatientRecord,
    World,
    WorldConfig,
    generate_world,
)

__all__ = [
    "ClinicalEvent",
    "DiagnosticOrder",
    "DriftConfig",
    "InvalidConfig",
    "LabResult",
    "PatientRecord",
    "World",
    "WorldConfig",
    "generate_world",
]
