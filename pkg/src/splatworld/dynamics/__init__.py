"""Rigid-body dynamics: bodies, contacts and a deterministic stepper."""

from .collision import Contact, hull_contact, separation
from .world import (
    DEFAULT_DT,
    GRAVITY,
    KinematicBody,
    ObjectAsset,
    PhysicalParams,
    PoseDelta,
    RigidBodyState,
    SettleResult,
    SolverConfig,
    WorldState,
    mass_properties,
    settle,
    step,
    sync_splats,
)

__all__ = [
    "Contact", "hull_contact", "separation", "DEFAULT_DT", "GRAVITY", "KinematicBody", "ObjectAsset",
    "PhysicalParams", "PoseDelta", "RigidBodyState", "SettleResult", "SolverConfig", "WorldState",
    "mass_properties", "settle", "step", "sync_splats",
]
