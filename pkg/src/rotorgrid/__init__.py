"""Fault-tolerant allocation, planning, and simulation for modular multirotor assemblies."""

from .assembly import (
    AssemblyLayout,
    InertialModel,
    RotorSpec,
    TauPM,
    UnitSpec,
    assembly_inertia,
    build_assembly,
    cross_unit,
    efficiency_matrix,
    tau_pm,
)
from .fault import (
    FaultState,
    WrenchLoss,
    healthy_state,
    mark_unit_failed,
    set_rotor_eta,
    wrench_loss,
)
from .allocation import (
    AllocationInfeasible,
    AllocationResult,
    MixingMatrix,
    WrenchCommand,
    allocate_nominal,
    full_realloc,
    partial_realloc,
    rotor_mix,
    solve_unit_failure,
)

__all__ = [
    "AssemblyLayout",
    "InertialModel",
    "RotorSpec",
    "TauPM",
    "UnitSpec",
    "assembly_inertia",
    "build_assembly",
    "cross_unit",
    "efficiency_matrix",
    "tau_pm",
    "FaultState",
    "WrenchLoss",
    "healthy_state",
    "mark_unit_failed",
    "set_rotor_eta",
    "wrench_loss",
    "AllocationInfeasible",
    "AllocationResult",
    "MixingMatrix",
    "WrenchCommand",
    "allocate_nominal",
    "full_realloc",
    "partial_realloc",
    "rotor_mix",
    "solve_unit_failure",
]
