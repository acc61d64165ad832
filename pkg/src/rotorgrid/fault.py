"""Unit failures, rotor degradations, and the wrench they cost.

A degraded rotor delivers ``eta * commanded`` thrust, with its yaw torque
scaling identically. A failed unit stays docked as dead load: mass and
inertia remain, thrust is gone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import N_ROTORS, AssemblyLayout, _readonly, rotor_table


@dataclass(frozen=True, eq=False)
class FaultState:
    """Immutable per-unit fault status. Transitions return new states."""

    failed: tuple[bool, ...]
    eta: np.ndarray  # (n, 4) per-rotor efficiency in [0, 1]

    def __post_init__(self) -> None:
        eta = np.asarray(self.eta, dtype=float)
        if eta.shape != (len(self.failed), N_ROTORS):
            raise ValueError(f"eta shape {eta.shape} does not match unit count")
        if np.any(eta < 0.0) or np.any(eta > 1.0):
            raise ValueError("eta must lie within [0, 1]")
        for i, dead in enumerate(self.failed):
            if dead and np.any(eta[i] != 0.0):
                raise ValueError(f"failed unit {i} must have all eta = 0")
        object.__setattr__(self, "eta", _readonly(eta))

    @property
    def n(self) -> int:
        return len(self.failed)

    def any_fault(self) -> bool:
        return any(self.failed) or bool(np.any(self.eta < 1.0))

    def faulty_units(self) -> np.ndarray:
        """Indices of units that are failed or carry any degraded rotor."""
        return np.flatnonzero(
            np.array(self.failed) | np.any(self.eta < 1.0, axis=1)
        )

    def flat_eta(self) -> np.ndarray:
        return self.eta.reshape(-1)


def healthy_state(n: int) -> FaultState:
    return FaultState(failed=(False,) * n, eta=np.ones((n, N_ROTORS)))


def mark_unit_failed(faults: FaultState, unit: int) -> FaultState:
    """Return a state with the given unit fully failed (idempotent)."""
    if not 0 <= unit < faults.n:
        raise IndexError(f"unit index {unit} out of range for {faults.n} units")
    failed = list(faults.failed)
    failed[unit] = True
    eta = np.array(faults.eta)
    eta[unit] = 0.0
    return FaultState(failed=tuple(failed), eta=eta)


def set_rotor_eta(faults: FaultState, unit: int, rotor: int, eta: float) -> FaultState:
    """Return a state with one rotor's efficiency updated.

    Setting a positive eta on a failed unit re-enables it.
    """
    if not 0 <= unit < faults.n:
        raise IndexError(f"unit index {unit} out of range for {faults.n} units")
    if not 0 <= rotor < N_ROTORS:
        raise IndexError(f"rotor index {rotor} out of range")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie within [0, 1], got {eta}")
    new_eta = np.array(faults.eta)
    new_eta[unit, rotor] = eta
    failed = list(faults.failed)
    if eta > 0.0:
        failed[unit] = False
    return FaultState(failed=tuple(failed), eta=new_eta)


@dataclass(frozen=True, eq=False)
class WrenchLoss:
    """Thrust and body-moment deltas caused by faults (after minus before)."""

    d_force: float  # [N] <= 0 under any degradation
    d_moment: np.ndarray  # [N m] (3,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "d_moment", _readonly(self.d_moment))


def wrench_loss(
    layout: AssemblyLayout, faults: FaultState, nominal_thrusts: np.ndarray
) -> WrenchLoss:
    """Wrench lost when nominal per-rotor commands meet degraded rotors.

    Each rotor contributes ``(eta - 1) * f_nominal`` of thrust at its absolute
    position, with the matching lever moments and spin-signed yaw term.
    """
    f_nom = np.asarray(nominal_thrusts, dtype=float)
    if f_nom.shape != (layout.n, N_ROTORS):
        raise ValueError(
            f"nominal thrusts must be ({layout.n}, {N_ROTORS}), got {f_nom.shape}"
        )
    if np.any(f_nom < 0.0):
        raise ValueError("nominal thrusts must be nonnegative")
    if faults.n != layout.n:
        raise ValueError("fault state does not match layout")
    table = rotor_table(layout)
    delta = (faults.flat_eta() - 1.0) * f_nom.reshape(-1)
    d_force = float(delta.sum())
    d_moment = np.array(
        [
            float(np.dot(delta, table.position[:, 1])),
            float(-np.dot(delta, table.position[:, 0])),
            float(np.dot(delta, table.spin * table.k_tau)),
        ]
    )
    return WrenchLoss(d_force=d_force, d_moment=d_moment)
