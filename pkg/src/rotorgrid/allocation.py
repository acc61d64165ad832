"""Fault-tolerant wrench allocation for modular multirotor assemblies.

Three schemes map a commanded assembly wrench to per-unit thrusts and
per-rotor squared speeds:

* :func:`solve_unit_failure` -- variance-minimizing redistribution of unit
  thrusts for dead-unit faults, solved as an equality + box QP.
* :func:`partial_realloc` -- healthy units absorb the wrench a degraded unit
  loses while the degraded unit keeps its nominal commands frozen.
* :func:`full_realloc` -- two stages: the degraded unit is first rebalanced
  internally within its per-rotor capability, then healthy units compensate
  the residual.

All schemes conserve the commanded wrench exactly while no rotor limit is
active; saturation is clamped and reported, never iterated away.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .assembly import (
    N_ROTORS,
    AssemblyLayout,
    UnitSpec,
    _readonly,
    moment_shares,
    rotor_table,
)
from .fault import FaultState, healthy_state
from .qp import InfeasibleProblem, solve_box_qp


class AllocationInfeasible(RuntimeError):
    """The commanded wrench cannot be met by any admissible allocation."""


_MIX_CACHE: "weakref.WeakKeyDictionary[UnitSpec, MixingMatrix]" = (
    weakref.WeakKeyDictionary()
)


@dataclass(frozen=True, eq=False)
class WrenchCommand:
    """Desired collective thrust and body moments.

    ``moment_pm`` optionally splits the lateral moments into signed parts
    ``[Mx+, Mx-, My+, My-]``; when present the parts must recompose the plain
    moments and carry the expected signs.
    """

    force: float  # [N] collective thrust along body z
    moment: np.ndarray  # [N m] (3,) [Mx, My, Mz]
    moment_pm: np.ndarray | None = None  # [N m] (4,) [Mx+, Mx-, My+, My-]

    def __post_init__(self) -> None:
        if self.force < 0.0:
            raise ValueError("commanded force must be nonnegative")
        m = np.asarray(self.moment, dtype=float)
        if m.shape != (3,):
            raise ValueError("moment must be a 3-vector")
        object.__setattr__(self, "moment", _readonly(m))
        if self.moment_pm is not None:
            pm = np.asarray(self.moment_pm, dtype=float)
            if pm.shape != (4,):
                raise ValueError("moment_pm must be a 4-vector [Mx+, Mx-, My+, My-]")
            if pm[0] < 0.0 or pm[2] < 0.0 or pm[1] > 0.0 or pm[3] > 0.0:
                raise ValueError("moment_pm sign pattern must be [+, -, +, -]")
            tol = 1e-9 * max(1.0, float(np.abs(pm).max()))
            if abs(pm[0] + pm[1] - m[0]) > tol or abs(pm[2] + pm[3] - m[1]) > tol:
                raise ValueError("moment_pm parts must recompose Mx and My")
            object.__setattr__(self, "moment_pm", _readonly(pm))


@dataclass(frozen=True, eq=False)
class AllocationResult:
    """Commanded per-unit thrusts and per-rotor squared speeds."""

    u_a: np.ndarray  # [N] (n,) commanded unit thrusts
    omega_sq: np.ndarray  # [rad^2/s^2] (n, 4) commanded squared rotor speeds
    saturated: bool
    fallback_units: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        omega = np.asarray(self.omega_sq, dtype=float)
        if np.any(omega < 0.0):
            raise ValueError("omega_sq must be nonnegative")
        object.__setattr__(self, "omega_sq", _readonly(omega))
        object.__setattr__(self, "u_a", _readonly(np.asarray(self.u_a, dtype=float)))


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Single-unit map between wrench [F, Mx, My, Mz] and rotor speeds.

    ``p_nr`` converts a unit wrench directly to squared rotor speeds (thrust
    coefficient folded in); its inverse is the standard cross-quad wrench map.
    """

    p_nr: np.ndarray  # (4, 4) wrench -> omega^2
    wrench_map: np.ndarray  # (4, 4) rotor thrusts -> wrench

    @classmethod
    def from_unit(cls, unit: UnitSpec) -> "MixingMatrix":
        cached = _MIX_CACHE.get(unit)
        if cached is not None:
            return cached
        b = unit_wrench_matrix(unit)
        k_f = np.array([r.k_f for r in unit.rotors])
        p_nr = np.linalg.inv(b) / k_f[:, None]
        mix = cls(p_nr=_readonly(p_nr), wrench_map=_readonly(b))
        _MIX_CACHE[unit] = mix
        return mix


def unit_wrench_matrix(unit: UnitSpec) -> np.ndarray:
    """Rows map rotor thrusts to [F, Mx, My, Mz] about the unit center."""
    xs = np.array([r.offset[0] for r in unit.rotors])
    ys = np.array([r.offset[1] for r in unit.rotors])
    spin_k = np.array([r.spin * r.k_tau for r in unit.rotors])
    return np.vstack([np.ones(N_ROTORS), ys, -xs, spin_k])


def rotor_mix(mix: MixingMatrix, unit_wrench: np.ndarray) -> tuple[np.ndarray, bool]:
    """Map one unit's wrench to squared rotor speeds, clamping negatives."""
    w = np.asarray(unit_wrench, dtype=float)
    if w.shape != (4,):
        raise ValueError("unit wrench must be a 4-vector")
    omega_sq = mix.p_nr @ w
    saturated = bool(np.any(omega_sq < -1e-12))
    return np.maximum(omega_sq, 0.0), saturated


def lever_moment(layout: AssemblyLayout, u: np.ndarray) -> np.ndarray:
    """Body moment produced by per-unit thrusts acting at the unit levers."""
    x = layout.positions[:, 0]
    y = layout.positions[:, 1]
    return np.array([float(np.dot(y, u)), float(-np.dot(x, u)), 0.0])


def commanded_wrench(layout: AssemblyLayout, omega_sq: np.ndarray) -> np.ndarray:
    """Wrench the commanded speeds would produce on healthy rotors."""
    table = rotor_table(layout)
    f = table.k_f * np.asarray(omega_sq, dtype=float).reshape(-1)
    return _wrench_of_thrusts(table, f)


def achieved_wrench(
    layout: AssemblyLayout, faults: FaultState, omega_sq: np.ndarray
) -> np.ndarray:
    """Wrench actually produced once rotor efficiencies are applied."""
    table = rotor_table(layout)
    f = faults.flat_eta() * table.k_f * np.asarray(omega_sq, dtype=float).reshape(-1)
    return _wrench_of_thrusts(table, f)


def _wrench_of_thrusts(table, f: np.ndarray) -> np.ndarray:
    return np.array(
        [
            float(f.sum()),
            float(np.dot(table.position[:, 1], f)),
            float(-np.dot(table.position[:, 0], f)),
            float(np.dot(table.spin * table.k_tau, f)),
        ]
    )


def _omega_caps(unit: UnitSpec) -> np.ndarray:
    return np.array([r.f_max / r.k_f for r in unit.rotors])


def _mix_units(
    layout: AssemblyLayout,
    wrenches: dict[int, np.ndarray],
    mix: MixingMatrix,
) -> tuple[np.ndarray, bool]:
    """Mix per-unit wrenches into an (n, 4) omega_sq array with speed caps."""
    omega_sq = np.zeros((layout.n, N_ROTORS))
    caps = _omega_caps(layout.unit)
    saturated = False
    for i, w in wrenches.items():
        raw = mix.p_nr @ w
        clipped = np.clip(raw, 0.0, caps)
        if np.any(np.abs(clipped - raw) > 1e-12):
            saturated = True
        omega_sq[i] = clipped
    return omega_sq, saturated


def _result(layout, omega_sq, saturated, fallback=()) -> AllocationResult:
    k_f = np.array([r.k_f for r in layout.unit.rotors])
    u_a = omega_sq @ k_f
    return AllocationResult(
        u_a=u_a, omega_sq=omega_sq, saturated=saturated, fallback_units=tuple(fallback)
    )


def _unit_caps(layout: AssemblyLayout, faults: FaultState) -> np.ndarray:
    """Maximum deliverable thrust per unit given rotor efficiencies."""
    f_max = np.array([r.f_max for r in layout.unit.rotors])
    return faults.eta @ f_max


def _balanced_caps(layout: AssemblyLayout, faults: FaultState) -> np.ndarray:
    """Thrust each unit can deliver while keeping its own torques balanced.

    Internal balance forces all four rotors to a common level, so the weakest
    rotor pins the whole unit.
    """
    f_max = np.array([r.f_max for r in layout.unit.rotors])
    return 4.0 * np.min(faults.eta * f_max, axis=1)


def _signed_lever_rows(positions: np.ndarray) -> np.ndarray:
    """Rows [min(x,0); min(y,0); max(x,0); max(y,0)] over the given units."""
    x = positions[:, 0]
    y = positions[:, 1]
    return np.vstack(
        [np.minimum(x, 0.0), np.minimum(y, 0.0), np.maximum(x, 0.0), np.maximum(y, 0.0)]
    )


def _thrust_qp(
    layout: AssemblyLayout,
    avail: np.ndarray,
    caps: np.ndarray,
    force: float,
    moment_pm: np.ndarray | None,
) -> np.ndarray:
    """Variance-minimizing unit thrusts over the available units.

    Constraints: zero lever moment about the assembly center, thrust sum, and
    (optionally) the four signed torque-capacity targets. Minimizing the sum
    of squares equals minimizing variance because the sum is pinned.
    """
    idx = np.flatnonzero(avail)
    pos = layout.positions[idx]
    k = len(idx)
    rows = [pos[:, 0], pos[:, 1], np.ones(k)]
    rhs = [0.0, 0.0, force]
    if moment_pm is not None:
        # targets for [sum min(x,0)u, sum min(y,0)u, sum max(x,0)u, sum max(y,0)u]
        signed = _signed_lever_rows(pos)
        rows.extend([signed[0], signed[1], signed[2], signed[3]])
        rhs.extend(
            [-moment_pm[2], moment_pm[1], -moment_pm[3], moment_pm[0]]
        )
    a = np.vstack(rows)
    b = np.array(rhs)
    try:
        u_sub = solve_box_qp(
            hess=np.eye(k),
            grad=np.zeros(k),
            a_eq=a,
            b_eq=b,
            lower=np.zeros(k),
            upper=caps[idx],
        )
    except InfeasibleProblem as exc:
        raise AllocationInfeasible(
            f"thrust redistribution infeasible over units {idx.tolist()} "
            f"(caps {np.round(caps[idx], 3).tolist()}, F={force:.3f}): {exc}"
        ) from exc
    u = np.zeros(layout.n)
    u[idx] = u_sub
    return u


def allocate_nominal(
    layout: AssemblyLayout, cmd: WrenchCommand, mu: float = 1e-6
) -> AllocationResult:
    """Fault-blind allocation: equal thrust shares plus lever-weighted
    distribution of the commanded moments across all units."""
    n = layout.n
    u = np.full(n, cmd.force / n)
    shares = moment_shares(layout, mu=mu)
    m_local = cmd.moment - lever_moment(layout, u)
    mix = MixingMatrix.from_unit(layout.unit)
    wrenches = {
        i: np.array(
            [u[i], shares[i, 0] * m_local[0], shares[i, 1] * m_local[1], shares[i, 2] * m_local[2]]
        )
        for i in range(n)
    }
    omega_sq, sat = _mix_units(layout, wrenches, mix)
    return _result(layout, omega_sq, sat)


def solve_unit_failure(
    layout: AssemblyLayout,
    faults: FaultState,
    cmd: WrenchCommand,
    mu: float = 1e-6,
) -> AllocationResult:
    """Redistribute unit thrusts after unit failures.

    Failed units receive zero thrust; the remaining units minimize thrust
    variance subject to a zero net lever moment and the commanded total, with
    the signed torque-capacity targets added when ``cmd.moment_pm`` is given.
    Raises :class:`AllocationInfeasible` when the constraint set is
    unreachable (for example, all remaining units on one side of the center).
    """
    failed = np.array(faults.failed)
    avail = ~failed
    if not avail.any():
        raise AllocationInfeasible("all units failed")
    caps = _unit_caps(layout, faults)
    u = _thrust_qp(layout, avail, caps, cmd.force, cmd.moment_pm)

    # differential torque needs thrust to modulate: idle units cannot help
    participating = np.flatnonzero(avail & (caps > 0.0) & (u > 1e-9))
    if len(participating) == 0:
        participating = np.flatnonzero(avail & (caps > 0.0))
    shares = moment_shares(layout, mu=mu, participating=participating)
    m_local = cmd.moment - lever_moment(layout, u)
    mix = MixingMatrix.from_unit(layout.unit)
    wrenches = {
        int(i): np.array(
            [u[i], shares[i, 0] * m_local[0], shares[i, 1] * m_local[1], shares[i, 2] * m_local[2]]
        )
        for i in participating
    }
    omega_sq, sat = _mix_units(layout, wrenches, mix)
    return _result(layout, omega_sq, sat)


def partial_realloc(
    layout: AssemblyLayout,
    faults: FaultState,
    cmd: WrenchCommand,
    nominal_thrusts: np.ndarray | None = None,
    mu: float = 1e-6,
) -> AllocationResult:
    """Compensate faults by adjusting only the fully healthy units.

    Faulty units keep their nominal per-rotor commands frozen (their output is
    whatever the degraded rotors still deliver); the healthy units pick up the
    lost thrust and moment, including the lever moment of the now-uneven
    thrust pattern, so the total wrench is conserved.
    """
    if faults.n != layout.n:
        raise ValueError("fault state does not match layout")
    if nominal_thrusts is None:
        nominal = allocate_nominal(layout, cmd, mu=mu)
        k_f = np.array([r.k_f for r in layout.unit.rotors])
        nominal_thrusts = nominal.omega_sq * k_f
    f_nom = np.asarray(nominal_thrusts, dtype=float)
    if f_nom.shape != (layout.n, N_ROTORS):
        raise ValueError("nominal thrusts must be (n, 4)")

    faulty = faults.faulty_units()
    healthy = np.setdiff1d(np.arange(layout.n), faulty)
    if len(healthy) == 0:
        raise AllocationInfeasible("no healthy units left to reallocate onto")

    k_f = np.array([r.k_f for r in layout.unit.rotors])
    omega_sq = np.zeros((layout.n, N_ROTORS))
    for i in faulty:
        omega_sq[i] = f_nom[i] / k_f
    retained = achieved_wrench(layout, faults, omega_sq)

    f_chi = cmd.force - retained[0]
    m_chi = cmd.moment - retained[1:]

    u = np.zeros(layout.n)
    u[healthy] = f_chi / len(healthy)
    m_local = m_chi - lever_moment(layout, u)
    shares = moment_shares(layout, mu=mu, participating=healthy)
    mix = MixingMatrix.from_unit(layout.unit)
    wrenches = {
        int(i): np.array(
            [u[i], shares[i, 0] * m_local[0], shares[i, 1] * m_local[1], shares[i, 2] * m_local[2]]
        )
        for i in healthy
    }
    healthy_omega, sat = _mix_units(layout, wrenches, mix)
    omega_sq[healthy] = healthy_omega[healthy]
    return _result(layout, omega_sq, sat)


def _stage1_unit(
    unit: UnitSpec, eta: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, bool, bool]:
    """Balance one degraded unit: meet its wrench slice within rotor caps.

    Returns actual rotor thrusts, a cap-active flag, and a fallback flag.
    The torque rows of the unit wrench map have the all-ones vector as their
    null space, so when the exact mix leaves the box we slide along it: thrust
    gives way while the unit's pitch/roll/yaw stay exactly on target. If even
    that fails, the unit falls back to torque-free equal thrusts at the level
    its weakest rotor allows.
    """
    b = unit_wrench_matrix(unit)
    hi = eta * np.array([r.f_max for r in unit.rotors])
    f_tgt = np.linalg.solve(b, target)
    if np.all(f_tgt >= -1e-12) and np.all(f_tgt <= hi + 1e-12):
        return np.clip(f_tgt, 0.0, hi), False, False
    s_lo = float(np.max(-f_tgt))
    s_hi = float(np.min(hi - f_tgt))
    if s_lo <= s_hi:
        s = min(max(0.0, s_lo), s_hi)
        return np.clip(f_tgt + s, 0.0, hi), True, False
    level = min(target[0] / N_ROTORS, float(hi.min()))
    f = np.full(N_ROTORS, max(level, 0.0))
    return f, True, True


def full_realloc(
    layout: AssemblyLayout,
    faults: FaultState,
    cmd: WrenchCommand,
    mu: float = 1e-6,
) -> AllocationResult:
    """Two-stage reallocation for rotor degradations and unit failures.

    Unit thrusts are first redistributed over the available units (failed
    units zeroed, degraded units capped). Each degraded unit then balances its
    own rotors to meet its wrench slice exactly within the per-rotor
    capability, and whatever it cannot deliver is handed to the healthy units
    in a single corrective pass.
    """
    if faults.n != layout.n:
        raise ValueError("fault state does not match layout")
    failed = np.array(faults.failed)
    # units are asked only for what they can deliver balanced, so sustained
    # fault-induced moments ride on the thrust pattern, not on local torques
    caps = _balanced_caps(layout, faults)
    caps[failed] = 0.0
    avail = (~failed) & (caps > 0.0)
    if not avail.any():
        raise AllocationInfeasible("no units with usable rotors")

    saturated = False
    try:
        u = _thrust_qp(layout, avail, caps, cmd.force, None)
    except AllocationInfeasible:
        u = np.zeros(layout.n)
        u[avail] = caps[avail] * (cmd.force / caps[avail].sum())
        u = np.minimum(u, caps)
        saturated = True

    thrusting = avail & (u > 1e-9)
    if not thrusting.any():
        thrusting = avail
    participating = np.flatnonzero(thrusting)
    degraded = np.flatnonzero(thrusting & np.any(faults.eta < 1.0, axis=1))
    healthy = np.flatnonzero(thrusting & np.all(faults.eta >= 1.0, axis=1))

    shares = moment_shares(layout, mu=mu, participating=participating)
    m_local = cmd.moment - lever_moment(layout, u)
    targets = {
        int(i): np.array(
            [u[i], shares[i, 0] * m_local[0], shares[i, 1] * m_local[1], shares[i, 2] * m_local[2]]
        )
        for i in participating
    }

    k_f = np.array([r.k_f for r in layout.unit.rotors])
    omega_sq = np.zeros((layout.n, N_ROTORS))
    residual = np.zeros(4)
    fallback: list[int] = []
    b = unit_wrench_matrix(layout.unit)
    for i in degraded:
        f_act, capped, fell_back = _stage1_unit(layout.unit, faults.eta[i], targets[i])
        saturated = saturated or capped
        if fell_back:
            fallback.append(int(i))
        eta = faults.eta[i]
        cmd_f = np.where(eta > 0.0, f_act / np.maximum(eta, 1e-12), 0.0)
        omega_sq[i] = cmd_f / k_f
        # assembly-frame shortfall: the unit's wrench slice plus the lever
        # moment its missing thrust no longer produces
        delta = targets[i] - b @ f_act
        x_i, y_i = layout.positions[i]
        residual += delta + np.array([0.0, y_i * delta[0], -x_i * delta[0], 0.0])

    if len(healthy) and np.any(np.abs(residual) > 0.0):
        extra_u = np.zeros(layout.n)
        extra_u[healthy] = residual[0] / len(healthy)
        extra_local = residual[1:] - lever_moment(layout, extra_u)
        h_shares = moment_shares(layout, mu=mu, participating=healthy)
        for i in healthy:
            targets[int(i)] = targets[int(i)] + np.array(
                [
                    extra_u[i],
                    h_shares[i, 0] * extra_local[0],
                    h_shares[i, 1] * extra_local[1],
                    h_shares[i, 2] * extra_local[2],
                ]
            )
    elif np.any(np.abs(residual) > 1e-12):
        saturated = True

    mix = MixingMatrix.from_unit(layout.unit)
    healthy_wrenches = {int(i): targets[int(i)] for i in healthy}
    healthy_omega, sat2 = _mix_units(layout, healthy_wrenches, mix)
    omega_sq[healthy] = healthy_omega[healthy]
    return _result(layout, omega_sq, saturated or sat2, fallback)
