"""Closed-loop simulation: rigid-body plant, cascaded tracking controller,
fault-aware allocation dispatch, and reconfiguration events.

The plant applies rotor efficiencies to the commanded speeds, so allocation
schemes are exercised against exactly the degradation they were told about.
Integration is symplectic Euler with a trapezoidal position update (exact for
constant acceleration, which pins the ballistic check tolerance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .allocation import (
    AllocationInfeasible,
    AllocationResult,
    WrenchCommand,
    allocate_nominal,
    full_realloc,
    partial_realloc,
)
from .assembly import (
    AssemblyLayout,
    InertialModel,
    assembly_inertia,
    build_assembly,
    rotor_table,
)
from .fault import FaultState, healthy_state, mark_unit_failed, set_rotor_eta
from .planner import Environment, footprint_world

GRAVITY = 9.81


class PlantDivergence(RuntimeError):
    """The rigid-body state left the numerically meaningful regime."""


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)])


def yaw_of_quat(q: np.ndarray) -> float:
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


@dataclass
class RigidState:
    p: np.ndarray  # [m] world position
    v: np.ndarray  # [m/s]
    q: np.ndarray  # unit quaternion, body to world, [w, x, y, z]
    w: np.ndarray  # [rad/s] body rates

    @classmethod
    def at(cls, p, v=None, yaw: float = 0.0) -> "RigidState":
        return cls(
            p=np.asarray(p, dtype=float),
            v=np.zeros(3) if v is None else np.asarray(v, dtype=float),
            q=quat_from_yaw(yaw),
            w=np.zeros(3),
        )


@dataclass
class ReferenceState:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    yaw: float = 0.0
    yaw_rate: float = 0.0


def spiral_reference(
    t: float,
    radius: float = 1.0,
    climb_rate: float = 0.1,
    angular_rate: float = 0.5,
    center: tuple[float, float] = (0.0, 0.0),
    z0: float = 1.0,
    yaw: float = 0.0,
) -> ReferenceState:
    """Helix with analytic derivatives; yaw held constant."""
    if t < 0.0:
        raise ValueError("reference time must be nonnegative")
    a = angular_rate * t
    c, s = math.cos(a), math.sin(a)
    pos = np.array([center[0] + radius * c, center[1] + radius * s, z0 + climb_rate * t])
    vel = np.array([-radius * angular_rate * s, radius * angular_rate * c, climb_rate])
    acc = np.array(
        [-radius * angular_rate**2 * c, -radius * angular_rate**2 * s, 0.0]
    )
    return ReferenceState(pos, vel, acc, yaw=yaw, yaw_rate=0.0)


def hover_reference(point, yaw: float = 0.0):
    p = np.asarray(point, dtype=float)

    def ref(t: float) -> ReferenceState:
        return ReferenceState(p.copy(), np.zeros(3), np.zeros(3), yaw=yaw)

    return ref


def trajectory_reference(traj):
    """Adapt a piecewise trajectory to the reference interface, holding the
    final state after the trajectory ends."""

    def ref(t: float) -> ReferenceState:
        st = traj.evaluate(t)
        if st.clamped and t > traj.duration:
            return ReferenceState(
                st.position.copy(), np.zeros(3), np.zeros(3), yaw=st.yaw
            )
        return ReferenceState(
            st.position.copy(),
            st.velocity.copy(),
            st.acceleration.copy(),
            yaw=st.yaw,
            yaw_rate=st.yaw_rate,
        )

    return ref


@dataclass(frozen=True)
class ControllerGains:
    kp_pos: tuple[float, float, float] = (5.0, 5.0, 2.0)
    kd_pos: tuple[float, float, float] = (4.0, 4.0, 2.4)
    kp_att: tuple[float, float, float] = (90.0, 90.0, 20.0)
    kd_att: tuple[float, float, float] = (18.0, 18.0, 8.0)
    gravity: float = GRAVITY

    def __post_init__(self) -> None:
        for name in ("kp_pos", "kd_pos", "kp_att", "kd_att"):
            if any(g < 0.0 for g in getattr(self, name)):
                raise ValueError(f"{name} must be nonnegative")


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def desired_attitude(f_world: np.ndarray, yaw: float) -> np.ndarray:
    """Rotation whose z-axis carries the thrust vector at the given yaw."""
    norm = np.linalg.norm(f_world)
    z_des = f_world / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])
    x_c = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    y_des = np.cross(z_des, x_c)
    y_norm = np.linalg.norm(y_des)
    if y_norm < 1e-9:
        y_des = np.array([0.0, 1.0, 0.0])
    else:
        y_des = y_des / y_norm
    x_des = np.cross(y_des, z_des)
    return np.column_stack([x_des, y_des, z_des])


def tracking_controller(
    state: RigidState,
    ref: ReferenceState,
    gains: ControllerGains,
    inertial: InertialModel,
) -> WrenchCommand:
    """Position PD with acceleration feedforward feeding an attitude PD.

    The outer loop turns tracking error into a desired specific force, whose
    direction fixes the desired attitude; the inner loop produces body
    moments from the rotation error plus a gyroscopic feedforward.
    """
    m = inertial.total_mass
    kp = np.array(gains.kp_pos)
    kd = np.array(gains.kd_pos)
    a_des = ref.acceleration + kp * (ref.position - state.p) + kd * (ref.velocity - state.v)
    f_world = m * (a_des + np.array([0.0, 0.0, gains.gravity]))
    rot = quat_to_rot(state.q)
    force = float(max(f_world @ rot[:, 2], 0.0))
    r_des = desired_attitude(f_world, ref.yaw)
    e_rot = 0.5 * _vee(r_des.T @ rot - rot.T @ r_des)
    w_des = rot.T @ (r_des @ np.array([0.0, 0.0, ref.yaw_rate]))
    e_w = state.w - w_des
    j = np.asarray(inertial.inertia)
    moment = j @ (
        -np.array(gains.kp_att) * e_rot - np.array(gains.kd_att) * e_w
    ) + np.cross(state.w, j @ state.w)
    return WrenchCommand(force=force, moment=moment)


def plant_step(
    state: RigidState,
    rotor_omega_sq: np.ndarray,
    faults: FaultState,
    layout: AssemblyLayout,
    dt: float,
) -> RigidState:
    """One integration step of the rigid assembly under commanded speeds.

    Rotor thrusts are the commanded ``k_f * omega^2`` scaled by the rotor's
    efficiency; moments come from absolute rotor positions plus spin-signed
    yaw drag. Gravity acts in the world frame.
    """
    if not 0.0 < dt <= 0.01:
        raise ValueError("plant dt must lie in (0, 0.01]")
    omega = np.asarray(rotor_omega_sq, dtype=float).reshape(-1)
    if np.any(omega < 0.0):
        raise ValueError("rotor speeds must be nonnegative")
    table = rotor_table(layout)
    f = faults.flat_eta() * table.k_f * omega
    thrust = float(f.sum())
    torque = np.array(
        [
            float(table.position[:, 1] @ f),
            float(-table.position[:, 0] @ f),
            float((table.spin * table.k_tau) @ f),
        ]
    )
    inertial = assembly_inertia(layout)
    m = inertial.total_mass
    j = np.asarray(inertial.inertia)
    rot = quat_to_rot(state.q)
    acc = rot @ np.array([0.0, 0.0, thrust]) / m + np.array([0.0, 0.0, -GRAVITY])
    w_dot = np.linalg.solve(j, torque - np.cross(state.w, j @ state.w))

    v_new = state.v + acc * dt
    p_new = state.p + state.v * dt + 0.5 * acc * dt * dt
    w_new = state.w + w_dot * dt
    dq = 0.5 * dt * quat_mul(state.q, np.array([0.0, *w_new]))
    q_new = quat_normalize(state.q + dq)
    out = RigidState(p=p_new, v=v_new, q=q_new, w=w_new)
    if not (
        np.all(np.isfinite(out.p))
        and np.all(np.isfinite(out.v))
        and np.all(np.isfinite(out.w))
    ):
        raise PlantDivergence("non-finite rigid state")
    return out


@dataclass(frozen=True)
class FaultEvent:
    """Timed fault injection; rotor None marks the whole unit failed."""

    t: float
    unit: int
    rotor: int | None = None
    eta: float = 0.0


@dataclass(frozen=True)
class ReconfigEvent:
    """Instantaneous layout change on the persistent docking grid.

    ``unit_map[i]`` gives the old index of the unit now at new index i, or -1
    for a unit that (re)joins; joining units are healthy unless listed in
    ``new_failed``.
    """

    t: float
    cells: tuple[tuple[int, int], ...]
    unit_map: tuple[int, ...]
    new_failed: tuple[int, ...] = ()
    pitch: float | None = None

    @property
    def label(self) -> str:
        return f"reconfigure->{len(self.cells)}u"


def apply_reconfiguration(
    layout: AssemblyLayout,
    faults: FaultState,
    state: RigidState,
    event: ReconfigEvent,
) -> tuple[AssemblyLayout, FaultState, RigidState]:
    """Swap the layout and remap faults, keeping the physical units fixed in
    the world: the state origin jumps with the cell centroid."""
    if len(event.unit_map) != len(event.cells):
        raise ValueError("unit_map must have one entry per new cell")
    new_layout = build_assembly(
        event.cells, event.pitch or layout.pitch, layout.unit
    )
    old_rc = np.array(layout.cells, dtype=float).mean(axis=0)
    new_rc = np.array(new_layout.cells, dtype=float).mean(axis=0)
    delta_body = np.array(
        [
            (new_rc[1] - old_rc[1]) * new_layout.pitch,
            (new_rc[0] - old_rc[0]) * new_layout.pitch,
            0.0,
        ]
    )
    rot = quat_to_rot(state.q)
    shift = rot @ delta_body
    new_state = RigidState(
        p=state.p + shift,
        v=state.v + np.cross(rot @ state.w, shift),
        q=state.q.copy(),
        w=state.w.copy(),
    )
    n_new = len(event.cells)
    eta = np.ones((n_new, 4))
    failed = [False] * n_new
    for i, old in enumerate(event.unit_map):
        if old >= 0:
            if old >= faults.n:
                raise ValueError(f"unit_map entry {old} out of range")
            eta[i] = faults.eta[old]
            failed[i] = faults.failed[old]
    for i in event.new_failed:
        failed[i] = True
        eta[i] = 0.0
    return new_layout, FaultState(failed=tuple(failed), eta=eta), new_state


@dataclass
class SimConfig:
    layout: AssemblyLayout
    reference: object  # callable t -> ReferenceState
    duration: float
    faults: FaultState | None = None
    ftc_mode: str = "full"  # none | partial | full
    dt: float = 1e-3
    control_dt: float = 1e-2
    gains: ControllerGains = field(default_factory=ControllerGains)
    events: tuple = ()
    env: Environment | None = None
    collision_margin: float = 0.0
    divergence_error: float = 10.0
    transient_window: float = 1.0
    initial_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if self.ftc_mode not in ("none", "partial", "full"):
            raise ValueError(f"unknown ftc_mode {self.ftc_mode!r}")
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")


@dataclass
class Trace:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    ref_p: np.ndarray
    ref_a: np.ndarray
    ref_yaw: np.ndarray
    err: np.ndarray
    cmd_force: np.ndarray
    cmd_moment: np.ndarray
    u_a: np.ndarray  # padded with NaN where the unit count changed
    saturated: np.ndarray
    collided: np.ndarray
    events: list  # (t, label)

    @property
    def yaw(self) -> np.ndarray:
        return np.array([yaw_of_quat(q) for q in self.q])


@dataclass
class Metrics:
    rms_error: float
    max_error: float
    yaw_transient_deg: float
    accel_transient: float
    collision_count: int
    divergent: bool
    completed: bool
    saturation_fraction: float

    def as_dict(self) -> dict:
        return {
            "rms_error": self.rms_error,
            "max_error": self.max_error,
            "yaw_transient_deg": self.yaw_transient_deg,
            "accel_transient": self.accel_transient,
            "collision_count": self.collision_count,
            "divergent": self.divergent,
            "completed": self.completed,
            "saturation_fraction": self.saturation_fraction,
        }


def _allocate(layout, faults, cmd, mode) -> AllocationResult:
    if mode == "none" or not faults.any_fault():
        return allocate_nominal(layout, cmd)
    if mode == "partial":
        return partial_realloc(layout, faults, cmd)
    return full_realloc(layout, faults, cmd)


def _apply_fault_event(faults: FaultState, ev: FaultEvent) -> FaultState:
    if ev.rotor is None:
        return mark_unit_failed(faults, ev.unit)
    return set_rotor_eta(faults, ev.unit, ev.rotor, ev.eta)


def run_closed_loop(config: SimConfig) -> tuple[Trace, Metrics]:
    """Fixed-step closed loop: reference -> controller -> allocation -> plant.

    Deterministic given the configuration. Terminates early (flagged
    divergent) when the plant state explodes or the tracking error exceeds
    the configured bound.
    """
    layout = config.layout
    faults = config.faults if config.faults is not None else healthy_state(layout.n)
    if faults.n != layout.n:
        raise ValueError("fault state does not match layout")
    inertial = assembly_inertia(layout)
    ref0 = config.reference(0.0)
    state = RigidState.at(
        ref0.position + np.asarray(config.initial_offset, dtype=float),
        v=ref0.velocity,
        yaw=ref0.yaw,
    )
    substeps = max(1, int(round(config.control_dt / config.dt)))
    n_ticks = int(round(config.duration / config.control_dt))
    events = sorted(config.events, key=lambda e: e.t)
    ev_idx = 0
    max_units = max(
        [layout.n] + [len(e.cells) for e in events if isinstance(e, ReconfigEvent)]
    )

    rows: dict[str, list] = {k: [] for k in (
        "t", "p", "v", "q", "w", "ref_p", "ref_a", "ref_yaw", "err",
        "cmd_force", "cmd_moment", "u_a", "saturated", "collided",
    )}
    event_log: list[tuple[float, str]] = []
    divergent = False

    for k in range(n_ticks):
        t = k * config.control_dt
        while ev_idx < len(events) and events[ev_idx].t <= t + 1e-12:
            ev = events[ev_idx]
            if isinstance(ev, FaultEvent):
                faults = _apply_fault_event(faults, ev)
                event_log.append((t, f"fault unit {ev.unit}"))
            elif isinstance(ev, ReconfigEvent):
                layout, faults, state = apply_reconfiguration(
                    layout, faults, state, ev
                )
                inertial = assembly_inertia(layout)
                event_log.append((t, ev.label))
            ev_idx += 1
        ref = config.reference(t)
        cmd = tracking_controller(state, ref, config.gains, inertial)
        try:
            alloc = _allocate(layout, faults, cmd, config.ftc_mode)
        except AllocationInfeasible:
            alloc = allocate_nominal(layout, cmd)
            alloc = AllocationResult(
                u_a=alloc.u_a, omega_sq=alloc.omega_sq, saturated=True
            )
        try:
            for _ in range(substeps):
                state = plant_step(state, alloc.omega_sq, faults, layout, config.dt)
        except PlantDivergence:
            divergent = True
        err = float(np.linalg.norm(state.p - ref.position))
        collided = False
        if config.env is not None:
            pts = footprint_world(
                layout, state.p[0], state.p[1], yaw_of_quat(state.q),
                config.env.resolution / 2.0,
            )
            collided = bool(
                np.any(config.env.sample_sdf(pts) <= config.collision_margin)
            )
        u_pad = np.full(max_units, np.nan)
        u_pad[: layout.n] = alloc.u_a
        rows["t"].append(t)
        rows["p"].append(state.p.copy())
        rows["v"].append(state.v.copy())
        rows["q"].append(state.q.copy())
        rows["w"].append(state.w.copy())
        rows["ref_p"].append(ref.position.copy())
        rows["ref_a"].append(ref.acceleration.copy())
        rows["ref_yaw"].append(ref.yaw)
        rows["err"].append(err)
        rows["cmd_force"].append(cmd.force)
        rows["cmd_moment"].append(cmd.moment.copy())
        rows["u_a"].append(u_pad)
        rows["saturated"].append(alloc.saturated)
        rows["collided"].append(collided)
        if divergent or err > config.divergence_error:
            divergent = True
            break

    trace = Trace(
        t=np.array(rows["t"]),
        p=np.array(rows["p"]),
        v=np.array(rows["v"]),
        q=np.array(rows["q"]),
        w=np.array(rows["w"]),
        ref_p=np.array(rows["ref_p"]),
        ref_a=np.array(rows["ref_a"]),
        ref_yaw=np.array(rows["ref_yaw"]),
        err=np.array(rows["err"]),
        cmd_force=np.array(rows["cmd_force"]),
        cmd_moment=np.array(rows["cmd_moment"]),
        u_a=np.array(rows["u_a"]),
        saturated=np.array(rows["saturated"], dtype=bool),
        collided=np.array(rows["collided"], dtype=bool),
        events=event_log,
    )
    metrics = compute_metrics(trace, config, divergent)
    return trace, metrics


def compute_metrics(trace: Trace, config: SimConfig, divergent: bool) -> Metrics:
    err = trace.err
    rms = float(np.sqrt(np.mean(err**2))) if len(err) else float("inf")
    yaw_tr = 0.0
    acc_tr = 0.0
    if trace.events and len(trace.t) > 2:
        yaw = trace.yaw
        accel = np.zeros((len(trace.t), 3))
        accel[1:] = np.diff(trace.v, axis=0) / config.control_dt
        for te, _label in trace.events:
            pre = np.searchsorted(trace.t, te) - 1
            if pre < 0:
                pre = 0
            window = (trace.t >= te - config.transient_window) & (
                trace.t <= te + config.transient_window
            )
            if not window.any():
                continue
            dyaw = np.array(
                [abs(_wrap(y - yaw[pre])) for y in yaw[window]]
            )
            yaw_tr = max(yaw_tr, math.degrees(float(dyaw.max())))
            residual = np.linalg.norm(
                accel[window] - trace.ref_a[window], axis=1
            )
            acc_tr = max(acc_tr, float(residual.max()))
    return Metrics(
        rms_error=rms,
        max_error=float(err.max()) if len(err) else float("inf"),
        yaw_transient_deg=yaw_tr,
        accel_transient=acc_tr,
        collision_count=int(trace.collided.sum()),
        divergent=divergent,
        completed=not divergent,
        saturation_fraction=float(trace.saturated.mean()) if len(err) else 1.0,
    )


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi
