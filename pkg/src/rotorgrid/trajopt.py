"""Piecewise-quintic trajectories and dynamics-aware refinement.

A discrete planner sequence is fitted with per-axis quintic segments (x, y, z,
yaw) that are C2 by construction, then interior waypoints and log durations
are locally optimized against a cost mixing smoothness, total time, obstacle
hinge penalties, and dynamic-feasibility hinges including deviation from the
optimal-authority yaw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import AssemblyLayout
from .fault import FaultState, healthy_state
from .planner import (
    DiscreteSequence,
    Environment,
    footprint_points,
    optimal_attitude,
    wrapped_distance,
    yaw_symmetry_period,
)

AXES = ("x", "y", "z", "yaw")


@dataclass(frozen=True)
class CostWeights:
    """Outer and inner penalty weights plus dynamic limits."""

    lambda_m: float = 1.0  # smoothness (integrated squared jerk)
    lambda_t: float = 10.0  # total time
    lambda_o: float = 1.0e4  # obstacle hinge
    lambda_d: float = 1.0  # dynamic penalty group
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    lambda_j: float = 1.0
    lambda_phi: float = 1.0
    v_max: float = 2.0  # [m/s]
    a_max: float = 4.0  # [m/s^2]
    j_max: float = 20.0  # [m/s^3]

    def __post_init__(self) -> None:
        for name in (
            "lambda_m",
            "lambda_t",
            "lambda_o",
            "lambda_d",
            "lambda_v",
            "lambda_a",
            "lambda_j",
            "lambda_phi",
        ):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("v_max", "a_max", "j_max"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrajectoryState:
    position: np.ndarray  # (3,)
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    yaw: float
    yaw_rate: float
    clamped: bool = False


def _quintic(p0, v0, a0, p1, v1, a1, t: float) -> np.ndarray:
    """Coefficients of the unique quintic matching both boundary states."""
    c0, c1, c2 = p0, v0, a0 / 2.0
    t2, t3, t4, t5 = t * t, t**3, t**4, t**5
    a = np.array(
        [
            [t3, t4, t5],
            [3 * t2, 4 * t3, 5 * t4],
            [6 * t, 12 * t2, 20 * t3],
        ]
    )
    rhs = np.array(
        [
            p1 - (c0 + c1 * t + c2 * t2),
            v1 - (c1 + 2 * c2 * t),
            a1 - a0,
        ]
    )
    c345 = np.linalg.solve(a, rhs)
    return np.array([c0, c1, c2, *c345])


def _jerk_cost_matrix(t: float) -> np.ndarray:
    """Quadratic form of integral jerk^2 in the boundary states (6x6)."""
    t2 = t * t
    a = np.array(
        [[t**3, t**4, t**5], [3 * t2, 4 * t**3, 5 * t**4], [6 * t, 12 * t2, 20 * t**3]]
    )
    r = np.array(
        [
            [-1.0, -t, -t2 / 2.0, 1.0, 0.0, 0.0],
            [0.0, -1.0, -t, 0.0, 1.0, 0.0],
            [0.0, 0.0, -1.0, 0.0, 0.0, 1.0],
        ]
    )
    m = np.linalg.solve(a, r)  # c3..c5 as a linear map of the boundary states
    d = np.array([6.0, 24.0, 60.0])
    powers = np.array(
        [[t ** (i + j + 1) / (i + j + 1) for j in range(3)] for i in range(3)]
    )
    g = np.outer(d, d) * powers
    return m.T @ g @ m


def _min_jerk_spline(points: np.ndarray, durations: np.ndarray) -> np.ndarray:
    """Quintic coefficients (K, n_axes, 6): interior joint v/a minimize the
    integrated squared jerk; endpoints at rest. One assembly serves all axes
    because the quadratic form depends only on the shared durations."""
    k = len(durations)
    n_axes = points.shape[1]
    if k == 1:
        return np.stack(
            [
                _quintic(points[0, ax], 0, 0, points[1, ax], 0, 0, durations[0])
                for ax in range(n_axes)
            ]
        )[None, :, :]
    n_free = 2 * (k - 1)
    h = np.zeros((n_free, n_free))
    g = np.zeros((n_free, n_axes))

    def free_slots(seg):
        # boundary-state indices (within the 6-vector) that are unknown
        # and their positions in the global unknown vector
        slots = []
        if seg > 0:
            slots.append((1, 2 * (seg - 1)))  # v at left joint
            slots.append((2, 2 * (seg - 1) + 1))  # a at left joint
        if seg < k - 1:
            slots.append((4, 2 * seg))
            slots.append((5, 2 * seg + 1))
        return slots

    for seg in range(k):
        q = _jerk_cost_matrix(float(durations[seg]))
        slots = free_slots(seg)
        free_idx = [s for s, _ in slots]
        fixed_idx = [i for i in range(6) if i not in free_idx]
        bc_fixed = np.zeros((6, n_axes))
        bc_fixed[0] = points[seg]
        bc_fixed[3] = points[seg + 1]
        for si, gi in slots:
            for sj, gj in slots:
                h[gi, gj] += q[si, sj]
            g[gi] += q[np.ix_([si], fixed_idx)][0] @ bc_fixed[fixed_idx]
    z = np.linalg.solve(h + 1e-12 * np.eye(n_free), -g)  # (n_free, n_axes)

    coeffs = np.empty((k, n_axes, 6))
    zero = np.zeros(n_axes)
    for seg in range(k):
        v0 = z[2 * (seg - 1)] if seg > 0 else zero
        a0 = z[2 * (seg - 1) + 1] if seg > 0 else zero
        v1 = z[2 * seg] if seg < k - 1 else zero
        a1 = z[2 * seg + 1] if seg < k - 1 else zero
        for ax in range(n_axes):
            coeffs[seg, ax] = _quintic(
                points[seg, ax], v0[ax], a0[ax],
                points[seg + 1, ax], v1[ax], a1[ax], float(durations[seg]),
            )
    return coeffs


_DERIV_FACTORS = np.zeros((4, 6, 6))
for _d in range(4):
    for _i in range(_d, 6):
        _fac = 1.0
        for _r in range(_d):
            _fac *= _i - _r
        _DERIV_FACTORS[_d, _i - _d, _i] = _fac


@dataclass(frozen=True, eq=False)
class PiecewiseTrajectory:
    """Per-axis quintic segments over shared durations."""

    coeffs: np.ndarray  # (K, 4, 6) axis-major polynomial coefficients
    durations: np.ndarray  # (K,) [s]
    waypoints: np.ndarray  # (K+1, 4) segment boundary values per axis
    line_search_failed: bool = False

    @property
    def duration(self) -> float:
        return float(self.durations.sum())

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    @classmethod
    def build(cls, waypoints: np.ndarray, durations: np.ndarray) -> "PiecewiseTrajectory":
        wp = np.asarray(waypoints, dtype=float)
        t = np.asarray(durations, dtype=float)
        if np.any(t <= 0.0):
            raise ValueError("segment durations must be positive")
        if wp.shape != (len(t) + 1, 4):
            raise ValueError("waypoints must be (K+1, 4)")
        coeffs = _min_jerk_spline(wp, t)
        return cls(coeffs=coeffs, durations=t, waypoints=wp)

    @property
    def _deriv_coeffs(self) -> np.ndarray:
        """(K, 4 axes, 4 derivative orders, 6) polynomial coefficients."""
        cached = getattr(self, "_dc_cache", None)
        if cached is None:
            cached = np.einsum("dco,kao->kadc", _DERIV_FACTORS, self.coeffs)
            object.__setattr__(self, "_dc_cache", cached)
        return cached

    def _locate(self, t: float) -> tuple[int, float, bool]:
        total = self.duration
        clamped = t < 0.0 or t > total
        t = min(max(t, 0.0), total)
        edges = np.concatenate([[0.0], np.cumsum(self.durations)])
        seg = int(np.searchsorted(edges, t, side="right") - 1)
        seg = min(max(seg, 0), self.n_segments - 1)
        return seg, t - edges[seg], clamped

    def evaluate(self, t: float) -> TrajectoryState:
        seg, tau, clamped = self._locate(float(t))
        powers = tau ** np.arange(6)
        vals = self._deriv_coeffs[seg] @ powers  # (4 axes, 4 orders)
        return TrajectoryState(
            position=vals[:3, 0].copy(),
            velocity=vals[:3, 1].copy(),
            acceleration=vals[:3, 2].copy(),
            jerk=vals[:3, 3].copy(),
            yaw=float(vals[3, 0]),
            yaw_rate=float(vals[3, 1]),
            clamped=clamped,
        )

    def sample_times(self, per_segment: int) -> np.ndarray:
        """Segment-midpoint quadrature abscissae."""
        edges = np.concatenate([[0.0], np.cumsum(self.durations)])
        ts = []
        for k in range(self.n_segments):
            frac = (np.arange(per_segment) + 0.5) / per_segment
            ts.append(edges[k] + frac * self.durations[k])
        return np.concatenate(ts)

    def evaluate_many(self, ts: np.ndarray) -> np.ndarray:
        """(len(ts), 4 axes, 4 derivative orders) array of states."""
        ts = np.asarray(ts, dtype=float)
        edges = np.concatenate([[0.0], np.cumsum(self.durations)])
        seg = np.clip(
            np.searchsorted(edges, ts, side="right") - 1, 0, self.n_segments - 1
        )
        out = np.empty((len(ts), 4, 4))
        dc = self._deriv_coeffs
        for k in range(self.n_segments):
            mask = seg == k
            if not mask.any():
                continue
            tau = ts[mask] - edges[k]
            powers = tau[:, None] ** np.arange(6)[None, :]  # (m, 6)
            out[mask] = np.einsum("adc,mc->mad", dc[k], powers)
        return out

    def joint_mismatch(self) -> float:
        """Largest position/velocity/acceleration gap across interior joints."""
        worst = 0.0
        edges = np.cumsum(self.durations)
        for k in range(self.n_segments - 1):
            t = edges[k]
            left = self.evaluate(t - 1e-12)
            right = self.evaluate(t + 1e-12)
            for a, b in (
                (left.position, right.position),
                (left.velocity, right.velocity),
                (left.acceleration, right.acceleration),
                ((left.yaw, left.yaw_rate), (right.yaw, right.yaw_rate)),
            ):
                worst = max(worst, float(np.max(np.abs(np.asarray(a) - np.asarray(b)))))
        return worst

    def to_csv(self, path, dt: float = 0.02) -> None:
        ts = np.arange(0.0, self.duration + dt / 2.0, dt)
        vals = self.evaluate_many(ts)
        header = "t,x,y,z,yaw,vx,vy,vz,yaw_rate"
        rows = np.column_stack(
            [ts, vals[:, 0, 0], vals[:, 1, 0], vals[:, 2, 0], vals[:, 3, 0],
             vals[:, 0, 1], vals[:, 1, 1], vals[:, 2, 1], vals[:, 3, 1]]
        )
        np.savetxt(path, rows, delimiter=",", header=header, comments="")


def init_from_sequence(
    seq: DiscreteSequence,
    v_nominal: float = 1.0,
    limits: CostWeights | None = None,
) -> PiecewiseTrajectory:
    """Fit an initial trajectory through a discrete sequence.

    One segment per consecutive node pair, timed at nominal speed; zero-length
    hops (pure rotations) are merged into their neighbor segment. Yaw is
    unwrapped so the polynomial axis never jumps across the wrap. When limits
    are given, all durations are scaled uniformly until the sampled dynamics
    respect them (a uniform time scale preserves the min-jerk solution).
    """
    if len(seq) < 2:
        raise ValueError("sequence must contain at least two nodes")
    pos = np.array([n.position for n in seq.nodes])
    yaw = np.unwrap(np.array([n.yaw for n in seq.nodes]))
    keep = [0]
    for i in range(1, len(seq)):
        if np.linalg.norm(pos[i, :2] - pos[keep[-1], :2]) > 1e-9:
            keep.append(i)
        else:
            # merge: carry the latest yaw at the same position
            yaw[keep[-1]] = yaw[i]
    if len(keep) < 2:
        raise ValueError("sequence collapses to a single position")
    pos = pos[keep]
    yaw = yaw[keep]
    dists = np.linalg.norm(np.diff(pos[:, :2], axis=0), axis=1)
    durations = np.maximum(dists / v_nominal, 0.1)
    waypoints = np.column_stack([pos, yaw])
    traj = PiecewiseTrajectory.build(waypoints, durations)
    if limits is not None:
        vals = traj.evaluate_many(traj.sample_times(16))
        v = float(np.linalg.norm(vals[:, :3, 1], axis=1).max())
        a = float(np.linalg.norm(vals[:, :3, 2], axis=1).max())
        j = float(np.linalg.norm(vals[:, :3, 3], axis=1).max())
        gamma = max(
            1.0,
            v / limits.v_max,
            math.sqrt(a / limits.a_max) if a > 0 else 1.0,
            (j / limits.j_max) ** (1.0 / 3.0) if j > 0 else 1.0,
        )
        if gamma > 1.0:
            traj = PiecewiseTrajectory.build(waypoints, durations * gamma * 1.05)
    return traj


@dataclass
class CostBreakdown:
    total: float
    j_m: float
    j_t: float
    g_o: float
    g_v: float
    g_a: float
    g_j: float
    g_phi: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def total_cost(
    traj: PiecewiseTrajectory,
    env: Environment | None,
    layout: AssemblyLayout,
    faults: FaultState | None,
    weights: CostWeights,
    phi_star: float | None = None,
    samples_per_segment: int = 16,
    obstacle_margin: float = 0.12,
    footprint_spacing: float | None = None,
) -> CostBreakdown:
    """Weighted trajectory cost with a per-term breakdown.

    Smoothness is quadrature of squared jerk; obstacle and dynamic terms are
    cubic hinges summed over segment-midpoint samples; the attitude term sums
    the wrapped deviation of sampled yaw from the optimal-authority yaw.
    """
    if faults is None:
        faults = healthy_state(layout.n)
    if phi_star is None:
        phi_star = float(optimal_attitude(layout, faults)[2])
    period = yaw_symmetry_period(layout)
    ts = traj.sample_times(samples_per_segment)
    vals = traj.evaluate_many(ts)
    dt_w = np.repeat(traj.durations / samples_per_segment, samples_per_segment)

    jerk_sq = (vals[:, :, 3] ** 2).sum(axis=1)
    j_m = float(np.sum(jerk_sq * dt_w))
    j_t = float(traj.duration)

    g_o = 0.0
    if env is not None and weights.lambda_o > 0.0:
        spacing = footprint_spacing if footprint_spacing is not None else env.resolution
        local = footprint_points(layout, spacing)
        c = np.cos(vals[:, 3, 0])
        s = np.sin(vals[:, 3, 0])
        rots = np.stack(
            [np.stack([c, -s], axis=1), np.stack([s, c], axis=1)], axis=1
        )  # (S, 2, 2)
        world = np.einsum("sij,pj->spi", rots, local) + vals[:, None, :2, 0]
        sdf = env.sample_sdf(world.reshape(-1, 2))
        viol = np.maximum(0.0, obstacle_margin - sdf)
        g_o = float(np.sum(viol**3))

    speed = np.linalg.norm(vals[:, :3, 1], axis=1)
    accel = np.linalg.norm(vals[:, :3, 2], axis=1)
    jerk = np.linalg.norm(vals[:, :3, 3], axis=1)
    g_v = float(np.sum(np.maximum(0.0, speed - weights.v_max) ** 3))
    g_a = float(np.sum(np.maximum(0.0, accel - weights.a_max) ** 3))
    g_j = float(np.sum(np.maximum(0.0, jerk - weights.j_max) ** 3))

    dev = np.array([wrapped_distance(y, phi_star, period) for y in vals[:, 3, 0]])
    g_phi = float(dev.sum())

    total = (
        weights.lambda_m * j_m
        + weights.lambda_t * j_t
        + weights.lambda_o * g_o
        + weights.lambda_d
        * (
            weights.lambda_v * g_v
            + weights.lambda_a * g_a
            + weights.lambda_j * g_j
            + weights.lambda_phi * g_phi
        )
    )
    return CostBreakdown(total, j_m, j_t, g_o, g_v, g_a, g_j, g_phi)


@dataclass
class OptimizeInfo:
    costs: list[float] = field(default_factory=list)
    converged: bool = False
    line_search_failed: bool = False
    iterations: int = 0


_LOG_T_BOUNDS = (math.log(0.05), math.log(30.0))


def optimize(
    traj: PiecewiseTrajectory,
    env: Environment | None,
    layout: AssemblyLayout,
    faults: FaultState | None,
    weights: CostWeights,
    phi_star: float | None = None,
    max_iter: int = 300,
    rel_tol: float = 1e-6,
    samples_per_segment: int = 16,
    obstacle_margin: float = 0.12,
    footprint_spacing: float | None = None,
    grad_step: float = 1e-4,
) -> tuple[PiecewiseTrajectory, OptimizeInfo]:
    """Gradient descent over interior waypoints (x, y, yaw) and log durations.

    Gradients are central differences; a backtracking line search guarantees
    non-increasing accepted cost. Endpoint states and the z profile stay
    fixed; the spline is re-solved at every step, so C2 continuity holds by
    construction throughout.
    """
    if faults is None:
        faults = healthy_state(layout.n)
    if phi_star is None:
        phi_star = float(optimal_attitude(layout, faults)[2])
    k = traj.n_segments
    n_int = k - 1
    wp0 = traj.waypoints.copy()

    def unpack(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        wp = wp0.copy()
        if n_int:
            wp[1:-1, 0] = theta[0:n_int]
            wp[1:-1, 1] = theta[n_int : 2 * n_int]
            wp[1:-1, 3] = theta[2 * n_int : 3 * n_int]
        log_t = np.clip(theta[3 * n_int :], *_LOG_T_BOUNDS)
        return wp, np.exp(log_t)

    def cost_of(theta: np.ndarray) -> float:
        wp, durs = unpack(theta)
        t = PiecewiseTrajectory.build(wp, durs)
        return total_cost(
            t,
            env,
            layout,
            faults,
            weights,
            phi_star=phi_star,
            samples_per_segment=samples_per_segment,
            obstacle_margin=obstacle_margin,
            footprint_spacing=footprint_spacing,
        ).total

    theta = np.concatenate(
        [
            wp0[1:-1, 0],
            wp0[1:-1, 1],
            wp0[1:-1, 3],
            np.log(np.clip(traj.durations, math.exp(_LOG_T_BOUNDS[0]), None)),
        ]
    )
    info = OptimizeInfo()
    current = cost_of(theta)
    info.costs.append(current)
    step = 0.1
    for it in range(max_iter):
        info.iterations = it + 1
        grad = np.empty_like(theta)
        for i in range(len(theta)):
            probe = theta.copy()
            probe[i] += grad_step
            up = cost_of(probe)
            probe[i] -= 2.0 * grad_step
            down = cost_of(probe)
            grad[i] = (up - down) / (2.0 * grad_step)
        norm = float(np.linalg.norm(grad))
        if norm < 1e-12:
            info.converged = True
            break
        direction = -grad / norm
        alpha = step
        improved = False
        while alpha > 1e-7:
            cand = theta + alpha * direction
            c = cost_of(cand)
            if c < current - 1e-4 * alpha * norm:
                theta = cand
                improved = True
                break
            alpha *= 0.5
        if not improved:
            info.line_search_failed = True
            break
        step = min(alpha * 1.6, 0.5)
        previous, current = current, c
        info.costs.append(current)
        if (previous - current) / max(abs(previous), 1e-12) < rel_tol:
            info.converged = True
            break
    wp, durs = unpack(theta)
    out = PiecewiseTrajectory.build(wp, durs)
    object.__setattr__(out, "line_search_failed", info.line_search_failed)
    return out, info


def audit_trajectory(
    traj: PiecewiseTrajectory,
    env: Environment,
    layout: AssemblyLayout,
    margin: float = 0.0,
    dt: float = 0.05,
    spacing: float | None = None,
) -> tuple[bool, float]:
    """Time-sampled footprint audit; returns (clear, worst sdf)."""
    if spacing is None:
        spacing = env.resolution / 2.0
    ts = np.arange(0.0, traj.duration + dt / 2.0, dt)
    vals = traj.evaluate_many(ts)
    local = footprint_points(layout, spacing)
    c = np.cos(vals[:, 3, 0])
    s = np.sin(vals[:, 3, 0])
    rots = np.stack([np.stack([c, -s], axis=1), np.stack([s, c], axis=1)], axis=1)
    world = np.einsum("sij,pj->spi", rots, local) + vals[:, None, :2, 0]
    sdf = env.sample_sdf(world.reshape(-1, 2))
    worst = float(sdf.min())
    return worst > margin, worst
