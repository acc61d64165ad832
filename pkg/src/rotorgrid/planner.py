"""Attitude-aware lattice planning over an occupancy grid.

The planner searches an (x, y, yaw) lattice at fixed altitude. Node cost
combines accumulated path length, an admissible Euclidean heuristic, and a
penalty on deviating from the attitude that maximizes the assembly's torque
authority, so the returned sequence is both collision-free and flyable.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .assembly import AssemblyLayout, _readonly, rotor_table
from .fault import FaultState, healthy_state

OUT_OF_BOUNDS_SDF = -1.0e3

C_TAU = np.array([1.0, 1.0, -1.0, -1.0])


class PlannerFailure(RuntimeError):
    """No collision-free sequence exists on the lattice."""


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return float((a + math.pi) % (2.0 * math.pi) - math.pi)


def wrapped_distance(a: float, b: float, period: float = 2.0 * math.pi) -> float:
    """Shortest angular distance between a and b on a circle of the given period."""
    d = (a - b) % period
    return float(min(d, period - d))


@dataclass(frozen=True, eq=False)
class Environment:
    """Planar occupancy grid with a per-cell signed distance field.

    Row 0 is the bottom of the world; cell (row, col) has its center at
    ``((col + 0.5) res, (row + 0.5) res)``. The SDF is positive outside
    obstacles and negative inside, in meters.
    """

    occupancy: np.ndarray  # (rows, cols) bool, True = obstacle
    resolution: float  # [m] per cell
    sdf: np.ndarray  # (rows, cols) [m]

    @property
    def extent(self) -> tuple[float, float]:
        rows, cols = self.occupancy.shape
        return cols * self.resolution, rows * self.resolution

    @classmethod
    def from_occupancy(cls, occupancy: np.ndarray, resolution: float) -> "Environment":
        if resolution <= 0.0:
            raise ValueError("resolution must be positive")
        occ = np.asarray(occupancy, dtype=bool)
        diag = float(np.hypot(*occ.shape)) * resolution
        if not occ.any():
            sdf = np.full(occ.shape, diag)
        elif occ.all():
            sdf = np.full(occ.shape, -diag)
        else:
            d_free = ndimage.distance_transform_edt(~occ)
            d_occ = ndimage.distance_transform_edt(occ)
            sdf = (d_free - d_occ) * resolution
        return cls(
            occupancy=_readonly(occ).astype(bool), resolution=resolution, sdf=_readonly(sdf)
        )

    @classmethod
    def from_text(cls, source: str | Path) -> "Environment":
        """Parse a map: a ``resolution <meters>`` header line, then grid rows
        of ``#`` (obstacle) and ``.`` (free). The first grid row is the top."""
        if isinstance(source, Path) or "\n" not in str(source):
            text = Path(source).read_text()
        else:
            text = str(source)
        lines = [ln.rstrip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln and not ln.lstrip().startswith("//")]
        if not lines or not lines[0].lower().startswith("resolution"):
            raise ValueError("map file must start with a 'resolution <m>' header")
        try:
            resolution = float(lines[0].split()[1])
        except (IndexError, ValueError) as exc:
            raise ValueError(f"bad resolution header: {lines[0]!r}") from exc
        rows = lines[1:]
        if not rows:
            raise ValueError("map file has no grid rows")
        width = max(len(r) for r in rows)
        occ = np.zeros((len(rows), width), dtype=bool)
        for i, row in enumerate(rows):
            for j, ch in enumerate(row):
                if ch == "#":
                    occ[i, j] = True
                elif ch != ".":
                    raise ValueError(f"unexpected map character {ch!r} at row {i}")
        return cls.from_occupancy(occ[::-1], resolution)  # file top = max y

    def sample_sdf(self, points: np.ndarray) -> np.ndarray:
        """Bilinear SDF at world points; out-of-bounds counts as collision."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        res = self.resolution
        rows, cols = self.sdf.shape
        w, h = self.extent
        inside = (
            (pts[:, 0] >= 0.0) & (pts[:, 0] <= w) & (pts[:, 1] >= 0.0) & (pts[:, 1] <= h)
        )
        # interpolate on the cell-center lattice, clamped at the borders
        cx = np.clip(pts[:, 0] / res - 0.5, 0.0, cols - 1.0)
        cy = np.clip(pts[:, 1] / res - 0.5, 0.0, rows - 1.0)
        x0 = np.floor(cx).astype(int)
        y0 = np.floor(cy).astype(int)
        x1 = np.minimum(x0 + 1, cols - 1)
        y1 = np.minimum(y0 + 1, rows - 1)
        fx = cx - x0
        fy = cy - y0
        v = (
            self.sdf[y0, x0] * (1 - fx) * (1 - fy)
            + self.sdf[y0, x1] * fx * (1 - fy)
            + self.sdf[y1, x0] * (1 - fx) * fy
            + self.sdf[y1, x1] * fx * fy
        )
        return np.where(inside, v, OUT_OF_BOUNDS_SDF)


@dataclass
class SE3Node:
    """A lattice state: position, attitude, parent link, and costs."""

    position: np.ndarray  # (3,) [m]
    attitude: np.ndarray  # (3,) [rad] roll, pitch, yaw; yaw in [-pi, pi)
    parent: "SE3Node | None" = None
    g: float = 0.0
    f: float = 0.0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float)
        self.attitude = np.asarray(self.attitude, dtype=float)
        self.attitude[2] = wrap_angle(self.attitude[2])

    @property
    def yaw(self) -> float:
        return float(self.attitude[2])


def node(x: float, y: float, z: float = 1.0, yaw: float = 0.0) -> SE3Node:
    return SE3Node(position=np.array([x, y, z]), attitude=np.array([0.0, 0.0, yaw]))


@dataclass(frozen=True, eq=False)
class DiscreteSequence:
    nodes: tuple[SE3Node, ...]
    cost: float
    expanded: int = 0

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class AttitudeObjectiveSpec:
    """Weights of the torque-authority objective.

    ``c_tau`` contracts the signed capacity 4-vector into a net-authority
    scalar (fixed sign convention), ``u_max`` holds per-rotor thrust limits in
    unit-major order, and ``l_phi`` weights attitude deviation in node costs.
    """

    u_max: np.ndarray  # (4n,) [N]
    l_phi: float = 5.0
    c_tau: np.ndarray = field(default_factory=lambda: C_TAU.copy())

    def __post_init__(self) -> None:
        c = np.asarray(self.c_tau, dtype=float)
        if not np.array_equal(c, C_TAU):
            raise ValueError("c_tau is fixed to [1, 1, -1, -1]")
        u = np.asarray(self.u_max, dtype=float)
        if np.any(u <= 0.0):
            raise ValueError("u_max entries must be positive")
        object.__setattr__(self, "c_tau", _readonly(c))
        object.__setattr__(self, "u_max", _readonly(u))

    @classmethod
    def from_layout(cls, layout: AssemblyLayout, l_phi: float = 5.0) -> "AttitudeObjectiveSpec":
        return cls(u_max=rotor_table(layout).f_max.copy(), l_phi=l_phi)


def rotation_matrix(phi: float, theta: float, psi: float) -> np.ndarray:
    """Body-to-world rotation, yaw about z, pitch about y, roll about x."""
    cph, sph = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cps, sps = math.cos(psi), math.sin(psi)
    rz = np.array([[cps, -sps, 0.0], [sps, cps, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cth, 0.0, sth], [0.0, 1.0, 0.0], [-sth, 0.0, cth]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cph, -sph], [0.0, sph, cph]])
    return rz @ ry @ rx


def tau_pm_max(
    layout: AssemblyLayout,
    faults: FaultState,
    phi: np.ndarray,
    spec: AttitudeObjectiveSpec,
) -> np.ndarray:
    """Maximum signed torque capacities at the given attitude.

    Rotor lever arms are rotated into the world frame, split element-wise by
    sign, and contracted with the efficiency-scaled per-rotor thrust limits.
    Returns ``[sum min(x,0) u, sum min(y,0) u, sum max(x,0) u, sum max(y,0) u]``.
    """
    table = rotor_table(layout)
    u = spec.u_max * faults.flat_eta()
    levers3 = np.column_stack([table.position, np.zeros(len(u))])
    rotated = (rotation_matrix(*np.asarray(phi, dtype=float)) @ levers3.T)[:2]
    neg = np.minimum(rotated, 0.0) @ u
    pos = np.maximum(rotated, 0.0) @ u
    return np.concatenate([neg, pos])


def attitude_objective(
    layout: AssemblyLayout,
    faults: FaultState,
    phi: np.ndarray,
    spec: AttitudeObjectiveSpec,
) -> float:
    """Net-authority objective; lower means more torque authority."""
    return float(tau_pm_max(layout, faults, phi, spec) @ spec.c_tau)


def optimal_attitude(
    layout: AssemblyLayout,
    faults: FaultState | None = None,
    spec: AttitudeObjectiveSpec | None = None,
    grid_deg: float = 1.0,
) -> np.ndarray:
    """Grid-search the yaw that maximizes total torque authority.

    Roll and pitch stay zero: tilting only shrinks the projected lever arms
    for a planar assembly near hover. Ties break toward the smallest |yaw|.
    """
    if faults is None:
        faults = healthy_state(layout.n)
    if spec is None:
        spec = AttitudeObjectiveSpec.from_layout(layout)
    psis = np.deg2rad(np.arange(-90.0, 90.0, grid_deg))
    best = None
    for psi in psis:
        obj = attitude_objective(layout, faults, np.array([0.0, 0.0, psi]), spec)
        key = (round(obj, 12), round(abs(psi), 12), psi)
        if best is None or key < best[0]:
            best = (key, psi)
    return np.array([0.0, 0.0, best[1]])


def yaw_symmetry_period(layout: AssemblyLayout) -> float:
    """pi/2 when the cell set is invariant under 90-degree rotation, else pi.

    The torque objective itself repeats every 90 degrees, but attitude
    deviation is folded at the layout's physical symmetry.
    """
    n = layout.n
    sr = sum(r for r, _ in layout.cells)
    sc = sum(c for _, c in layout.cells)
    # integer centroid-centered coordinates scaled by n: x = n*c - sc, y = n*r - sr
    pts = {(n * c - sc, n * r - sr) for r, c in layout.cells}
    rotated = {(-y, x) for x, y in pts}
    return math.pi / 2.0 if rotated == pts else math.pi


_FOOTPRINT_CACHE: dict[tuple, np.ndarray] = {}


def footprint_points(layout: AssemblyLayout, spacing: float) -> np.ndarray:
    """Local sample points covering every unit's square outline and interior."""
    key = (layout.cells, layout.pitch, round(spacing, 9))
    cached = _FOOTPRINT_CACHE.get(key)
    if cached is not None:
        return cached
    half = layout.pitch / 2.0
    m = max(2, int(math.ceil(2.0 * half / spacing)) + 1)
    axis = np.linspace(-half, half, m)
    gx, gy = np.meshgrid(axis, axis)
    square = np.column_stack([gx.ravel(), gy.ravel()])
    pts = np.vstack([square + p for p in layout.positions])
    _FOOTPRINT_CACHE[key] = pts
    return pts


def footprint_world(
    layout: AssemblyLayout, x: float, y: float, yaw: float, spacing: float
) -> np.ndarray:
    local = footprint_points(layout, spacing)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def footprint_collision_check(
    node: SE3Node,
    layout: AssemblyLayout,
    env: Environment,
    margin: float = 0.05,
    spacing: float | None = None,
) -> bool:
    """True when every footprint sample clears the margin (no collision)."""
    if spacing is None:
        spacing = env.resolution / 2.0
    pts = footprint_world(layout, node.position[0], node.position[1], node.yaw, spacing)
    return bool(np.all(env.sample_sdf(pts) > margin))


@dataclass
class PlannerConfig:
    yaw_step_deg: float = 15.0
    yaw_weight: float = 0.2  # [m/rad] path cost of yawing
    margin: float = 0.05  # [m] collision clearance
    footprint_spacing: float | None = None  # defaults to one grid cell in-search
    allow_yaw: bool = True
    max_expansions: int = 400_000


_MOVES = [
    (dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)
]


def astar_plan(
    env: Environment,
    start: SE3Node,
    goal: SE3Node,
    layout: AssemblyLayout,
    faults: FaultState | None = None,
    spec: AttitudeObjectiveSpec | None = None,
    config: PlannerConfig | None = None,
) -> DiscreteSequence:
    """Search the position-yaw lattice for a collision-free sequence.

    Node priority is ``g + h + j``: accumulated Euclidean-plus-yaw path cost,
    the Euclidean heuristic to the goal, and the weighted deviation of the
    node yaw from the optimal-authority yaw (folded at the layout symmetry).
    The optimal attitude does not depend on node position, so it is computed
    once per query.
    """
    if faults is None:
        faults = healthy_state(layout.n)
    if spec is None:
        spec = AttitudeObjectiveSpec.from_layout(layout)
    if config is None:
        config = PlannerConfig()
    res = env.resolution
    z = float(start.position[2])
    yaw_step = math.radians(config.yaw_step_deg)
    n_yaw = max(1, int(round(2.0 * math.pi / yaw_step)))
    period = yaw_symmetry_period(layout)
    psi_star = float(optimal_attitude(layout, faults, spec)[2])
    spacing = config.footprint_spacing or res

    def cell_of(p) -> tuple[int, int]:
        return int(math.floor(p[0] / res)), int(math.floor(p[1] / res))

    def yaw_index(yaw: float) -> int:
        return int(round(wrap_angle(yaw) / yaw_step)) % n_yaw

    def world(ix: int, iy: int) -> tuple[float, float]:
        return (ix + 0.5) * res, (iy + 0.5) * res

    clear_memo: dict[tuple[int, int, int], bool] = {}

    def clear(ix: int, iy: int, iyaw: int) -> bool:
        key = (ix, iy, iyaw)
        hit = clear_memo.get(key)
        if hit is None:
            x, y = world(ix, iy)
            pts = footprint_world(layout, x, y, wrap_angle(iyaw * yaw_step), spacing)
            hit = bool(np.all(env.sample_sdf(pts) > config.margin))
            clear_memo[key] = hit
        return hit

    def j_phi(iyaw: int) -> float:
        return spec.l_phi * wrapped_distance(
            wrap_angle(iyaw * yaw_step), psi_star, period
        )

    start_key = (*cell_of(start.position), yaw_index(start.yaw))
    goal_key = (*cell_of(goal.position), yaw_index(goal.yaw))
    if not clear(*start_key):
        raise PlannerFailure(f"start state {start_key} is in collision")
    if not clear(*goal_key):
        raise PlannerFailure(f"goal state {goal_key} is in collision")
    gx, gy = world(goal_key[0], goal_key[1])

    def heuristic(ix: int, iy: int) -> float:
        x, y = world(ix, iy)
        return math.hypot(x - gx, y - gy)

    yaw_moves = (-1, 0, 1) if config.allow_yaw else (0,)
    g_score: dict[tuple[int, int, int], float] = {start_key: 0.0}
    parent: dict[tuple[int, int, int], tuple[int, int, int] | None] = {start_key: None}
    closed: set[tuple[int, int, int]] = set()
    counter = 0
    open_heap: list = []
    heapq.heappush(
        open_heap, (heuristic(*start_key[:2]) + j_phi(start_key[2]), counter, start_key)
    )
    expanded = 0
    while open_heap:
        _, _, current = heapq.heappop(open_heap)
        if current in closed:
            continue
        if current == goal_key:
            return _reconstruct(parent, g_score, current, world, yaw_step, z, expanded)
        closed.add(current)
        expanded += 1
        if expanded > config.max_expansions:
            raise PlannerFailure("expansion budget exhausted")
        cx, cy, cyaw = current
        for dx, dy in _MOVES + [(0, 0)]:
            for dyaw in yaw_moves:
                if dx == 0 and dy == 0 and dyaw == 0:
                    continue
                nb = (cx + dx, cy + dy, (cyaw + dyaw) % n_yaw)
                if nb in closed:
                    continue
                if not clear(*nb):
                    continue
                step = res * math.hypot(dx, dy) + config.yaw_weight * abs(dyaw) * yaw_step
                g_temp = g_score[current] + step
                if nb not in g_score or g_temp < g_score[nb]:
                    g_score[nb] = g_temp
                    parent[nb] = current
                    f = g_temp + heuristic(nb[0], nb[1]) + j_phi(nb[2])
                    counter += 1
                    heapq.heappush(open_heap, (f, counter, nb))
    raise PlannerFailure("open set exhausted without reaching the goal")


def _reconstruct(parent, g_score, key, world, yaw_step, z, expanded) -> DiscreteSequence:
    chain = []
    k = key
    while k is not None:
        chain.append(k)
        k = parent[k]
    chain.reverse()
    nodes = []
    prev = None
    for ix, iy, iyaw in chain:
        x, y = world(ix, iy)
        n = SE3Node(
            position=np.array([x, y, z]),
            attitude=np.array([0.0, 0.0, wrap_angle(iyaw * yaw_step)]),
            parent=prev,
            g=g_score[(ix, iy, iyaw)],
        )
        nodes.append(n)
        prev = n
    return DiscreteSequence(nodes=tuple(nodes), cost=g_score[key], expanded=expanded)


def simplify_sequence(seq: DiscreteSequence, stride: int = 3) -> DiscreteSequence:
    """Thin a sequence for trajectory fitting, keeping endpoints and every
    node where the motion direction or yaw changes."""
    if stride <= 1 or len(seq) <= 2:
        return seq
    nodes = seq.nodes
    keep = [0]
    for i in range(1, len(nodes) - 1):
        d_prev = nodes[i].position[:2] - nodes[i - 1].position[:2]
        d_next = nodes[i + 1].position[:2] - nodes[i].position[:2]
        turn = (
            np.linalg.norm(d_prev) > 0
            and np.linalg.norm(d_next) > 0
            and not np.allclose(
                np.arctan2(d_prev[1], d_prev[0]), np.arctan2(d_next[1], d_next[0])
            )
        )
        if turn or (i - keep[-1]) >= stride:
            keep.append(i)
    keep.append(len(nodes) - 1)
    return DiscreteSequence(
        nodes=tuple(nodes[i] for i in keep), cost=seq.cost, expanded=seq.expanded
    )


def audit_sequence(
    seq: DiscreteSequence,
    layout: AssemblyLayout,
    env: Environment,
    margin: float = 0.05,
    spacing: float | None = None,
) -> bool:
    """Re-check every node of a sequence against the footprint test."""
    return all(
        footprint_collision_check(n, layout, env, margin=margin, spacing=spacing)
        for n in seq.nodes
    )
