"""Assembly geometry: unit layout, aggregate inertia, signed torque capacity.

An assembly is a set of identical quad units docked on a planar grid. All
frames are z-up with thrust along body +z; the assembly frame origin sits at
the geometric centroid of the occupied cells, which coincides with the center
of mass because units share one mass.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np

N_ROTORS = 4

_SIGN_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RotorSpec:
    """Geometry and limits of a single rotor, expressed in the unit frame."""

    offset: tuple[float, float]  # [m] rotor position relative to unit center
    spin: int  # +1/-1: sign of yaw torque produced per newton of thrust
    f_max: float  # [N] maximum thrust
    k_tau: float  # [m] yaw torque per unit thrust
    k_f: float = 1.0e-5  # [N/(rad/s)^2] thrust per squared rotor speed

    def __post_init__(self) -> None:
        if self.spin not in (-1, 1):
            raise ValueError(f"rotor spin must be +1 or -1, got {self.spin}")
        if self.f_max <= 0.0:
            raise ValueError("rotor f_max must be positive")
        if self.k_tau <= 0.0:
            raise ValueError("rotor k_tau must be positive")
        if self.k_f <= 0.0:
            raise ValueError("rotor k_f must be positive")


@dataclass(frozen=True, eq=False)
class UnitSpec:
    """One quad module: mass, inertia about its own center, and rotor set."""

    mass: float  # [kg]
    inertia: np.ndarray  # [kg m^2] 3x3 about the unit center
    arm: float  # [m] rotor offset magnitude
    rotors: tuple[RotorSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "inertia", _readonly(self.inertia))
        if self.mass <= 0.0:
            raise ValueError("unit mass must be positive")
        if self.inertia.shape != (3, 3):
            raise ValueError("unit inertia must be 3x3")
        if not np.allclose(self.inertia, self.inertia.T, atol=1e-12):
            raise ValueError("unit inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0.0):
            raise ValueError("unit inertia must be positive definite")
        if len(self.rotors) != N_ROTORS:
            raise ValueError(f"a unit carries exactly {N_ROTORS} rotors")
        spins = [r.spin for r in self.rotors]
        if sum(spins) != 0:
            raise ValueError("rotor spin signs must sum to zero")
        if any(spins[i] == spins[(i + 1) % N_ROTORS] for i in range(N_ROTORS)):
            raise ValueError("rotor spin signs must alternate around the unit")


def cross_unit(
    mass: float = 1.0,
    arm: float = 0.15,
    f_max: float = 5.0,
    k_tau: float = 0.016,
    k_f: float = 1.0e-5,
    inertia_diag: tuple[float, float, float] = (0.005, 0.005, 0.009),
) -> UnitSpec:
    """Standard cross-configuration quad unit: rotors on the unit axes,
    spins alternating so opposite pairs rotate the same way."""
    a = arm
    offsets = [(a, 0.0), (0.0, a), (-a, 0.0), (0.0, -a)]
    spins = [1, -1, 1, -1]
    rotors = tuple(
        RotorSpec(offset=o, spin=s, f_max=f_max, k_tau=k_tau, k_f=k_f)
        for o, s in zip(offsets, spins)
    )
    return UnitSpec(mass=mass, inertia=np.diag(inertia_diag), arm=arm, rotors=rotors)


@dataclass(frozen=True, eq=False)
class AssemblyLayout:
    """Occupied grid cells plus derived unit positions.

    ``cells`` are (row, col) integers in a persistent docking grid; ``positions``
    are their centers in meters relative to the cell centroid, ordered row-major
    by cell. Rows map to +y, columns to +x.
    """

    cells: tuple[tuple[int, int], ...]
    pitch: float  # [m] unit spacing
    positions: np.ndarray  # (n, 2)
    unit: UnitSpec

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", _readonly(self.positions))

    @property
    def n(self) -> int:
        return len(self.cells)


def _four_connected(cells: set[tuple[int, int]]) -> bool:
    start = next(iter(cells))
    seen = {start}
    stack = [start]
    while stack:
        r, c = stack.pop()
        for nb in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if nb in cells and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(cells)


def build_assembly(
    cells, pitch: float, unit: UnitSpec | None = None
) -> AssemblyLayout:
    """Build a layout from occupied grid cells.

    Cells must be non-empty, duplicate-free and 4-connected. Positions are
    ``pitch * (cell - centroid)`` so they always sum to zero.
    """
    if unit is None:
        unit = cross_unit()
    cell_list = [(int(r), int(c)) for r, c in cells]
    if not cell_list:
        raise ValueError("cell set is empty")
    if len(set(cell_list)) != len(cell_list):
        raise ValueError(f"duplicate cells in {cell_list}")
    if not _four_connected(set(cell_list)):
        raise ValueError(f"cells are not 4-connected: {sorted(cell_list)}")
    if pitch <= 0.0:
        raise ValueError("pitch must be positive")
    cell_list.sort()
    rc = np.array(cell_list, dtype=float)
    centroid = rc.mean(axis=0)
    positions = np.empty((len(cell_list), 2))
    positions[:, 0] = (rc[:, 1] - centroid[1]) * pitch  # col -> x
    positions[:, 1] = (rc[:, 0] - centroid[0]) * pitch  # row -> y
    return AssemblyLayout(
        cells=tuple(cell_list), pitch=pitch, positions=positions, unit=unit
    )


@dataclass(frozen=True, eq=False)
class RotorTable:
    """Flattened per-rotor view of a layout (length 4n, unit-major order)."""

    position: np.ndarray  # (4n, 2) absolute rotor positions in assembly frame
    spin: np.ndarray  # (4n,)
    f_max: np.ndarray  # (4n,)
    k_tau: np.ndarray  # (4n,)
    k_f: np.ndarray  # (4n,)
    unit_index: np.ndarray  # (4n,)


_ROTOR_TABLE_CACHE: "weakref.WeakKeyDictionary[AssemblyLayout, RotorTable]" = (
    weakref.WeakKeyDictionary()
)


def rotor_table(layout: AssemblyLayout) -> RotorTable:
    cached = _ROTOR_TABLE_CACHE.get(layout)
    if cached is not None:
        return cached
    n = layout.n
    pos = np.empty((n * N_ROTORS, 2))
    spin = np.empty(n * N_ROTORS)
    f_max = np.empty(n * N_ROTORS)
    k_tau = np.empty(n * N_ROTORS)
    k_f = np.empty(n * N_ROTORS)
    unit_index = np.repeat(np.arange(n), N_ROTORS)
    for i in range(n):
        for j, rotor in enumerate(layout.unit.rotors):
            k = i * N_ROTORS + j
            pos[k] = layout.positions[i] + np.asarray(rotor.offset)
            spin[k] = rotor.spin
            f_max[k] = rotor.f_max
            k_tau[k] = rotor.k_tau
            k_f[k] = rotor.k_f
    table = RotorTable(
        position=_readonly(pos),
        spin=_readonly(spin),
        f_max=_readonly(f_max),
        k_tau=_readonly(k_tau),
        k_f=_readonly(k_f),
        unit_index=unit_index,
    )
    _ROTOR_TABLE_CACHE[layout] = table
    return table


@dataclass(frozen=True, eq=False)
class InertialModel:
    total_mass: float  # [kg]
    inertia: np.ndarray  # [kg m^2] 3x3 about the assembly center
    com: np.ndarray  # [m] 2-vector

    def __post_init__(self) -> None:
        object.__setattr__(self, "inertia", _readonly(self.inertia))
        object.__setattr__(self, "com", _readonly(self.com))


_INERTIA_CACHE: "weakref.WeakKeyDictionary[AssemblyLayout, InertialModel]" = (
    weakref.WeakKeyDictionary()
)


def assembly_inertia(layout: AssemblyLayout) -> InertialModel:
    """Aggregate mass and inertia via the parallel-axis theorem.

    Each unit contributes its own inertia plus ``m * (|r|^2 I - r r^T)`` for
    its planar offset r from the assembly center.
    """
    cached = _INERTIA_CACHE.get(layout)
    if cached is not None:
        return cached
    m = layout.unit.mass
    total = np.array(layout.unit.inertia, dtype=float) * layout.n
    for p in layout.positions:
        r = np.array([p[0], p[1], 0.0])
        total += m * (np.dot(r, r) * np.eye(3) - np.outer(r, r))
    com = layout.positions.mean(axis=0)
    model = InertialModel(total_mass=m * layout.n, inertia=total, com=com)
    _INERTIA_CACHE[layout] = model
    return model


@dataclass(frozen=True, eq=False)
class TauPM:
    """Signed torque-capacity 4-vector.

    Components are thrust-weighted lever sums split by sign:
    ``[sum min(x,0) u, sum min(y,0) u, sum max(x,0) u, sum max(y,0) u]``.
    The first two are always <= 0, the last two >= 0, and min+max pairs
    recompose the plain lever dot products.
    """

    values: np.ndarray  # (4,) [N m]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.shape != (4,):
            raise ValueError("TauPM holds exactly 4 components")
        if v[0] > _SIGN_TOL or v[1] > _SIGN_TOL:
            raise ValueError(f"negative-side components must be <= 0, got {v}")
        if v[2] < -_SIGN_TOL or v[3] < -_SIGN_TOL:
            raise ValueError(f"positive-side components must be >= 0, got {v}")
        object.__setattr__(self, "values", _readonly(v))


def tau_pm(layout: AssemblyLayout, u_a: np.ndarray) -> TauPM:
    """Signed torque capacities of a per-unit thrust vector.

    Element-wise min/max against zero is applied to the unit position matrix
    before contracting with the thrusts, so each side of each axis is
    accumulated separately.
    """
    u = np.asarray(u_a, dtype=float)
    if u.shape != (layout.n,):
        raise ValueError(f"expected {layout.n} thrusts, got shape {u.shape}")
    if np.any(u < 0.0):
        raise ValueError("unit thrusts must be nonnegative")
    levers = layout.positions.T  # (2, n) rows: x, y
    neg = np.minimum(levers, 0.0) @ u
    pos = np.maximum(levers, 0.0) @ u
    return TauPM(values=np.concatenate([neg, pos]))


def moment_shares(
    layout: AssemblyLayout,
    mu: float = 1e-6,
    participating: np.ndarray | None = None,
) -> np.ndarray:
    """Per-unit torque distribution weights, one column per torque channel.

    Channel weights follow the lever-magnitude ratio ``|P_i + mu| / sum_j
    |P_j + mu|`` evaluated component-wise (x levers for the x-torque channel,
    y levers for the y-torque channel) with a constant ``1/k`` yaw share.
    Weights in each channel sum to one across participating units so that
    distributed moments recompose exactly.
    """
    if mu <= 0.0:
        raise ValueError("mu must be strictly positive")
    n = layout.n
    if participating is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.zeros(n, dtype=bool)
        mask[np.asarray(participating, dtype=int)] = True
    k = int(mask.sum())
    if k == 0:
        raise ValueError("no participating units")
    shares = np.zeros((n, 3))
    for channel, axis in ((0, 0), (1, 1)):
        mag = np.abs(layout.positions[:, axis] + mu)
        mag = np.where(mask, mag, 0.0)
        shares[:, channel] = mag / mag.sum()
    shares[mask, 2] = 1.0 / k
    return shares


def efficiency_matrix(
    layout: AssemblyLayout,
    unit_index: int,
    mu: float = 1e-6,
    participating: np.ndarray | None = None,
) -> np.ndarray:
    """Diagonal 4x4 wrench-share matrix of one unit.

    Maps the assembly wrench [F, Mx, My, Mz] to this unit's slice of it: an
    equal ``1/k`` thrust share and lever-magnitude-weighted torque shares
    (see :func:`moment_shares`).
    """
    if not 0 <= unit_index < layout.n:
        raise ValueError(f"unit index {unit_index} out of range")
    shares = moment_shares(layout, mu=mu, participating=participating)
    if participating is None:
        k = layout.n
    else:
        k = len(np.unique(np.asarray(participating, dtype=int)))
    return np.diag(
        [1.0 / k, shares[unit_index, 0], shares[unit_index, 1], shares[unit_index, 2]]
    )
