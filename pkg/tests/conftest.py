"""Shared fixtures and brute-force oracles used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from rotorgrid.assembly import build_assembly, cross_unit


def grid_cells(rows: int, cols: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(rows) for c in range(cols)]


PLUS_CELLS = [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)]


@pytest.fixture
def unit():
    return cross_unit()


@pytest.fixture
def layout_3x2():
    """Three columns by two rows: x in {-0.5, 0, 0.5}, y in {-0.25, 0.25}."""
    return build_assembly(grid_cells(2, 3), pitch=0.5)


@pytest.fixture
def layout_4x1():
    return build_assembly(grid_cells(1, 4), pitch=0.5)


@pytest.fixture
def layout_2x2():
    return build_assembly(grid_cells(2, 2), pitch=0.5)


@pytest.fixture
def layout_plus():
    return build_assembly(PLUS_CELLS, pitch=0.5)


def random_connected_cells(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    """Grow a random 4-connected cell set of size n."""
    cells = {(0, 0)}
    while len(cells) < n:
        r, c = list(cells)[rng.integers(len(cells))]
        dr, dc = [(1, 0), (-1, 0), (0, 1), (0, -1)][rng.integers(4)]
        cells.add((r + dr, c + dc))
    return sorted(cells)


def variance_lattice_oracle(
    positions: np.ndarray,
    caps: np.ndarray,
    force: float,
    n_grid: int = 9,
    refinements: int = 4,
) -> np.ndarray | None:
    """Brute-force minimum-variance thrusts on the feasible affine subspace.

    Parameterizes {u : sum u = F, sum u P = 0} by its null space, sweeps a
    lattice of coefficients, keeps box-feasible points, and refines around the
    best. Returns None when no lattice point is feasible.
    """
    k = len(positions)
    a = np.vstack([positions[:, 0], positions[:, 1], np.ones(k)])
    b = np.array([0.0, 0.0, force])
    u0, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.abs(a @ u0 - b).max() > 1e-8 * max(1.0, force):
        return None
    _, s, vt = np.linalg.svd(a)
    rank = int(np.sum(s > 1e-10))
    null = vt[rank:]
    if null.shape[0] == 0:
        ok = np.all(u0 >= -1e-9) and np.all(u0 <= caps + 1e-9)
        return u0 if ok else None
    d = null.shape[0]
    center = np.zeros(d)
    half = float(force)
    best = None
    for _ in range(refinements + 1):
        axes = [np.linspace(c - half, c + half, n_grid) for c in center]
        coeff = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        us = u0[None, :] + coeff @ null
        feas = np.all(us >= -1e-12, axis=1) & np.all(us <= caps[None, :] + 1e-12, axis=1)
        if not feas.any():
            half *= 0.5
            continue
        var = us[feas].var(axis=1)
        j = int(np.argmin(var))
        best = us[feas][j]
        center = coeff[feas][j]
        half = 2.0 * half / (n_grid - 1)
    return best
