"""Geometry, inertia, and signed-torque-capacity tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotorgrid.assembly import (
    RotorSpec,
    assembly_inertia,
    build_assembly,
    cross_unit,
    efficiency_matrix,
    moment_shares,
    rotor_table,
    tau_pm,
)

from conftest import PLUS_CELLS, grid_cells, random_connected_cells


def brute_force_inertia(layout):
    """Point-mass parallel-axis sum, written out component by component."""
    m = layout.unit.mass
    total = np.zeros((3, 3))
    for x, y in layout.positions:
        total[0, 0] += m * y * y
        total[1, 1] += m * x * x
        total[2, 2] += m * (x * x + y * y)
        total[0, 1] -= m * x * y
        total[1, 0] -= m * x * y
    return total + layout.n * np.asarray(layout.unit.inertia)


def brute_force_tau(layout, u):
    neg_x = neg_y = pos_x = pos_y = 0.0
    for (x, y), ui in zip(layout.positions, u):
        if x < 0.0:
            neg_x += x * ui
        else:
            pos_x += x * ui
        if y < 0.0:
            neg_y += y * ui
        else:
            pos_y += y * ui
    return np.array([neg_x, neg_y, pos_x, pos_y])


class TestBuildAssembly:
    def test_3x2_grid_positions(self):
        layout = build_assembly(grid_cells(2, 3), pitch=0.5)
        assert sorted(set(np.round(layout.positions[:, 0], 9))) == [-0.5, 0.0, 0.5]
        assert sorted(set(np.round(layout.positions[:, 1], 9))) == [-0.25, 0.25]

    def test_single_cell_is_origin(self):
        layout = build_assembly([(3, 7)], pitch=0.5)
        assert layout.n == 1
        np.testing.assert_allclose(layout.positions, [[0.0, 0.0]])

    def test_plus_shape_positions(self):
        layout = build_assembly(PLUS_CELLS, pitch=0.5)
        got = {tuple(np.round(p, 9)) for p in layout.positions}
        assert got == {(0.0, 0.0), (0.5, 0.0), (-0.5, 0.0), (0.0, 0.5), (0.0, -0.5)}

    def test_positions_sum_to_zero(self):
        layout = build_assembly(grid_cells(3, 3), pitch=0.4)
        np.testing.assert_allclose(layout.positions.sum(axis=0), 0.0, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_assembly([], pitch=0.5)

    def test_disconnected_rejected(self):
        with pytest.raises(ValueError, match="4-connected"):
            build_assembly([(0, 0), (0, 2)], pitch=0.5)

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_assembly([(0, 0), (0, 0), (0, 1)], pitch=0.5)

    def test_row_major_ordering(self):
        layout = build_assembly([(1, 0), (0, 1), (0, 0), (1, 1)], pitch=0.5)
        assert layout.cells == ((0, 0), (0, 1), (1, 0), (1, 1))


class TestInertia:
    def test_single_unit_identity(self, unit):
        layout = build_assembly([(0, 0)], pitch=0.5, unit=unit)
        model = assembly_inertia(layout)
        np.testing.assert_allclose(model.inertia, unit.inertia)
        np.testing.assert_allclose(model.com, 0.0, atol=1e-15)
        assert model.total_mass == unit.mass

    def test_2x1_z_axis_hand_value(self, unit):
        # two units at x = +/- d/2: Jz = 2 Jz_unit + 2 m (d/2)^2
        d = 0.5
        layout = build_assembly([(0, 0), (0, 1)], pitch=d, unit=unit)
        model = assembly_inertia(layout)
        expected = 2.0 * unit.inertia[2, 2] + 2.0 * unit.mass * (d / 2.0) ** 2
        assert model.inertia[2, 2] == pytest.approx(expected, rel=1e-12)

    def test_3x2_com_zero(self, layout_3x2):
        np.testing.assert_allclose(assembly_inertia(layout_3x2).com, 0.0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(min_value=1, max_value=9), seed=st.integers(0, 2**31))
    def test_matches_brute_force(self, n, seed):
        rng = np.random.default_rng(seed)
        layout = build_assembly(random_connected_cells(rng, n), pitch=0.5)
        model = assembly_inertia(layout)
        expected = brute_force_inertia(layout)
        np.testing.assert_allclose(model.inertia, expected, rtol=1e-12, atol=1e-15)


class TestTauPM:
    def test_2x1_hand_value(self):
        # derived by evaluating the element-wise min/max split directly:
        # levers x = +/-0.25, u = 10 each -> [-2.5, 0, 2.5, 0]
        layout = build_assembly([(0, 0), (0, 1)], pitch=0.5)
        t = tau_pm(layout, np.array([10.0, 10.0]))
        np.testing.assert_allclose(t.values, [-2.5, 0.0, 2.5, 0.0], atol=1e-12)

    def test_zero_thrust(self, layout_3x2):
        np.testing.assert_allclose(tau_pm(layout_3x2, np.zeros(6)).values, 0.0)

    def test_single_unit_zero_lever(self):
        layout = build_assembly([(0, 0)], pitch=0.5)
        np.testing.assert_allclose(tau_pm(layout, np.array([5.0])).values, 0.0)

    def test_negative_thrust_rejected(self, layout_3x2):
        with pytest.raises(ValueError, match="nonnegative"):
            tau_pm(layout_3x2, np.array([1.0, -0.1, 1, 1, 1, 1]))

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=9),
        seed=st.integers(0, 2**31),
        scale=st.floats(min_value=0.0, max_value=4.0),
    )
    def test_signs_sums_and_homogeneity(self, n, seed, scale):
        rng = np.random.default_rng(seed)
        layout = build_assembly(random_connected_cells(rng, n), pitch=0.5)
        u = rng.uniform(0.0, 10.0, size=n)
        t = tau_pm(layout, u).values
        np.testing.assert_allclose(t, brute_force_tau(layout, u), atol=1e-12)
        assert t[0] <= 1e-12 and t[1] <= 1e-12
        assert t[2] >= -1e-12 and t[3] >= -1e-12
        # min+max recompose the plain lever dot products
        assert t[0] + t[2] == pytest.approx(float(layout.positions[:, 0] @ u), abs=1e-9)
        assert t[1] + t[3] == pytest.approx(float(layout.positions[:, 1] @ u), abs=1e-9)
        np.testing.assert_allclose(
            tau_pm(layout, scale * u).values, scale * t, atol=1e-9
        )


class TestEfficiencyMatrix:
    def test_single_unit_thrust_share(self):
        layout = build_assembly([(0, 0)], pitch=0.5)
        e = efficiency_matrix(layout, 0)
        assert e[0, 0] == pytest.approx(1.0)

    def test_3x2_thrust_share(self, layout_3x2):
        for i in range(6):
            assert efficiency_matrix(layout_3x2, i)[0, 0] == pytest.approx(1.0 / 6.0)

    def test_mu_must_be_positive(self, layout_3x2):
        with pytest.raises(ValueError, match="mu"):
            efficiency_matrix(layout_3x2, 0, mu=0.0)

    def test_channel_shares_sum_to_one(self, layout_3x2):
        shares = moment_shares(layout_3x2)
        np.testing.assert_allclose(shares.sum(axis=0), 1.0, atol=1e-12)

    def test_moment_reconstruction_2x1(self):
        # moment in = moment out: push a wrench through every unit's share
        # matrix and the per-unit rotor map, then recompose from absolute
        # rotor positions.
        layout = build_assembly([(0, 0), (0, 1)], pitch=0.5)
        wrench = np.array([20.0, 0.4, -0.3, 0.05])
        from rotorgrid.allocation import unit_wrench_matrix

        b = unit_wrench_matrix(layout.unit)
        table = rotor_table(layout)
        total = np.zeros(4)
        for i in range(layout.n):
            e = efficiency_matrix(layout, i, mu=1e-6)
            f_rotors = np.linalg.solve(b, e @ wrench)
            sl = slice(4 * i, 4 * i + 4)
            total[0] += f_rotors.sum()
            total[1] += float(table.position[sl, 1] @ f_rotors)
            total[2] += float(-table.position[sl, 0] @ f_rotors)
            total[3] += float((table.spin[sl] * table.k_tau[sl]) @ f_rotors)
        np.testing.assert_allclose(total, wrench, atol=1e-9)


class TestRotorValidation:
    def test_bad_spin_rejected(self):
        with pytest.raises(ValueError, match="spin"):
            RotorSpec(offset=(0.1, 0.1), spin=0, f_max=5.0, k_tau=0.016)

    def test_cross_unit_spins_alternate(self):
        unit = cross_unit()
        spins = [r.spin for r in unit.rotors]
        assert sum(spins) == 0
        assert all(spins[i] != spins[(i + 1) % 4] for i in range(4))

    def test_rotor_table_absolute_positions(self, layout_3x2):
        table = rotor_table(layout_3x2)
        a = layout_3x2.unit.arm / math.sqrt(2.0)
        np.testing.assert_allclose(
            table.position[0], layout_3x2.positions[0] + [a, a], atol=1e-12
        )
