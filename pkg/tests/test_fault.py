"""Fault bookkeeping and wrench-loss tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotorgrid.assembly import build_assembly, rotor_table
from rotorgrid.fault import (
    healthy_state,
    mark_unit_failed,
    set_rotor_eta,
    wrench_loss,
)

from conftest import grid_cells


def test_mark_unit_failed(layout_3x2):
    faults = mark_unit_failed(healthy_state(6), 1)
    assert faults.failed[1] and not faults.failed[0]
    np.testing.assert_allclose(faults.eta[1], 0.0)
    np.testing.assert_allclose(faults.eta[0], 1.0)


def test_mark_failed_idempotent():
    faults = mark_unit_failed(mark_unit_failed(healthy_state(6), 2), 2)
    assert faults.failed[2]
    np.testing.assert_allclose(faults.eta[2], 0.0)


def test_two_sequential_failures():
    faults = mark_unit_failed(mark_unit_failed(healthy_state(6), 1), 4)
    assert faults.failed[1] and faults.failed[4]
    assert not any(f for i, f in enumerate(faults.failed) if i not in (1, 4))


def test_input_state_unchanged():
    before = healthy_state(4)
    mark_unit_failed(before, 0)
    assert not any(before.failed)
    np.testing.assert_allclose(before.eta, 1.0)


def test_set_rotor_eta_single_entry():
    faults = set_rotor_eta(healthy_state(6), 1, 1, 0.5)
    assert faults.eta[1, 1] == 0.5
    assert faults.eta.sum() == pytest.approx(24 - 0.5)


def test_set_rotor_eta_two_rotors():
    faults = set_rotor_eta(set_rotor_eta(healthy_state(6), 1, 0, 0.5), 1, 1, 0.5)
    np.testing.assert_allclose(faults.eta[1], [0.5, 0.5, 1.0, 1.0])


def test_set_eta_one_is_noop():
    faults = set_rotor_eta(healthy_state(6), 0, 0, 1.0)
    assert not faults.any_fault()


def test_eta_out_of_range_rejected():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        set_rotor_eta(healthy_state(6), 0, 0, 1.5)


def test_bad_unit_index_rejected():
    with pytest.raises(IndexError):
        mark_unit_failed(healthy_state(6), 6)


class TestWrenchLoss:
    def test_no_faults_no_loss(self, layout_3x2):
        loss = wrench_loss(layout_3x2, healthy_state(6), np.full((6, 4), 2.45))
        assert loss.d_force == 0.0
        np.testing.assert_allclose(loss.d_moment, 0.0)

    def test_single_degraded_rotor_hand_term(self, layout_3x2):
        # one term: (eta-1) * f at the rotor's absolute position and spin
        faults = set_rotor_eta(healthy_state(6), 1, 1, 0.5)
        f_nom = np.full((6, 4), 2.45)
        loss = wrench_loss(layout_3x2, faults, f_nom)
        table = rotor_table(layout_3x2)
        k = 1 * 4 + 1
        delta = (0.5 - 1.0) * 2.45
        assert loss.d_force == pytest.approx(delta)
        assert loss.d_force == pytest.approx(-1.225)
        np.testing.assert_allclose(
            loss.d_moment,
            [
                delta * table.position[k, 1],
                -delta * table.position[k, 0],
                delta * table.spin[k] * table.k_tau[k],
            ],
            atol=1e-12,
        )

    def test_failed_unit_loses_hover_share(self, layout_3x2):
        faults = mark_unit_failed(healthy_state(6), 0)
        share = 6 * 9.81 / 6 / 4
        loss = wrench_loss(layout_3x2, faults, np.full((6, 4), share))
        assert loss.d_force == pytest.approx(-9.81)

    def test_symmetric_pattern_zero_lateral_moment(self, layout_3x2):
        # units 1 and 4 sit on the x = 0 column at y = -/+ 0.25
        faults = mark_unit_failed(mark_unit_failed(healthy_state(6), 1), 4)
        loss = wrench_loss(layout_3x2, faults, np.full((6, 4), 2.0))
        assert abs(loss.d_moment[0]) < 1e-12
        assert abs(loss.d_moment[1]) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(
        eta=st.floats(min_value=0.0, max_value=1.0),
        scale=st.floats(min_value=0.0, max_value=3.0),
    )
    def test_linear_in_degradation(self, eta, scale):
        layout = build_assembly(grid_cells(2, 3), pitch=0.5)
        f_nom = np.full((6, 4), 2.45)
        half = set_rotor_eta(healthy_state(6), 2, 3, 0.5 + 0.5 * eta)
        full = set_rotor_eta(healthy_state(6), 2, 3, eta)
        l_half = wrench_loss(layout, half, f_nom)
        l_full = wrench_loss(layout, full, f_nom)
        assert l_full.d_force == pytest.approx(2.0 * l_half.d_force, abs=1e-12)
        np.testing.assert_allclose(
            l_full.d_moment, 2.0 * l_half.d_moment, atol=1e-12
        )
        l_scaled = wrench_loss(layout, full, scale * f_nom)
        assert l_scaled.d_force == pytest.approx(scale * l_full.d_force, abs=1e-12)
