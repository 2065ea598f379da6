import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attenmfg.embedding import (
    assemble_features,
    build_demand_penalty,
    build_maintenance_cost,
    build_throughput_cube,
    debug_dump,
)
from attenmfg.verification import simulate_throughput

from conftest import make_instance, random_instances


# -- maintenance cost x ------------------------------------------------------


def test_x_hand_evaluation():
    inst = make_instance([[2]], [[7, 8, 9]], np.zeros((1, 3)), cf=50.0, idle=1.0)
    assert build_maintenance_cost(inst).tolist() == [[8.0, 51.0, 52.0]]


def test_x_without_failures_or_idle_penalty_is_dmc():
    dmc = [[3.0, 4.5, 6.0, 1.0], [2.0, 2.0, 9.0, 4.0]]
    inst = make_instance([[5, 5]], dmc, np.zeros((2, 4)), idle=0.0)
    assert np.array_equal(build_maintenance_cost(inst), np.array(dmc))


def test_x_identical_scenarios_average_to_single():
    one = make_instance([[2]], [[7, 8, 9]], np.zeros((1, 3)), cf=50.0)
    two = make_instance([[2], [2]], [[7, 8, 9]], np.zeros((1, 3)), cf=50.0)
    assert np.array_equal(build_maintenance_cost(one), build_maintenance_cost(two))


def test_x_mixed_scenarios_average():
    inst = make_instance([[2], [4]], [[7, 8, 9]], np.zeros((1, 3)), cf=50.0, idle=1.0)
    assert build_maintenance_cost(inst).tolist() == [[8.0, (51 + 9) / 2, (52 + 10) / 2]]


# -- throughput cube -----------------------------------------------------------


def _cube_row(F, t, T=4, P=10.0):
    inst = make_instance([[F]], np.zeros((1, T)), np.zeros((1, T)), limit=P)
    return build_throughput_cube(inst).lam[0, 0, t - 1].tolist()


def test_cube_maintain_before_failure():
    assert _cube_row(3, 1) == [0, 10, 10, 10]


def test_cube_maintain_after_failure():
    assert _cube_row(3, 3) == [10, 10, 0, 10]


def test_cube_no_failure():
    for t in range(1, 5):
        expected = [10.0] * 4
        expected[t - 1] = 0.0
        assert _cube_row(5, t) == expected


def test_cube_late_maintenance_keeps_pre_failure_output():
    assert _cube_row(2, 4) == [10, 0, 0, 0]


def test_cube_matches_state_simulation_on_random_instances():
    insts = random_instances(30, seed=3, names=("D_L2P4M6_J2", "D_L2P5M6_J2", "D_L1P3M3_J1"))
    for inst in insts:
        assert np.array_equal(build_throughput_cube(inst).lam, simulate_throughput(inst))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5).flatmap(lambda T: st.tuples(
    st.just(T),
    st.lists(st.lists(st.integers(1, T + 1), min_size=2, max_size=2), min_size=1, max_size=3),
    st.floats(0.0, 50.0),
)))
def test_cube_matches_simulation_and_is_bounded(args):
    T, failure, P = args
    failure = np.array(failure)
    inst = make_instance(failure, np.zeros((2, T)), np.zeros((2, T)), limit=P)
    lam = build_throughput_cube(inst).lam
    assert np.array_equal(lam, simulate_throughput(inst))
    assert np.all((lam >= 0) & (lam <= P))


# -- demand penalty y ----------------------------------------------------------


def test_y_hand_trace():
    inst = make_instance([[2]], np.zeros((1, 3)), np.full((1, 3), 8.0), limit=10.0, demand_pen=2.0)
    y = build_demand_penalty(inst, build_throughput_cube(inst))
    assert y[0, 0] == 16.0 and y[0, 2] == 32.0
    assert y[0, 1] == 16.0


def test_y_zero_demand():
    inst = make_instance([[2, 3]], np.zeros((2, 3)), np.zeros((2, 3)))
    assert not build_demand_penalty(inst, build_throughput_cube(inst)).any()


def test_y_no_production():
    D = np.array([[1.0, 2.0, 4.0]])
    inst = make_instance([[2]], np.zeros((1, 3)), D, limit=0.0, demand_pen=3.0)
    y = build_demand_penalty(inst, build_throughput_cube(inst))
    assert np.array_equal(y, np.full((1, 3), 3.0 * 7.0))


# -- assembled features --------------------------------------------------------


def test_feature_shape_and_idle_row():
    inst = make_instance([[2, 4]], [[1, 2, 3], [4, 5, 6]], np.ones((2, 3)), J=2, sites=[1, 2])
    f = assemble_features(inst)
    assert f.chi.shape == f.y.shape == (3, 6)
    assert f.n_rows == 3 and f.n_steps == 6 and f.idle_row == 2
    assert not f.chi[2].any() and not f.y[2].any()
    assert f.site.tolist() == [1, 2, 0]
    assert np.array_equal(f.chi[:, 0::2], f.chi[:, 1::2])
    assert np.array_equal(f.y[:, 0::2], f.y[:, 1::2])
    assert f.time_frac.tolist() == pytest.approx([1 / 3, 1 / 3, 2 / 3, 2 / 3, 1, 1])
    assert f.slot_frac.tolist() == [0, 0.5, 0, 0.5, 0, 0.5]


def test_features_pure_and_finite():
    for inst in random_instances(8, seed=9):
        a, b = assemble_features(inst), assemble_features(inst)
        assert np.array_equal(a.chi, b.chi) and np.array_equal(a.y, b.y)
        assert np.isfinite(a.chi).all() and np.isfinite(a.y).all()
        J = inst.J
        for j in range(J):
            assert np.array_equal(a.chi[:, j::J], a.chi[:, ::J])


def test_debug_dump_round_trips_values():
    import json
    inst = make_instance([[2]], [[7, 8, 9]], np.full((1, 3), 8.0), cf=50.0)
    d = json.loads(debug_dump(inst))
    assert d["x"] == [[8.0, 51.0, 52.0]]
    assert len(d["lam"][0][0]) == 3
