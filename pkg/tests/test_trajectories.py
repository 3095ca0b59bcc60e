import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import chord_period
from vmstab.trajectories import (FieldModel, OrbitTable, PhasePoint, check_specularity,
                                 integrate, invariants, orbit_bounds, q_lambda,
                                 q_lambda_points, reflect)

FREE = FieldModel.zero()


def smooth(r, vr, vth):
    # smooth in Cartesian phase space
    return np.cos(r * r) + 0.3 * r * vr + 0.2 * r * vth / np.sqrt(1 + vr**2 + vth**2)


def test_reflect_flips_radial_velocity():
    assert reflect(PhasePoint(1.0, 0.4, -0.2)) == PhasePoint(1.0, -0.4, -0.2)
    with pytest.raises(ValueError):
        reflect(PhasePoint(0.5, 0.4, 0.1))


@pytest.mark.parametrize("bad", [(-0.1, 0, 0), (1.5, 0, 0), (0.5, math.nan, 0)])
def test_phase_point_validation(bad):
    with pytest.raises(ValueError):
        PhasePoint(*bad)


@settings(max_examples=25, deadline=None)
@given(speed=st.floats(0.2, 5.0), frac=st.floats(-0.95, 0.95))
def test_free_orbit_period_is_chord_period(speed, frac):
    # orbit through r = 0.99 with v_theta chosen so |p| / |v| = 0.99 |frac|
    r0 = 0.99
    vth = frac * speed
    vr = math.sqrt(speed**2 - vth**2)
    e, p = invariants(FREE, 1, r0, vr, vth)
    lo, hi = orbit_bounds(FREE, 1, e, p, r0)
    tab = OrbitTable(FREE, 1, e, p, lo, hi)
    assert tab.T[0] == pytest.approx(chord_period(float(p), speed), rel=1e-9)


def test_free_path_bounces_and_conserves():
    traj = integrate(None, 1, PhasePoint(0.3, 1.0, 0.5), 20.0)
    assert len(traj.events) >= 3
    assert traj.e_drift < 1e-9 and traj.p_drift < 1e-9
    r, _, _ = traj.state(np.linspace(0, 20, 200))
    assert np.all(r <= 1 + 1e-9)


def test_direct_and_orbit_q_lambda_agree(magnetic_eq, rng):
    pts = [(rng.uniform(0.1, 0.9), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5))
           for _ in range(4)]
    r, vr, vth = map(np.array, zip(*pts))
    for sign in (1, -1):
        fast = q_lambda_points(magnetic_eq, sign, 0.7, smooth, r, vr, vth)
        for i, pt in enumerate(pts):
            slow = q_lambda(magnetic_eq, sign, 0.7, smooth, PhasePoint(*pt))
            assert fast[i] == pytest.approx(slow, abs=1e-7)


@settings(max_examples=15, deadline=None)
@given(lam=st.floats(0.0, 20.0), r=st.floats(0.05, 0.95), vr=st.floats(0.1, 2),
       vth=st.floats(-2, 2), flip=st.booleans())
def test_q_lambda_reproduces_constants(magnetic_eq, lam, r, vr, vth, flip):
    # particles at rest sit on zero-period orbits and are left out
    vr = -vr if flip else vr
    one = lambda a, b, c: np.ones_like(a)
    val = q_lambda_points(magnetic_eq, 1, lam, one, r, vr, vth)
    assert val[0] == pytest.approx(1.0, abs=1e-10)


def test_list_of_functions_shares_the_path(magnetic_eq):
    r, vr, vth = np.array([0.3, 0.6]), np.array([0.5, -0.2]), np.array([0.1, 0.8])
    two = q_lambda_points(magnetic_eq, -1, 0.5, [smooth, lambda a, b, c: 2 * smooth(a, b, c)],
                          r, vr, vth)
    one = q_lambda_points(magnetic_eq, -1, 0.5, smooth, r, vr, vth)
    np.testing.assert_allclose(two, np.vstack([one, 2 * one]), rtol=1e-14)


def test_transport_makes_any_function_specular(magnetic_eq):
    even = lambda r, vr, vth: r**2 + vr**2 + vth
    odd = lambda r, vr, vth: vr + 0 * r
    rep = check_specularity(even, magnetic_eq, count=4, tol=1e-6)
    assert rep.passed and rep.wall_defect == 0.0
    rep = check_specularity(odd, magnetic_eq, sign=-1, count=4, tol=1e-6)
    assert rep.passed and rep.wall_defect > 0.1
