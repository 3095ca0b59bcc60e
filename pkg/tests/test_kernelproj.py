import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmstab import profiles as P
from vmstab.discretization import build_grid
from vmstab.equilibrium import solve_equilibrium
from vmstab.kernelproj import (ProjectionError, project_q_limit, project_radial_homogeneous,
                               project_vtheta_homogeneous, project_vtheta_purely_magnetic,
                               projection, strategy_for)


@pytest.fixture(scope="module")
def homogeneous_eq():
    return solve_equilibrium(P.maxwellian(), 0.0, 0.0, build_grid(16))


def smooth(r, vr, vth):
    return np.exp(-r * r) * (1 + 0.5 * r * vr) + 0.3 * r * vth / np.sqrt(1 + vr**2 + vth**2)


def other(r, vr, vth):
    return np.cos(2 * r * r) + 0.2 * (vr**2 + vth**2) / (1 + vr**2 + vth**2)


def test_strategy_dispatch(homogeneous_eq, magnetic_eq, general_eq):
    assert strategy_for(homogeneous_eq) == "homogeneous-explicit"
    assert strategy_for(magnetic_eq) == "purely-magnetic-explicit"
    assert strategy_for(general_eq) == "q-lambda-limit"


def test_closed_forms_refuse_other_kinds(magnetic_eq, general_eq):
    with pytest.raises(ProjectionError):
        project_vtheta_homogeneous(np.ones(32), equilibrium=magnetic_eq)
    with pytest.raises(ProjectionError):
        project_vtheta_purely_magnetic(general_eq, np.ones(32))


@pytest.mark.parametrize("sign", [1, -1])
def test_projection_is_idempotent_and_self_adjoint(general_eq, sign):
    pr = projection(general_eq, sign)
    x, y = pr.sample(smooth), pr.sample(other)
    Px = pr.apply(x)
    np.testing.assert_allclose(pr.apply(Px), Px, atol=1e-14)
    assert pr.inner(Px, y) == pytest.approx(pr.inner(x, pr.apply(y)), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(lam=st.floats(1e-300, 1e3))
def test_q_lambda_is_a_contraction_fixing_invariants(general_eq, lam):
    pr = projection(general_eq, 1)
    x = pr.sample(smooth)
    assert pr.norm(pr.q(lam, x)) <= pr.norm(x) * (1 + 1e-12)
    inv = pr.invariant_cells(lambda e, p: np.exp(-e) * (1 + p))
    np.testing.assert_allclose(pr.q(lam, inv), inv, rtol=1e-12, atol=1e-14)


def test_q_limit_reaches_the_projection(general_eq):
    rep = project_q_limit(general_eq, -1, smooth, lambda_sequence=(1.0, 0.1, 0.01, 1e-3, 1e-4, 1e-5))
    assert rep.converged
    assert rep.gap < 1e-3
    assert rep.cauchy[-1] < rep.cauchy[0]


def test_q_limit_rejects_bad_sequences(general_eq):
    with pytest.raises(ValueError):
        project_q_limit(general_eq, 1, smooth, lambda_sequence=(0.1, 1.0))


def test_radial_projection_is_disk_average(homogeneous_eq):
    g = homogeneous_eq.grid
    # the midpoint rule on cells of r^3 misses the exact 1/2 by 1/(4 n^2)
    val = project_radial_homogeneous(g.nodes**2, g, homogeneous_eq)
    assert val == pytest.approx(0.5 - 0.25 / g.n**2, rel=1e-13)


def test_vtheta_closed_form_matches_orbit_average_for_linear_psi(homogeneous_eq):
    # for psi = r the closed form is the exact orbit average of vth_hat psi
    g = homogeneous_eq.grid
    pr = projection(homogeneous_eq, 1)
    cf = project_vtheta_homogeneous(g.nodes, g, homogeneous_eq)
    cells = pr.sample(lambda r, vr, vth: r * vth / np.sqrt(1 + vr**2 + vth**2))
    ref = pr.sample(cf)
    err = pr.norm(pr.apply(cells) - ref) / pr.norm(ref)
    assert err < 1e-3
