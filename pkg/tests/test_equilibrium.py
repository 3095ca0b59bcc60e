import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmstab import profiles as P
from vmstab.discretization import build_grid, build_velocity_quad, laplacian_r_dirichlet
from vmstab.equilibrium import (EquilibriumError, moments, newton_solve, solve_equilibrium,
                                solve_psi0_dirichlet, vacuum_equilibrium, volterra_residual)


@pytest.fixture(scope="module")
def grid16():
    return build_grid(16)


def test_picard_and_newton_agree(grid16):
    prof = P.maxwellian()
    eq = solve_equilibrium(prof, 0.1, 0.1, grid16, tol=1e-12)
    phi, psi = newton_solve(prof, 0.1, 0.1, grid16, eq.quad)
    assert np.max(np.abs(phi - eq.phi0)) < 1e-10
    assert np.max(np.abs(psi - eq.psi0)) < 1e-10
    assert eq.kind == "general"


def test_zero_data_give_homogeneous(grid16):
    eq = solve_equilibrium(P.maxwellian(), 0.0, 0.0, grid16)
    assert eq.kind == "homogeneous"
    assert not np.any(eq.B0) and not np.any(eq.E0r)


def test_beta_only_gives_magnetic(grid16):
    eq = solve_equilibrium(P.maxwellian(), 0.0, 0.2, grid16)
    assert eq.kind == "magnetic"
    assert volterra_residual(eq) < 1e-9
    assert eq.contraction < 1


def test_fields_match_potentials():
    # E = -phi' and B = (r psi)'/r, checked by differences between nodes
    g = build_grid(64)
    eq = solve_equilibrium(P.maxwellian(), 0.2, 0.3, g)
    r, h = g.nodes, g.h
    mid = 0.5 * (r[1:] + r[:-1])
    dphi = np.diff(eq.phi0) / h
    E_mid = 0.5 * (eq.E0r[1:] + eq.E0r[:-1])
    assert np.max(np.abs(E_mid + dphi)) < 1e-3 * (1 + np.max(np.abs(dphi)))
    drpsi = np.diff(r * eq.psi0) / h / mid
    B_mid = 0.5 * (eq.B0[1:] + eq.B0[:-1])
    assert np.max(np.abs(B_mid - drpsi)) < 1e-3 * (1 + np.max(np.abs(drpsi)))


def test_dirichlet_solution_satisfies_discrete_equation(grid16):
    eq = solve_psi0_dirichlet(P.skew_p(), grid16)
    L = laplacian_r_dirichlet(grid16).matrix
    cur = moments(eq.profile, eq.quad, grid16.nodes, np.zeros(16), eq.psi0)[1]
    assert np.max(np.abs(L @ eq.psi0 - cur)) < 1e-8
    assert eq.kind == "magnetic"
    assert np.any(eq.psi0)


def test_divergent_picard_is_reported(grid16):
    prof = P.scale_amplitude(P.maxwellian(), 60.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(EquilibriumError, match="contraction|overflowed"):
            solve_equilibrium(prof, 1.0, 1.0, grid16, max_iter=200)


def test_vacuum_equilibrium_is_zero(grid16):
    eq = vacuum_equilibrium(P.vacuum(), grid16)
    assert eq.kind == "homogeneous"
    assert not np.any(eq.phi0)


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0.0, 1.0), name=st.sampled_from(["maxwellian", "even_p", "odd_damped"]))
def test_symmetric_species_carry_no_moments(r, name):
    prof = P.from_name(name)
    quad = build_velocity_quad(prof)
    h, g = moments(prof, quad, r, 0.0, 0.0)
    assert h[0] == 0.0 and g[0] == 0.0
