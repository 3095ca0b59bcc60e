import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import J11, maxwell_mass
from vmstab import profiles as P
from vmstab.discretization import build_grid, weighted_symmetry_defect
from vmstab.equilibrium import solve_equilibrium, vacuum_equilibrium
from vmstab.operators import (AssemblyError, assemble_A1, assemble_L, continuity_modulus,
                              density_of_mu_e, minimized_J, nonlocal_norms, projection_term,
                              smallest_L_eig, strong_limit)


@pytest.fixture(scope="module")
def ops0(general_eq):
    return assemble_L(general_eq, 0.0)


def test_vacuum_L_is_the_dirichlet_laplacian():
    g = build_grid(64)
    k, psi = smallest_L_eig(assemble_L(vacuum_equilibrium(P.vacuum(), g)))
    assert abs(k - J11**2) / J11**2 < 1e-3
    assert g.norm(psi) == pytest.approx(1.0)
    assert np.all(psi > 0)


def test_density_of_maxwellian(grid32):
    # both species of e^-<v> with no fields: twice 4 pi / e per node
    eq = solve_equilibrium(P.maxwellian(), 0.0, 0.0, grid32)
    np.testing.assert_allclose(density_of_mu_e(eq), 2 * maxwell_mass(), rtol=1e-9)


def test_A1_annihilates_constants(ops0):
    assert np.max(np.abs(ops0.A1 @ np.ones(ops0.grid.n))) < 1e-10


@pytest.mark.parametrize("lam", [0.0, 0.5, 3.0])
def test_operators_symmetric_at_each_lambda(general_eq, lam):
    ops = assemble_L(general_eq, lam)
    w = ops.grid.weights
    for name in ("A1", "A2", "L"):
        assert weighted_symmetry_defect(getattr(ops, name).matrix, w) < 1e-12
    assert ops.diagnostics["Bstar_adjoint_defect"] < 1e-12


def test_grid_mismatch_is_rejected(general_eq):
    with pytest.raises(AssemblyError):
        assemble_A1(general_eq, 0.0, grid=build_grid(16))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=32, max_size=32).filter(lambda v: any(v)))
def test_projection_term_nonnegative(general_eq, vals):
    assert projection_term(general_eq, np.array(vals)) >= -1e-14


def test_minimized_J_needs_lambda_zero(general_eq):
    with pytest.raises(ValueError):
        minimized_J(general_eq, np.ones(32), ops=assemble_L(general_eq, 1.0))
    with pytest.raises(ValueError):
        minimized_J(general_eq, np.ones(5))


def test_minimized_J_completes_the_quadratic_form(general_eq, ops0, rng):
    # <L psi, psi> = <A2 psi, psi> + <B* A1^-1 B psi, psi>; minimized_J carries
    # the coupling plus the projection part of A2
    g = general_eq.grid
    psi = rng.standard_normal(g.n)
    coupling = minimized_J(general_eq, psi, ops0) - projection_term(general_eq, psi)
    assert g.inner(ops0.L @ psi, psi) == pytest.approx(
        g.inner(ops0.A2 @ psi, psi) + coupling, rel=1e-10)


def test_kinetic_norms_below_density_bound(general_eq):
    nrm = nonlocal_norms(general_eq)
    for key in ("A1", "A2", "B"):
        assert nrm[key] <= nrm["bound"] * (1 + 1e-9)


def test_strong_limit_shrinks(general_eq, rng):
    psis = [rng.standard_normal(32) for _ in range(2)]
    tab = strong_limit(general_eq, psis, lambdas=(0.3, 0.1, 0.03))
    assert np.all(np.diff(tab, axis=1) < 0)


def test_continuity_modulus_holds(general_eq, rng):
    fit = continuity_modulus(general_eq, [rng.standard_normal(32)])
    assert fit.holds and fit.C > 0


def test_continuity_range_is_bounded(general_eq):
    with pytest.raises(ValueError):
        continuity_modulus(general_eq, [np.ones(32)], check_lambdas=(0.5, 5.0))
