import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from vmstab import profiles as P
from vmstab.discretization import build_grid
from vmstab.equilibrium import solve_equilibrium, vacuum_equilibrium
from vmstab.operators import _dirichlet_form, assemble_L, smallest_L_eig
from vmstab.stability import (build_psi_star, casimir_K, find_lambda_star, invariant_fn, kappa,
                              reconstruct_mode, sweep_K, theorem_certificates, verdict)


@pytest.fixture(scope="module")
def unstable_ops(homogeneous_unstable):
    return assemble_L(homogeneous_unstable, 0.0)


@pytest.fixture(scope="module")
def curve(homogeneous_unstable):
    return find_lambda_star(homogeneous_unstable, points=8, tol=1e-8)


def test_psi_star_normalised_and_antisymmetric():
    g = build_grid(32)
    ps = build_psi_star(g)
    assert ps @ _dirichlet_form(g) @ ps == pytest.approx(1.0)
    np.testing.assert_allclose(ps, -ps[::-1], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=32, max_size=32).filter(lambda v: max(map(abs, v)) > 1e-3))
def test_kappa_bounds_every_rayleigh_quotient(unstable_ops, vals):
    g = unstable_ops.grid
    psi = np.array(vals)
    k0 = kappa(unstable_ops)[0]
    assert g.inner(unstable_ops.L @ psi, psi) / g.inner(psi, psi) >= k0 - 1e-9 * abs(k0)


def test_lambda_star_matches_independent_root(homogeneous_unstable, curve):
    assert curve.kappa0 < 0 and curve.positive_at_top
    a, b = curve.bracket
    k = lambda lam: smallest_L_eig(assemble_L(homogeneous_unstable, lam))[0]
    root = brentq(k, max(a, 1e-12), b, xtol=1e-12)
    assert abs(curve.kappa_star) <= 1e-8
    assert curve.lambda_star == pytest.approx(root, rel=1e-6)


def test_growing_mode_on_small_grid(homogeneous_unstable, curve):
    mode = reconstruct_mode(homogeneous_unstable, curve.lambda_star, curve.psi_star)
    assert mode.accepted, mode.rejections
    assert mode.lambda_star == curve.lambda_star
    assert homogeneous_unstable.grid.norm(mode.psi) == pytest.approx(1.0)


def test_galerkin_residuals_exact_off_the_mode(general_eq):
    # charge and radial-current identities hold for any psi, not only at a mode
    g = general_eq.grid
    mode = reconstruct_mode(general_eq, 1.0, np.sin(np.pi * g.nodes), vlasov_samples=0)
    res = mode.residuals
    assert res["maxwell_poisson"] < 1e-12
    assert res["jr_identity"] < 1e-12
    assert res["specularity"] < 1e-6
    assert res["phi_mean"] < 1e-12
    # Ampere and the eigen-equation fail: this psi is not a mode
    assert not mode.accepted
    assert any(r.startswith("maxwell_ampere") for r in mode.rejections)


def test_casimir_rejects_non_invariants(magnetic_eq):
    psi = np.ones(32)
    mode = reconstruct_mode(magnetic_eq, 0.5, psi, vlasov_samples=0)
    with pytest.raises(ValueError, match="not constant"):
        casimir_K(magnetic_eq, mode.f, psi, lambda r, vr, vth, s: r * vr)
    val = casimir_K(magnetic_eq, mode.f, psi, invariant_fn(magnetic_eq, lambda e, p: e), sign=1)
    assert np.isfinite(val)


def test_vacuum_verdict_and_report():
    g = build_grid(32)
    rep = verdict(vacuum_equilibrium(P.vacuum(), g))
    assert rep.verdict == "stable"
    assert rep.certificates[0].name == "vacuum" and rep.certificates[0].consistent
    text = rep.to_text()
    assert text.startswith("verdict = stable\n")
    assert "n_reference = 16" in text


def test_certificates_on_weak_magnetic_field(magnetic_eq):
    k0 = kappa(assemble_L(magnetic_eq, 0.0))[0]
    certs = {c.name: c for c in theorem_certificates(magnetic_eq, k0)}
    c = certs["nonpositive-p-mu_p"]
    assert c.hypothesis and c.conclusion == "stable" and c.consistent
    assert k0 > 0


def test_momentum_certificate_is_sufficient_only(homogeneous_unstable, unstable_ops):
    # at K = 8 kappa0 < 0 but the psi_* form is still positive: no conclusion
    k0 = kappa(unstable_ops)[0]
    c = {c.name: c for c in theorem_certificates(homogeneous_unstable, k0)}["momentum-lower-bound"]
    assert k0 < 0 and c.value > 0 and c.conclusion == "none"
    # well past the form crossing it certifies the instability
    eq = solve_equilibrium(P.scale_momentum(P.even_p(), 20.0), 0.0, 0.0, build_grid(32))
    k0 = kappa(assemble_L(eq, 0.0))[0]
    c = {c.name: c for c in theorem_certificates(eq, k0)}["momentum-lower-bound"]
    assert c.hypothesis and c.conclusion == "unstable" and c.consistent


def test_small_sweep_rows():
    res = sweep_K(P.even_p(), "momentum", [1.0, 16.0], n=16, locate=())
    assert len(res.rows()) == 2
    assert res.rayleigh_ok
    assert res.verdicts == ["stable", "unstable"]


@pytest.mark.parametrize("kw", [{"scaling": "shift"}, {"mode": "electric"}])
def test_sweep_argument_checks(kw):
    args = dict(profile=P.even_p(), scaling="momentum", K_list=[1.0], n=16)
    args.update(kw)
    with pytest.raises(ValueError):
        sweep_K(**args)
