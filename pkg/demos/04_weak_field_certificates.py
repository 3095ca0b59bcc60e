"""Certificates against the computed spectrum in a weak magnetic field.

The sufficient conditions for stability are checked on their own (a
hypothesis on the profile, a number compared to a threshold) and then
against the sign of kappa0 computed from the assembled operator.
"""
from vmstab import build_grid, solve_equilibrium, verdict
from vmstab.profiles import odd_damped

for beta in (0.02, 0.05, 0.1):
    eq = solve_equilibrium(odd_damped(), 0.0, beta, build_grid(32))
    rep = verdict(eq)
    print("beta = %.2f  sup|psi0| = %.4f  kappa0 = %.5f  margin = %.2e  -> %s"
          % (beta, abs(eq.psi0).max(), rep.kappa0, rep.margin, rep.verdict))
    for c in rep.certificates:
        print("    " + c.line())
