"""From a negative kappa0 to an actual growing mode.

kappa(lambda), the lowest eigenvalue of the lambda-dependent operator, is
negative at lambda = 0 and positive for large lambda.  Its root lambda* is
the growth rate; the eigenvector there is the magnetic potential of the
mode, and the electric potential and distribution follow from it.  The
residual table checks the mode against the linearised equations.
"""
from vmstab import build_grid, find_lambda_star, reconstruct_mode, solve_equilibrium
from vmstab.profiles import even_p, scale_momentum

eq = solve_equilibrium(scale_momentum(even_p(), 8.0), 0.0, 0.0, build_grid(32))
curve = find_lambda_star(eq, points=12)
print("kappa0 = %.6f" % curve.kappa0)
print("%12s %14s" % ("lambda", "kappa"))
for lam, k in curve.rows():
    print("%12.6g %14.6f" % (lam, k))
print("growth rate lambda* = %.8f  (|kappa| = %.1e, %d eigen-solves)"
      % (curve.lambda_star, abs(curve.kappa_star), curve.evaluations))

mode = reconstruct_mode(eq, curve.lambda_star, curve.psi_star)
print("\nmode accepted:", mode.accepted)
for key in ("maxwell_poisson", "maxwell_ampere", "jr_identity", "specularity",
            "invariant_relative", "casimir", "vlasov_fd"):
    print("  %-20s %.3e" % (key, mode.residuals[key]))
