"""Stability along a momentum-scaled family with no equilibrium fields.

even_p puts more particles at positive than at negative angular momentum
for the + species, mirrored for the - species.  Stretching the profile in p
(K > 1) strengthens the p-derivative until the lowest eigenvalue kappa0 of
the operator turns negative.  The psi_* form is the explicit test-function
bound: it crosses later, so it certifies instability only for larger K.
"""
from vmstab import sweep_K
from vmstab.profiles import even_p

res = sweep_K(even_p(), "momentum", [0.5, 1, 2, 4, 6, 8, 12, 16, 20], n=32)
print("%6s %14s %14s  %s" % ("K", "kappa0", "psi_* form", "verdict"))
for (K, k0, form, _, _), v in zip(res.rows(), res.verdicts):
    print("%6.2f %14.6f %14.6f  %s" % (K, k0, form, v))
print("kappa0 changes sign at K* = %.4f" % res.K_star_kappa)
print("psi_* form changes sign at K* = %.4f" % res.K_star_form)
print("Rayleigh bound kappa0 <= form/||psi_*||^2 holds everywhere:", res.rayleigh_ok)
