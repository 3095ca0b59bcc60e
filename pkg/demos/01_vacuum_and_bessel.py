"""Vacuum: with no plasma the operator is the Dirichlet radial Laplacian.

Its lowest eigenvalue is j11^2, the square of the first zero of J_1, so the
vacuum run doubles as a grid-convergence check of the discretisation.
"""
import numpy as np
from scipy.special import jn_zeros

from vmstab import assemble_L, build_grid, smallest_L_eig, vacuum_equilibrium
from vmstab.profiles import vacuum

j11 = jn_zeros(1, 1)[0]
print("reference j11^2 = %.10f" % j11**2)
print("%6s %16s %12s %8s" % ("n", "kappa0", "rel. error", "ratio"))
prev = None
for n in (16, 32, 64, 128):
    g = build_grid(n)
    k0, psi = smallest_L_eig(assemble_L(vacuum_equilibrium(vacuum(), g)))
    err = abs(k0 - j11**2) / j11**2
    print("%6d %16.10f %12.3e %8s" % (n, k0, err, "" if prev is None else "%.2f" % (prev / err)))
    prev = err

# the eigenvector is J_1(j11 r) up to normalisation
from scipy.special import j1
ref = j1(j11 * g.nodes)
ref /= g.norm(ref)
print("max |psi - J_1(j11 r)| at n=128: %.2e" % np.max(np.abs(psi - ref)))
