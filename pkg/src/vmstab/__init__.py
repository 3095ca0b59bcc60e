"""Linear stability of radially symmetric Vlasov-Maxwell equilibria in a disk."""
__version__ = "0.1.0"

from .discretization import build_grid, build_velocity_quad
from .equilibrium import solve_equilibrium, solve_psi0_dirichlet, vacuum_equilibrium
from .operators import assemble_L, minimized_J, smallest_L_eig
from .profiles import from_name
from .stability import (build_psi_star, find_lambda_star, reconstruct_mode, sweep_K,
                        theorem_certificates, verdict)

__all__ = ["build_grid", "build_velocity_quad", "solve_equilibrium", "solve_psi0_dirichlet",
           "vacuum_equilibrium", "assemble_L", "minimized_J", "smallest_L_eig", "from_name",
           "build_psi_star", "find_lambda_star", "reconstruct_mode", "sweep_K",
           "theorem_certificates", "verdict"]
