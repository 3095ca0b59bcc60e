"""Discrete A1, A2, B, B* and L on the radial grid.

All operators are assembled as Galerkin forms W M (W = disk weights), from
which M = W^-1 (W M).  The kinetic terms are Gram forms on the orbit grid:

    W A1 = S_N + sum_s  I_phi' D (1 - Q) I_phi
    W A2 = S_D + lam^2 W + sum_s (M_loc + J_psi' D Q J_psi)
    W B  =       sum_s  I_phi' D (1 - Q) J_psi
    B*   = W^-1 (W B)'

with D = |mu_e| times the cell weight and Q the discrete trajectory
average (the orbit average at lam = 0).
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .discretization import (RadialOperator, _flux_matrix, _zero_mean_basis,
                             laplacian_r_dirichlet, weighted_symmetry_defect)
from .kernelproj import orbit_space, strategy_for

SYMMETRY_GATE = 1e-4


class AssemblyError(RuntimeError):
    pass


def _dirichlet_form(grid):
    return grid.weights[:, None] * laplacian_r_dirichlet(grid).matrix


def _space(equilibrium, proj):
    """Resolve ``proj`` (OrbitSpace, ProjectionOperator or None)."""
    if proj is None:
        return orbit_space(equilibrium)
    return getattr(proj, "space", proj)


def _check_grid(equilibrium, grid):
    if grid is not None and grid.n != equilibrium.grid.n:
        raise AssemblyError("operators live on the equilibrium grid (n=%d), got n=%d"
                            % (equilibrium.grid.n, grid.n))
    return equilibrium.grid


def _kinetic(space, lam, left, right, complement):
    return sum(s.gram(lam, left, right, complement) for s in space.species)


def _finish(WM, grid, lam, bc, name, diag):
    defect = weighted_symmetry_defect(WM / grid.weights[:, None], grid.weights)
    diag["symmetry_defect_" + name] = defect
    if defect > SYMMETRY_GATE:
        raise AssemblyError("%s symmetry defect %.2e exceeds %.0e" % (name, defect, SYMMETRY_GATE))
    WM = 0.5 * (WM + WM.T)
    return RadialOperator(WM / grid.weights[:, None], bc, lam)


def assemble_A1(equilibrium, lam=0.0, grid=None, quad=None, proj=None, diag=None):
    """-Delta (Neumann) plus sum_s int |mu_e| (1 - Q) . dv."""
    grid = _check_grid(equilibrium, grid)
    diag = {} if diag is None else diag
    WA = _flux_matrix(grid)
    if not equilibrium.profile.is_zero:
        WA = WA + _kinetic(_space(equilibrium, proj), lam, "phi", "phi", True)
    return _finish(WA, grid, lam, "neumann", "A1", diag)


def assemble_A2(equilibrium, lam=0.0, grid=None, quad=None, proj=None, diag=None):
    """-Delta_r + lam^2 (Dirichlet), local mu_p moment and the Q term."""
    grid = _check_grid(equilibrium, grid)
    diag = {} if diag is None else diag
    WA = _dirichlet_form(grid) + lam * lam * np.diag(grid.weights)
    if not equilibrium.profile.is_zero:
        space = _space(equilibrium, proj)
        WA = WA + sum(s.M_loc for s in space.species)
        WA = WA + _kinetic(space, lam, "vpsi", "vpsi", False)
    return _finish(WA, grid, lam, "dirichlet", "A2", diag)


def _weighted_B(equilibrium, lam, grid, proj):
    if equilibrium.profile.is_zero:
        return np.zeros((grid.n, grid.n))
    # the species charge enters twice (in f and in the charge density), so
    # the sum carries no sign; for mirrored species the v_theta weights cancel
    return _kinetic(_space(equilibrium, proj), lam, "phi", "vpsi", True)


def assemble_B(equilibrium, lam=0.0, grid=None, quad=None, proj=None, diag=None):
    """psi -> -sum_s int mu_e (1 - Q)(vth_hat psi) dv (zero-average range)."""
    grid = _check_grid(equilibrium, grid)
    WB = _weighted_B(equilibrium, lam, grid, proj)
    if diag is not None:
        col = np.abs(np.ones(grid.n) @ WB).max() if WB.size else 0.0
        diag["B_column_average"] = float(col / np.pi)
    return RadialOperator(WB / grid.weights[:, None], "neumann<-dirichlet", lam)


def assemble_Bstar(equilibrium, lam=0.0, grid=None, quad=None, proj=None, B=None):
    """Adjoint of B in the disk inner product."""
    grid = _check_grid(equilibrium, grid)
    WB = (grid.weights[:, None] * B.matrix) if B is not None else \
        _weighted_B(equilibrium, lam, grid, proj)
    return RadialOperator(WB.T / grid.weights[:, None], "dirichlet<-neumann", lam)


@dataclass(frozen=True)
class OperatorSet:
    lam: float
    grid: object
    A1: RadialOperator
    A2: RadialOperator
    B: RadialOperator
    Bstar: RadialOperator
    L: RadialOperator
    diagnostics: dict = field(default_factory=dict)

    def weighted(self, name):
        return self.grid.weights[:, None] * getattr(self, name).matrix

    def solve_A1(self, rhs):
        """phi with A1 phi = rhs, phi of zero disk average (rhs deflated first)."""
        return _restricted_solve(self.weighted("A1"), self.grid,
                                 self.grid.weights * self.grid.deflate(rhs))

    def dump(self, path, name="L"):
        """Dense row-major text dump with a header."""
        M = getattr(self, name).matrix
        header = "n=%d lambda=%.17g operator=%s bc=%s" % (
            self.grid.n, self.lam, name, getattr(self, name).bc)
        np.savetxt(path, M, header=header)


def _restricted_solve(WA1, grid, wrhs):
    """Solve W A1 phi = wrhs on zero-mean phi; wrhs must sum to zero."""
    Z = _zero_mean_basis(grid)
    K = Z.T @ WA1 @ Z
    try:
        c = cho_factor(0.5 * (K + K.T))
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(K)
        raise AssemblyError("restricted A1 solve failed (condition %.2e)" % cond) from exc
    return Z @ cho_solve(c, Z.T @ wrhs)


def assemble_L(equilibrium, lam=0.0, grid=None, quad=None, proj=None):
    """All operators at one lambda; L = A2 + B* A1^-1 B."""
    grid = _check_grid(equilibrium, grid)
    diag = {"lambda": float(lam), "strategy": strategy_for(equilibrium),
            "evaluation": "orbit-average" if lam == 0 else "trajectory-average"}
    if not equilibrium.profile.is_zero:
        space = _space(equilibrium, proj)
        diag["orbits"] = space.orbit_count
        diag["cells_per_orbit"] = space.N
        diag["velocity_cutoff"] = space.V_max
    if equilibrium.quad is not None:
        diag["velocity_tail"] = equilibrium.quad.tail_bound
    A1 = assemble_A1(equilibrium, lam, grid, proj=proj, diag=diag)
    A2 = assemble_A2(equilibrium, lam, grid, proj=proj, diag=diag)
    B = assemble_B(equilibrium, lam, grid, proj=proj, diag=diag)
    Bs = assemble_Bstar(equilibrium, lam, grid, B=B)
    WA2 = grid.weights[:, None] * A2.matrix
    WB = grid.weights[:, None] * B.matrix
    if np.any(WB):
        WA1 = grid.weights[:, None] * A1.matrix
        Z = _zero_mean_basis(grid)
        K = Z.T @ WA1 @ Z
        c = cho_factor(0.5 * (K + K.T))
        ZB = Z.T @ WB
        WL = WA2 + ZB.T @ cho_solve(c, ZB)
        diag["A1_restricted_condition"] = float(np.linalg.cond(K))
    else:
        WL = WA2
    diag["Bstar_adjoint_defect"] = _adjoint_defect(B.matrix, Bs.matrix, grid.weights)
    L = _finish(WL, grid, lam, "dirichlet", "L", diag)
    return OperatorSet(float(lam), grid, A1, A2, B, Bs, L, diag)


def _adjoint_defect(B, Bs, w):
    WB = w[:, None] * B
    WBs = w[:, None] * Bs
    nrm = np.linalg.norm(WB)
    return 0.0 if nrm == 0 else float(np.linalg.norm(WBs - WB.T) / nrm)


def L_decomposition(ops, psi):
    """(<L psi, psi>, <A2 psi, psi>, <A1 phi, phi>) with A1 phi = B psi."""
    g = ops.grid
    phi = ops.solve_A1(ops.B @ psi)
    return (g.inner(ops.L @ psi, psi), g.inner(ops.A2 @ psi, psi),
            g.inner(ops.A1 @ phi, phi))


def projection_term(equilibrium, psi, proj=None):
    """-sum_s int mu_e |P(vth_hat psi)|^2 dv dx (nonnegative)."""
    if equilibrium.profile.is_zero:
        return 0.0
    H = _kinetic(_space(equilibrium, proj), 0.0, "vpsi", "vpsi", False)
    return float(psi @ H @ psi)


def minimized_J(equilibrium, psi, ops=None, proj=None):
    """Minimum of the constrained functional at fixed psi:

    <B* A1^-1 B psi, psi> - sum_s int mu_e |P(vth_hat psi)|^2.
    """
    grid = equilibrium.grid
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (grid.n,):
        raise ValueError("psi must have one value per grid node")
    if ops is None:
        ops = assemble_L(equilibrium, 0.0, proj=proj)
    if ops.lam != 0:
        raise ValueError("minimized_J needs the lambda = 0 operators")
    coupling = 0.0
    if np.any(ops.B.matrix):
        phi = ops.solve_A1(ops.B @ psi)
        coupling = grid.inner(ops.Bstar @ phi, psi)
    return coupling + projection_term(equilibrium, psi, proj)


def smallest_L_eig(ops):
    """Smallest eigenpair of L in the disk inner product (unit L^2 norm)."""
    g = ops.grid
    WL = ops.weighted("L")
    vals, vecs = eigh(0.5 * (WL + WL.T), np.diag(g.weights), subset_by_index=[0, 0])
    psi = vecs[:, 0]
    psi = psi / g.norm(psi)
    # fixed sign convention: largest component positive
    if psi[np.argmax(np.abs(psi))] < 0:
        psi = -psi
    return float(vals[0]), psi


# lambda dependence -------------------------------------------------------------

def strong_limit(equilibrium, psis, lambdas=(0.3, 0.1, 0.03), proj=None):
    """||(A2^lam - A2^0) psi|| / ||psi|| per test vector (rows) and lambda (columns)."""
    grid = equilibrium.grid
    A0 = assemble_A2(equilibrium, 0.0, proj=proj)
    out = np.zeros((len(psis), len(lambdas)))
    for j, lam in enumerate(lambdas):
        A = assemble_A2(equilibrium, lam, proj=proj)
        for i, psi in enumerate(psis):
            out[i, j] = grid.norm(A @ psi - A0 @ psi) / grid.norm(psi)
    return out


@dataclass
class ContinuityFit:
    """Fitted C in |<(A2^a - A2^b) psi, psi>| <= C (|a - b| + |log a - log b|) ||psi||^2."""
    C: float
    fit_lambdas: list
    check_lambdas: list
    worst_ratio: float
    holds: bool


def _continuity_ratios(forms, lams, grid, psis):
    out = []
    for a in range(len(lams)):
        for b in range(a + 1, len(lams)):
            la, lb = lams[a], lams[b]
            scale = abs(la - lb) + abs(np.log(la) - np.log(lb))
            for i, psi in enumerate(psis):
                out.append(abs(forms[a][i] - forms[b][i]) / (scale * grid.inner(psi, psi)))
    return out


def continuity_modulus(equilibrium, psis, fit_lambdas=(0.1, 0.3, 1.0, 3.0),
                       check_lambdas=(0.05, 0.2, 0.5, 2.0), proj=None, safety=2.0):
    """Fit C on one lambda grid, then check the bound (times ``safety``) on another.

    The constant belongs to a bounded lambda range: the form grows like
    lambda^2 for large lambda, so check points above the fit grid would
    measure that growth instead.
    """
    if max(check_lambdas) > max(fit_lambdas):
        raise ValueError("check lambdas must not exceed the largest fit lambda")
    grid = equilibrium.grid

    def forms(lams):
        res = []
        for lam in lams:
            A = assemble_A2(equilibrium, lam, proj=proj)
            res.append([grid.inner(A @ psi, psi) for psi in psis])
        return res
    C = max(_continuity_ratios(forms(fit_lambdas), list(fit_lambdas), grid, psis))
    both = sorted(set(fit_lambdas) | set(check_lambdas))
    worst = max(_continuity_ratios(forms(both), both, grid, psis))
    return ContinuityFit(C, list(fit_lambdas), list(check_lambdas), worst,
                         worst <= safety * C)


def nonlocal_norms(equilibrium, lam=0.0, proj=None):
    """Disk-inner-product operator norms of the velocity-integral terms.

    Returns a dict with the norms of the A1, A2 and B kinetic parts and the
    bound sup_r sum_s int |mu_e| dv evaluated on the velocity quadrature.
    """
    grid = equilibrium.grid
    if equilibrium.profile.is_zero:
        return {"A1": 0.0, "A2": 0.0, "B": 0.0, "bound": 0.0}
    space = _space(equilibrium, proj)
    s = 1.0 / np.sqrt(grid.weights)

    def norm(G):
        return float(np.linalg.norm(s[:, None] * G * s[None, :], 2))
    out = {"A1": norm(_kinetic(space, lam, "phi", "phi", True)),
           "A2": norm(_kinetic(space, lam, "vpsi", "vpsi", False)),
           "B": norm(_kinetic(space, lam, "phi", "vpsi", True))}
    out["bound"] = float(np.max(density_of_mu_e(equilibrium)))
    return out


def density_of_mu_e(equilibrium, quad=None):
    """sum_s int |mu_e(e^s, p^s)| dv at the grid nodes."""
    from .discretization import build_velocity_quad
    quad = quad if quad is not None else equilibrium.quad
    if quad is None:
        quad = build_velocity_quad(equilibrium.profile)
    r = equilibrium.grid.nodes[:, None]
    gam = quad.gamma_v[None, :]
    tot = np.zeros(equilibrium.grid.n)
    for sg in (1, -1):
        e = gam + sg * equilibrium.phi0[:, None]
        p = r * (quad.vth[None, :] + sg * equilibrium.psi0[:, None])
        tot += np.abs(equilibrium.profile.mu_e(sg, e, p)) @ quad.weights
    return tot
