"""Radial grid, disk quadrature, radial Laplacians and velocity quadrature."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RadialGrid:
    n: int
    nodes: np.ndarray
    weights: np.ndarray
    scheme: str = "fd"

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def faces(self):
        return np.arange(self.n + 1) * self.h

    def integrate(self, f):
        """Disk integral of a radial function sampled on the nodes."""
        return float(np.dot(self.weights, f))

    def inner(self, u, v):
        return float(np.dot(self.weights * u, v))

    def norm(self, u):
        return np.sqrt(self.inner(u, u))

    def mean(self, u):
        return self.integrate(u) / np.pi

    def deflate(self, u):
        """Remove the disk average (projection onto the zero-mean subspace)."""
        return u - self.mean(u)


def build_grid(n, scheme="fd"):
    """Cell-centred grid r_i = (i - 1/2)/n with exact cell areas as weights."""
    if int(n) != n or n < 8:
        raise ValueError("grid needs n >= 8 nodes, got %r" % (n,))
    if scheme != "fd":
        raise ValueError("unknown grid scheme %r" % (scheme,))
    n = int(n)
    h = 1.0 / n
    r = (np.arange(n) + 0.5) * h
    w = 2 * np.pi * r * h
    return RadialGrid(n, r, w, scheme)


@dataclass(frozen=True)
class RadialOperator:
    """Dense matrix acting on nodal values, with its boundary tag."""
    matrix: np.ndarray
    bc: str
    lam: float = None

    def __matmul__(self, u):
        return self.matrix @ u


def weighted_symmetry_defect(M, weights):
    """||W M - (W M)^T|| / ||W M|| in the Frobenius norm."""
    WM = weights[:, None] * np.asarray(M)
    nrm = np.linalg.norm(WM)
    if nrm == 0:
        return 0.0
    return float(np.linalg.norm(WM - WM.T) / nrm)


def _flux_matrix(grid):
    """Weighted form of -(1/r)(r u')' with zero flux at r=0 and r=1."""
    n, h = grid.n, grid.h
    rf = grid.faces  # r_{i-1/2}, i = 1..n+1
    S = np.zeros((n, n))
    inner = rf[1:n]  # faces between cells
    c = 2 * np.pi * inner / h
    idx = np.arange(n - 1)
    S[idx, idx] += c
    S[idx + 1, idx + 1] += c
    S[idx, idx + 1] -= c
    S[idx + 1, idx] -= c
    return S


def laplacian_neumann(grid):
    """Discrete -Delta on radial functions with d_r u(1) = 0.

    The constants span the kernel; the matrix is symmetric in the disk inner
    product.
    """
    S = _flux_matrix(grid)
    return RadialOperator(S / grid.weights[:, None], "neumann")


def laplacian_r_dirichlet(grid):
    """Discrete -Delta + 1/r^2 with u(1) = 0 (ghost value -u_n)."""
    n, h = grid.n, grid.h
    S = _flux_matrix(grid)
    # Dirichlet face at r=1: flux 2 u_n / h through a face of radius 1
    S[n - 1, n - 1] += 2 * np.pi * 1.0 * 2 / h
    S += np.diag(grid.weights / grid.nodes**2)
    return RadialOperator(S / grid.weights[:, None], "dirichlet")


def weighted(op, grid):
    """W M, the Gram form of an operator in the disk inner product."""
    M = op.matrix if isinstance(op, RadialOperator) else op
    return grid.weights[:, None] * M


def smallest_eigs(op, grid, k=1, zero_mean=False):
    """Smallest eigenvalues of an operator symmetric in the disk product."""
    from scipy.linalg import eigh
    A = weighted(op, grid)
    A = 0.5 * (A + A.T)
    if zero_mean:
        # restrict to the w-orthogonal complement of the constants
        Z = _zero_mean_basis(grid)
        vals = eigh(Z.T @ A @ Z, Z.T @ (grid.weights[:, None] * Z), eigvals_only=True)
    else:
        vals = eigh(A, np.diag(grid.weights), eigvals_only=True)
    return vals[:k]


def _zero_mean_basis(grid):
    n = grid.n
    Z = np.zeros((n, n - 1))
    idx = np.arange(n - 1)
    Z[idx, idx] = 1.0
    Z[n - 1, :] = -grid.weights[:-1] / grid.weights[-1]
    return Z


# velocity quadrature ---------------------------------------------------------

@dataclass(frozen=True)
class VelocityQuad:
    """Polar product rule on |v| <= V_max; node set closed under v_r -> -v_r
    and v_theta -> -v_theta."""
    vr: np.ndarray
    vth: np.ndarray
    weights: np.ndarray
    V_max: float
    tail_bound: float
    level: int
    n_quarter: int = 0

    @property
    def gamma_v(self):
        return np.sqrt(1 + self.vr**2 + self.vth**2)

    def integrate(self, f):
        """Integrate an array whose last axis runs over the nodes."""
        return np.asarray(f) @ self.weights

    @property
    def mirror_vth(self):
        """Node permutation for v_theta -> -v_theta."""
        return self._mirror((3, 2, 1, 0))

    @property
    def mirror_vr(self):
        """Node permutation for v_r -> -v_r."""
        return self._mirror((1, 0, 3, 2))

    def _mirror(self, qmap):
        # per speed the nodes form quadrant blocks (+,+), (-,+), (-,-), (+,-)
        nq = self.n_quarter
        blocks = np.arange(self.vr.size).reshape(-1, 4, nq)
        return blocks[:, list(qmap), :].ravel()


def tail_estimate(profile, V, phi_sup=0.0, psi_sup=0.0, V_far=None):
    """Estimate of int_{|v|>V} sup_species |mu_e| dv.

    Tabulates the sampled sup of |mu_e| over reachable momenta on [V, V_far];
    beyond V_far the integrand is continued at its last sampled size over one
    more decade of speed.  The C_mu / (1 + e^gamma) bound is only a bound and
    far too weak for exponential profiles, so it is not used here.
    """
    from scipy.integrate import trapezoid
    if profile.is_zero:
        return 0.0
    if V_far is None:
        V_far = V + 200.0
    s = np.linspace(V, V_far, 2000)
    e = np.sqrt(1 + s**2) - phi_sup
    t = np.linspace(-1, 1, 21)
    E = np.repeat(e[:, None], t.size, axis=1)
    P = t[None, :] * (s[:, None] + psi_sup)
    m = np.zeros_like(s)
    for sg in (1, -1):
        m = np.maximum(m, np.abs(profile.mu_e(sg, E, P)).max(axis=1))
    integrand = 2 * np.pi * s * m
    return float(trapezoid(integrand, s)) + float(integrand[-1]) * 10 * V_far


def choose_vmax(profile, tol, phi_sup=0.0, psi_sup=0.0, V_cap=80.0):
    V = 2.0
    while V <= V_cap:
        if tail_estimate(profile, V, phi_sup, psi_sup) <= tol:
            return V
        V *= 1.1
    raise ValueError("velocity tail tolerance %g unreachable below V_max=%g"
                     % (tol, V_cap))


def build_velocity_quad(profile, tol=1e-10, level=1, phi_sup=0.0, psi_sup=0.0,
                        V_max=None):
    """Gauss-Legendre in |v| times a uniform angular rule.

    The angular nodes are built in the first quadrant and mirrored by sign
    flips, so any integrand odd in v_r or in v_theta sums to exactly zero.
    """
    if level < 0:
        raise ValueError("quadrature level must be >= 0")
    if V_max is None:
        V_max = choose_vmax(profile, tol, phi_sup, psi_sup)
    tail = tail_estimate(profile, V_max, phi_sup, psi_sup)
    if tail > tol and not profile.is_zero:
        raise ValueError("tail bound %.2e exceeds tolerance %.2e at V_max=%g"
                         % (tail, tol, V_max))
    n_rad = 24 * (level + 1)
    n_quarter = 4 * (level + 1)
    x, wx = np.polynomial.legendre.leggauss(n_rad)
    # split [0, V_max] into two panels: the bulk sits at small speeds
    cut = min(8.0, 0.5 * V_max)
    rho = np.concatenate([0.5 * cut * (x + 1), cut + 0.5 * (V_max - cut) * (x + 1)])
    wr = np.concatenate([0.5 * cut * wx, 0.5 * (V_max - cut) * wx])
    ang = (np.arange(n_quarter) + 0.5) * (0.5 * np.pi / n_quarter)
    c, s = np.cos(ang), np.sin(ang)
    cq = np.concatenate([c, -c, -c, c])
    sq = np.concatenate([s, s, -s, -s])
    wa = 2 * np.pi / (4 * n_quarter)
    vr = (rho[:, None] * cq[None, :]).ravel()
    vth = (rho[:, None] * sq[None, :]).ravel()
    w = (wr * rho)[:, None] * np.full(cq.size, wa)[None, :]
    return VelocityQuad(vr, vth, w.ravel(), float(V_max), float(tail), int(level),
                        n_quarter)
