"""Radial equilibria: charge/current moments, the Volterra fixed point and
the Dirichlet purely magnetic variant."""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .discretization import build_velocity_quad, laplacian_r_dirichlet
from .trajectories import FieldModel


class EquilibriumError(RuntimeError):
    pass


class NonContraction(EquilibriumError):
    def __init__(self, msg, lipschitz):
        super().__init__(msg)
        self.lipschitz = lipschitz


# moments ---------------------------------------------------------------------

def moments(profile, quad, r, phi, psi):
    """Charge and current moments h, g at radii r for potentials phi, psi.

    h = int [mu+(<v>+phi, r(v_th+psi)) - mu-(<v>-phi, r(v_th-psi))] dv and g
    is the same with an extra factor v_th/<v>.  Arrays broadcast over r.
    """
    r, phi, psi = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (r, phi, psi))
    r, phi, psi = np.broadcast_arrays(r, phi, psi)
    if profile.is_zero:
        return np.zeros(r.shape), np.zeros(r.shape)
    gam = quad.gamma_v[None, :]
    vth = quad.vth[None, :]
    R, F, S = r[:, None], phi[:, None], psi[:, None]
    d = (profile.mu(1, gam + F, R * (vth + S))
         - profile.mu(-1, gam - F, R * (vth - S)))
    # exact parity: h sees only the even part in v_theta, g the odd part
    m = quad.mirror_vth
    h = (0.5 * (d + d[:, m])) @ quad.weights
    g = (0.5 * (d - d[:, m]) * (vth / gam)) @ quad.weights
    return h, g


# exact Volterra weights for piecewise-linear data ------------------------------

def _slog(s, n):
    """Antiderivative of s^n log s, vanishing at s = 0."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = s ** (n + 1) * (np.log(s) / (n + 1) - 1.0 / (n + 1) ** 2)
    return np.where(s > 0, out, 0.0)


def _knots(grid):
    """Knots 0, r_1..r_n and the map from nodal values to knot values.

    The value at 0 is the linear extrapolation of the first two nodes.
    """
    n = grid.n
    t = np.concatenate([[0.0], grid.nodes])
    X = np.zeros((n + 1, n))
    X[1:, :] = np.eye(n)
    X[0, 0], X[0, 1] = 1.5, -0.5
    return t, X


def _piecewise_weights(t, upto, I0, I1):
    """Weights w_k with int_0^{t[upto]} K(s) l(s) ds = sum_k w_k l(t_k).

    I0(a, b), I1(a, b) are the kernel moments int_a^b K and int_a^b K s.
    """
    w = np.zeros(t.size)
    for k in range(upto):
        a, b = t[k], t[k + 1]
        d = b - a
        i0, i1 = I0(a, b), I1(a, b)
        w[k] += (b * i0 - i1) / d
        w[k + 1] += (i1 - a * i0) / d
    return w


@dataclass(frozen=True)
class VolterraWeights:
    """phi(r_i) = alpha + Wphi @ h,  psi(r_i) = beta r_i + Wpsi @ g,
    E_r = WE @ h,  B = 2 beta - WB @ g.

    WE and WB have n + 1 rows: the nodes, then r = 1.
    """
    Wphi: np.ndarray
    Wpsi: np.ndarray
    WE: np.ndarray
    WB: np.ndarray


def volterra_weights(grid):
    t, X = _knots(grid)
    n = grid.n
    Wphi = np.zeros((n, n + 1))
    Wpsi = np.zeros((n, n + 1))
    for i in range(n):
        r = grid.nodes[i]
        lr = np.log(r)
        Wphi[i] = _piecewise_weights(
            t, i + 1,
            lambda a, b: _slog(b, 1) - _slog(a, 1) - lr * (b**2 - a**2) / 2,
            lambda a, b: _slog(b, 2) - _slog(a, 2) - lr * (b**3 - a**3) / 3)
        Wpsi[i] = _piecewise_weights(
            t, i + 1,
            lambda a, b: ((b**3 - a**3) / 3 - r * r * (b - a)) / (2 * r),
            lambda a, b: ((b**4 - a**4) / 4 - r * r * (b**2 - a**2) / 2) / (2 * r))
    # E_r = (1/r) int_0^r s h ds and B = 2 beta - int_0^r g ds; past r_n the
    # data are extended linearly to reach r = 1
    t1 = np.concatenate([t, [1.0]])
    X1 = np.vstack([X, 2 * X[-1] - X[-2]])
    WE = np.zeros((n + 1, n))
    WB = np.zeros((n + 1, n))
    for i in range(n + 1):
        r = t1[i + 1]
        we = _piecewise_weights(t1, i + 1, lambda a, b: (b**2 - a**2) / 2,
                                lambda a, b: (b**3 - a**3) / 3) / r
        wb = _piecewise_weights(t1, i + 1, lambda a, b: b - a,
                                lambda a, b: (b**2 - a**2) / 2)
        WE[i] = we @ X1
        WB[i] = wb @ X1
    return VolterraWeights(Wphi @ X, Wpsi @ X, WE, WB)


# equilibrium ---------------------------------------------------------------

@dataclass
class Equilibrium:
    grid: object
    phi0: np.ndarray
    psi0: np.ndarray
    E0r: np.ndarray
    B0: np.ndarray
    alpha: float
    beta: float
    profile: object
    quad: object
    residual: float = 0.0
    iterations: int = 0
    ratios: list = field(default_factory=list)
    tol: float = 1e-10
    E_wall: float = 0.0
    B_wall: float = 0.0
    variant: str = "volterra"

    @property
    def kind(self):
        """homogeneous | magnetic | general (exact zeros decide)."""
        if not np.any(self.phi0) and not np.any(self.psi0):
            return "homogeneous"
        if not np.any(self.E0r) and np.ptp(self.phi0) == 0:
            return "magnetic"
        return "general"

    @property
    def contraction(self):
        """Largest measured ratio of successive Picard updates."""
        return max(self.ratios) if self.ratios else 0.0

    @cached_property
    def field_model(self):
        return FieldModel(self.grid.nodes, self.phi0, self.psi0)

    def dump(self, path):
        head = ("profile %s alpha %.17g beta %.17g tol %.3g iterations %d variant %s\n"
                "r phi0 psi0 E0r B0" % (self.profile.name, self.alpha, self.beta,
                                         self.tol, self.iterations, self.variant))
        np.savetxt(path, np.column_stack([self.grid.nodes, self.phi0, self.psi0,
                                          self.E0r, self.B0]),
                   header=head, fmt="%.15e")


def _quad_for(profile, quad, phi_sup=0.0, psi_sup=0.0):
    if quad is not None:
        return quad
    return build_velocity_quad(profile, tol=1e-10, level=1,
                               phi_sup=phi_sup, psi_sup=psi_sup)


def volterra_map(profile, quad, grid, W, alpha, beta, phi, psi):
    """Right-hand sides of the integral equations (gamma = delta = 0)."""
    h, g = moments(profile, quad, grid.nodes, phi, psi)
    return alpha + W.Wphi @ h, beta * grid.nodes + W.Wpsi @ g, h, g


def _picard(step, u0, tol, max_iter, what, stall=None):
    """Damped Picard iteration with contraction monitoring.

    ``step(u) -> T(u)``.  Damping 0.5 switches on once an update ratio
    exceeds 0.9; five consecutive ratios >= 1 count as divergence.  With
    ``stall`` set, that many consecutive ratios above 0.95 also stop the
    iteration.  Failures carry the last iterate as ``exc.iterate``.
    """
    u = u0
    ratios = []
    prev = None
    damp = 1.0
    bad = slow = 0
    for it in range(1, max_iter + 1):
        Tu = step(u)
        upd = Tu - u
        size = float(np.max(np.abs(upd)))
        if not np.isfinite(size):
            exc = NonContraction("%s: iterate overflowed at iteration %d (the map "
                                 "diverges)" % (what, it), float("inf"))
            exc.iterate = u
            raise exc
        if prev is not None and prev > 0:
            ratio = size / prev
            ratios.append(ratio)
            if ratio > 0.9:
                damp = 0.5
            bad = bad + 1 if ratio >= 1 else 0
            slow = slow + 1 if ratio > 0.95 else 0
            if bad >= 5 or (stall and slow >= stall):
                k = 5 if bad >= 5 else stall
                lip = float(np.exp(np.mean(np.log(ratios[-k:]))))
                exc = NonContraction(
                    "%s: fixed-point map is not a contraction (update ratio >= 1 "
                    "for 5 iterations, Lipschitz estimate %.3g; the constants must be "
                    "small enough for a contraction factor below 1)" % (what, lip)
                    if bad >= 5 else
                    "%s: Picard stalls (Lipschitz estimate %.3g)" % (what, lip), lip)
                exc.iterate = u
                raise exc
        prev = size
        u = u + damp * upd
        if size <= tol:
            return u, it, ratios
    exc = EquilibriumError("%s: no convergence in %d iterations (last update %.3g)"
                           % (what, max_iter, size))
    exc.iterate = u
    raise exc


def solve_equilibrium(profile, alpha=0.0, beta=0.0, grid=None, quad=None,
                      tol=1e-10, max_iter=500):
    """Fixed point of the integral equations for (phi0, psi0) by Picard."""
    if grid is None:
        from .discretization import build_grid
        grid = build_grid(64)
    n = grid.n
    W = volterra_weights(grid)
    quad = _quad_for(profile, quad, abs(alpha) + 1.0, abs(beta) + 1.0)

    def step(u):
        phi, psi, _, _ = volterra_map(profile, quad, grid, W, alpha, beta, u[:n], u[n:])
        return np.concatenate([phi, psi])

    u0 = np.concatenate([np.full(n, float(alpha)), beta * grid.nodes])
    u, it, ratios = _picard(step, u0, tol, max_iter, "equilibrium")
    phi, psi = u[:n], u[n:]
    Tphi, Tpsi, h, g = volterra_map(profile, quad, grid, W, alpha, beta, phi, psi)
    res = float(max(np.max(np.abs(Tphi - phi)), np.max(np.abs(Tpsi - psi))))
    # the fields come from the same integral forms
    E = W.WE @ h
    B = 2 * beta - W.WB @ g
    return Equilibrium(grid, phi, psi, E[:n], B[:n], float(alpha), float(beta),
                       profile, quad, res, it, ratios, tol, float(E[n]), float(B[n]))


def fields(eq):
    """(E0r, B0) on the nodes; the wall values are eq.E_wall, eq.B_wall."""
    return eq.E0r, eq.B0


def solve_psi0_dirichlet(profile, grid=None, quad=None, tol=1e-10, max_iter=500,
                         psi_init=None, newton=True):
    """Purely magnetic equilibrium with psi0(1) = 0: -Delta_r psi = g(r, 0, psi).

    Damped Picard on the discrete Dirichlet operator; phi0 = 0.  When the
    Picard map stops contracting (strong momentum scalings), the same
    discrete equations are solved by damped Newton from the last iterate
    unless ``newton`` is False.
    """
    if grid is None:
        from .discretization import build_grid
        grid = build_grid(64)
    n = grid.n
    r = grid.nodes
    Lr = laplacian_r_dirichlet(grid).matrix
    quad = _quad_for(profile, quad, 0.0, profile.C_mu + 1.0)
    zero = np.zeros(n)

    def current(psi):
        return moments(profile, quad, r, zero, psi)[1]

    def step(psi):
        return np.linalg.solve(Lr, current(psi))

    psi0 = np.zeros(n) if psi_init is None else np.asarray(psi_init, dtype=float)
    if psi_init is not None and newton:
        # continuation: stay on the branch through the supplied state
        psi, it = _newton_dirichlet(Lr, current, psi0, tol, "continuation")
        ratios, method = [], "newton"
    else:
        try:
            psi, it, ratios = _picard(step, psi0, tol, max_iter, "dirichlet equilibrium",
                                      stall=20 if newton else None)
            method = "picard"
        except EquilibriumError as exc:
            if not newton:
                raise
            start = exc.iterate if np.all(np.isfinite(exc.iterate)) else psi0
            if np.max(np.abs(start)) > 10 * (1 + np.max(np.abs(psi0))):
                start = psi0
            psi, it = _newton_dirichlet(Lr, current, start, tol, exc)
            ratios = [getattr(exc, "lipschitz", float("nan"))]
            method = "newton"
    g = current(psi)
    res = float(np.max(np.abs(Lr @ psi - g)))
    fixed = float(np.max(np.abs(np.linalg.solve(Lr, g) - psi)))
    # B = (1/r)(r psi)' from the grid values (psi = 0 at r = 1)
    rp = np.concatenate([[0.0], r * psi, [0.0]])
    rr = np.concatenate([[0.0], r, [1.0]])
    B = np.gradient(rp, rr)[1:-1] / r
    B_wall = float((0.0 - r[-1] * psi[-1]) / (1 - r[-1]))
    slope = float(psi[0] / r[0])
    eq = Equilibrium(grid, zero.copy(), psi, zero.copy(), B, 0.0, slope,
                     profile, quad, fixed, it, ratios, tol, 0.0, B_wall,
                     "dirichlet-" + method)
    eq.ode_residual = res
    return eq


def _newton_dirichlet(Lr, current, psi, tol, cause, max_iter=60):
    """Damped Newton for Lr psi = g(psi); g acts pointwise in r."""
    def F(u):
        return Lr @ u - current(u)

    f = F(psi)
    for it in range(1, max_iter + 1):
        fn = float(np.max(np.abs(f)))
        if fn <= tol:
            return psi, it
        eps = 1e-6
        dg = (current(psi + eps) - current(psi - eps)) / (2 * eps)
        step = np.linalg.solve(Lr - np.diag(dg), -f)
        t = 1.0
        while True:
            trial = psi + t * step
            ft = F(trial)
            if np.max(np.abs(ft)) <= (1 - 0.25 * t) * fn or t < 1e-6:
                break
            t *= 0.5
        psi, f = trial, ft
    raise EquilibriumError("dirichlet equilibrium: Picard failed (%s) and Newton did "
                           "not reach %.1e in %d steps" % (cause, tol, max_iter))


def volterra_residual(eq):
    """sup-norm defect of the integral equations at the stored potentials."""
    W = volterra_weights(eq.grid)
    phi, psi, _, _ = volterra_map(eq.profile, eq.quad, eq.grid, W, eq.alpha,
                                  eq.beta, eq.phi0, eq.psi0)
    return float(max(np.max(np.abs(phi - eq.phi0)), np.max(np.abs(psi - eq.psi0))))


def newton_solve(profile, alpha, beta, grid, quad, tol=1e-12, max_iter=30):
    """Damped Newton on u - T(u) = 0 with a finite-difference Jacobian.

    A second route to the same discrete equilibrium, used to cross-check
    the Picard iteration.
    """
    n = grid.n
    W = volterra_weights(grid)

    def F(u):
        phi, psi, _, _ = volterra_map(profile, quad, grid, W, alpha, beta, u[:n], u[n:])
        return u - np.concatenate([phi, psi])

    u = np.concatenate([np.full(n, float(alpha)), beta * grid.nodes])
    for _ in range(max_iter):
        f = F(u)
        if np.max(np.abs(f)) <= tol:
            return u[:n], u[n:]
        J = np.empty((2 * n, 2 * n))
        eps = 1e-7
        for j in range(2 * n):
            du = np.zeros(2 * n)
            du[j] = eps
            J[:, j] = (F(u + du) - F(u - du)) / (2 * eps)
        step = np.linalg.solve(J, -f)
        t = 1.0
        while t > 1e-4 and np.max(np.abs(F(u + t * step))) > (1 - 0.25 * t) * np.max(np.abs(f)):
            t *= 0.5
        u = u + t * step
    raise EquilibriumError("newton solve did not converge")


def vacuum_equilibrium(profile, grid, quad=None):
    """The zero fixed point, phi0 = psi0 = 0."""
    n = grid.n
    z = np.zeros(n)
    return Equilibrium(grid, z.copy(), z.copy(), z.copy(), z.copy(), 0.0, 0.0,
                       profile, quad, 0.0, 1, [], 0.0)
