"""Characteristics of the linearised Vlasov operators and the averages Q_lambda.

Two routes live here.

* ``integrate`` / ``q_lambda`` follow one particle with an adaptive
  Runge-Kutta solver in Cartesian coordinates, stopping on the wall r = 1 and
  applying the specular rule there.

* The orbit engine uses the invariants e = <v> + s phi0(r) and
  p = r (v_theta + s psi0(r)).  At fixed (e, p) the radial motion is a
  periodic one-dimensional problem, so time along an orbit is tabulated once
  (Chebyshev series in an angle variable) and any state on the orbit is found
  by inverting that table.  This is what the operator assembly uses.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

WALL_TOL = 1e-12
GRAZE = 1e-10


class TrajectoryError(RuntimeError):
    pass


# fields ----------------------------------------------------------------------

class FieldModel:
    """Cubic-spline potentials phi0 (even in r) and psi0 (odd in r)."""

    def __init__(self, nodes, phi0, psi0):
        nodes = np.asarray(nodes, dtype=float)
        phi0 = np.asarray(phi0, dtype=float)
        psi0 = np.asarray(psi0, dtype=float)
        self.phi0_zero = not np.any(phi0)
        self.trivial = self.phi0_zero and not np.any(psi0)
        self.electric = bool(np.ptp(phi0) > 0)
        x = np.concatenate([-nodes[::-1], nodes])
        self._phi = CubicSpline(x, np.concatenate([phi0[::-1], phi0]))
        self._psi = CubicSpline(x, np.concatenate([-psi0[::-1], psi0]))
        self._dphi = self._phi.derivative()
        self._dpsi = self._psi.derivative()
        self.phi_sup = float(np.max(np.abs(phi0))) if phi0.size else 0.0
        self.psi_sup = float(np.max(np.abs(psi0))) if psi0.size else 0.0
        # scalar fast path: uniform breakpoints, highest power first
        self._x0 = float(x[0])
        self._hx = float(x[1] - x[0])
        self._nseg = x.size - 1
        self._cphi = [list(map(float, col)) for col in self._phi.c.T]
        self._cpsi = [list(map(float, col)) for col in self._psi.c.T]

    @classmethod
    def zero(cls, n=16):
        r = (np.arange(n) + 0.5) / n
        return cls(r, np.zeros(n), np.zeros(n))

    def phi(self, r):
        if self.phi0_zero:
            return np.zeros_like(np.asarray(r, dtype=float))
        return self._phi(r)

    def psi(self, r):
        if self.trivial:
            return np.zeros_like(np.asarray(r, dtype=float))
        return self._psi(r)

    def E_r(self, r):
        if self.phi0_zero:
            return np.zeros_like(np.asarray(r, dtype=float))
        return -self._dphi(r)

    def B(self, r):
        if self.trivial:
            return np.zeros_like(np.asarray(r, dtype=float))
        r = np.asarray(r, dtype=float)
        rr = np.maximum(np.abs(r), 1e-8)
        return self._psi(rr) / rr + self._dpsi(rr)

    def _eval(self, coeffs, r, deriv=False):
        i = int((r - self._x0) / self._hx)
        i = min(max(i, 0), self._nseg - 1)
        d = r - (self._x0 + i * self._hx)
        a, b, c, e = coeffs[i]
        if deriv:
            return (3 * a * d + 2 * b) * d + c
        return ((a * d + b) * d + c) * d + e

    def scalar_fields(self, r):
        """(E_r / r, B) at a scalar radius, in pure Python for the ODE."""
        if self.trivial:
            return 0.0, 0.0
        rr = max(r, 1e-8)
        Er_over_r = 0.0 if self.phi0_zero else -self._eval(self._cphi, rr, True) / rr
        B = self._eval(self._cpsi, rr) / rr + self._eval(self._cpsi, rr, True)
        return Er_over_r, B


def field_model(obj):
    """Accept an Equilibrium, a FieldModel or None (zero field)."""
    if obj is None:
        return FieldModel.zero()
    if isinstance(obj, FieldModel):
        return obj
    return obj.field_model


def invariants(fm, sign, r, vr, vth):
    g = np.sqrt(1 + np.asarray(vr) ** 2 + np.asarray(vth) ** 2)
    e = g + sign * fm.phi(r)
    p = np.asarray(r) * (vth + sign * fm.psi(r))
    return e, p


# single trajectories -----------------------------------------------------------

@dataclass(frozen=True)
class PhasePoint:
    r: float
    vr: float
    vth: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.r, self.vr, self.vth)):
            raise ValueError("phase point must be finite")
        if self.r < 0 or self.r > 1 + 1e-9:
            raise ValueError("phase point needs 0 <= r <= 1, got %r" % self.r)


def reflect(point, tol=1e-9):
    """Specular rule at the wall: (1, v_r, v_theta) -> (1, -v_r, v_theta)."""
    if abs(point.r - 1.0) > tol:
        raise ValueError("reflect called away from the wall (r=%r)" % point.r)
    return PhasePoint(point.r, -point.vr, point.vth)


@dataclass
class Trajectory:
    sign: int
    segments: list = field(default_factory=list)  # (s_a, s_b, OdeSolution)
    events: list = field(default_factory=list)    # (s, PhasePoint before reflection)
    grazing: int = 0
    e_drift: float = 0.0
    p_drift: float = 0.0

    @property
    def s_end(self):
        return self.segments[-1][1]

    def _cart(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.empty((4, s.size))
        for a, b, sol in self.segments:
            lo, hi = min(a, b), max(a, b)
            m = (s >= lo - 1e-14) & (s <= hi + 1e-14)
            if m.any():
                out[:, m] = sol(s[m])
        return out

    def state(self, s):
        """(r, v_r, v_theta) at the times s (right-continuous at events
        in the integration direction)."""
        x, y, vx, vy = self._cart(s)
        r = np.hypot(x, y)
        rr = np.where(r > 0, r, 1.0)
        cx, cy = np.where(r > 0, x / rr, 1.0), np.where(r > 0, y / rr, 0.0)
        return r, vx * cx + vy * cy, -vx * cy + vy * cx


def _rhs_factory(fm, sign):
    def rhs(t, y):
        x, yy, vx, vy = y
        g = math.sqrt(1.0 + vx * vx + vy * vy)
        ux, uy = vx / g, vy / g
        r = math.hypot(x, yy)
        er, B = fm.scalar_fields(r)
        ax = sign * (er * x + uy * B)
        ay = sign * (er * yy - ux * B)
        return [ux, uy, ax, ay]
    return rhs


def _wall(t, y):
    return y[0] * y[0] + y[1] * y[1] - 1.0


_wall.terminal = True
_wall.direction = 1


def integrate(equilibrium, sign, point, s_end, tol=1e-11, max_events=100000):
    """Follow the characteristic of species ``sign`` from ``point`` to s_end.

    Reflections are located by the solver's event search, refined to
    |r - 1| <= 1e-12 and applied with ``reflect``.  s_end may be negative.
    """
    fm = field_model(equilibrium)
    if not point.r <= 1 + 1e-9:
        raise ValueError("start point outside the disk")
    rhs = _rhs_factory(fm, sign)
    y0 = np.array([point.r, 0.0, point.vr, point.vth])
    direction = 1.0 if s_end >= 0 else -1.0
    # on the wall and heading out in the integration direction: reflect first
    traj = Trajectory(sign)
    if abs(point.r - 1) <= 1e-12 and direction * point.vr > 0:
        traj.events.append((0.0, point))
        y0[2] = -y0[2]
    s = 0.0
    last_event = None
    while True:
        sol = solve_ivp(rhs, (s, s_end), y0, method="DOP853", rtol=tol,
                        atol=tol * 1e-2, events=_wall, dense_output=True)
        if sol.status < 0:
            raise TrajectoryError("integrator failed at s=%g: %s" % (s, sol.message))
        if sol.status == 0:
            traj.segments.append((s, float(sol.t[-1]), sol.sol))
            break
        t_ev = float(sol.t_events[0][0])
        f = lambda t: _wall(t, sol.sol(t))
        yev = sol.sol(t_ev)
        if abs(math.sqrt(yev[0] ** 2 + yev[1] ** 2) - 1) > WALL_TOL:
            a = float(sol.t[-2]) if sol.t.size > 1 else s
            if f(a) * f(t_ev) < 0:
                t_ev = brentq(f, a, t_ev, xtol=1e-15, rtol=4e-16)
            yev = sol.sol(t_ev)
        traj.segments.append((s, t_ev, sol.sol))
        x, yy, vx, vy = yev
        r = math.hypot(x, yy)
        nx, ny = x / r, yy / r
        vr = vx * nx + vy * ny
        vth = -vx * ny + vy * nx
        traj.events.append((t_ev, PhasePoint(1.0, vr, vth)))
        if len(traj.events) > max_events:
            raise TrajectoryError("more than %d reflections" % max_events)
        if last_event is not None and abs(t_ev - last_event) < 1e-13:
            raise TrajectoryError("step-size collapse near a grazing event at "
                                  "s=%g, (v_r, v_theta)=(%g, %g)" % (t_ev, vr, vth))
        last_event = t_ev
        if abs(vr) < GRAZE:
            traj.grazing += 1
            vr_new = 0.0
        else:
            vr_new = -vr
        # back onto the circle, reflected velocity
        y0 = np.array([nx, ny, vr_new * nx - vth * ny, vr_new * ny + vth * nx])
        s = t_ev
        if s == s_end:
            break
    _drifts(traj, fm, sign, point)
    return traj


def _drifts(traj, fm, sign, point):
    e0, p0 = invariants(fm, sign, point.r, point.vr, point.vth)
    ts = []
    for a, b, _ in traj.segments:
        ts.append(np.linspace(a, b, 9))
    ts = np.concatenate(ts)
    r, vr, vth = traj.state(ts)
    e, p = invariants(fm, sign, r, vr, vth)
    traj.e_drift = float(np.max(np.abs(e - e0)))
    traj.p_drift = float(np.max(np.abs(p - p0)))


def q_lambda(equilibrium, sign, lam, g, point, tol=1e-10, panel=0.5, order=16):
    """Q_lambda g at one phase point by direct integration along the path.

    Gauss-Legendre panels of length <= ``panel`` between reflections on
    [-S, 0], S = -ln(tol)/lam, plus the tail e^{-lam S} g(X(-S), V(-S)).
    ``g`` maps arrays (r, v_r, v_theta) to values.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    S = -math.log(tol) / lam
    traj = integrate(equilibrium, sign, point, -S)
    x, w = np.polynomial.legendre.leggauss(order)
    total = 0.0
    for a, b, sol in traj.segments:
        lo, hi = min(a, b), max(a, b)
        if hi - lo <= 0:
            continue
        m = max(1, int(math.ceil((hi - lo) / panel)))
        edges = np.linspace(lo, hi, m + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        s = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        ww = (half[:, None] * w[None, :]).ravel()
        cart = sol(s)
        X, Y, VX, VY = cart
        r = np.hypot(X, Y)
        rr = np.where(r > 0, r, 1.0)
        cx, cy = np.where(r > 0, X / rr, 1.0), np.where(r > 0, Y / rr, 0.0)
        vals = g(r, VX * cx + VY * cy, -VX * cy + VY * cx)
        total += float(np.sum(ww * lam * np.exp(lam * s) * vals))
    rS, vrS, vthS = traj.state([traj.s_end])
    total += math.exp(-lam * S) * float(np.asarray(g(rS, vrS, vthS)).ravel()[0])
    return total


@dataclass
class SpecularityReport:
    max_defect: float
    samples: int
    passed: bool
    wall_defect: float = 0.0


def check_specularity(g_sampler, equilibrium=None, sign=1, s_back=-3.0, count=16,
                      tol=1e-8, seed=0):
    """Compare g transported back from (1, v) and from (1, v~).

    The composition g(X(s; x, v), V(s; x, v)) with s != 0 must be specular
    whatever g is, since both wall points lie on one path; ``max_defect``
    measures that.  ``wall_defect`` is |g(1, v) - g(1, v~)| for g itself,
    which vanishes only for specular g.
    """
    rng = np.random.default_rng(seed)
    worst = wall = 0.0
    for _ in range(count):
        vr, vth = rng.uniform(0.2, 2.0), rng.uniform(-2.0, 2.0)
        vals, here = [], []
        for v in (vr, -vr):
            here.append(float(np.asarray(g_sampler(1.0, v, vth)).ravel()[0]))
            t = integrate(equilibrium, sign, PhasePoint(1.0, v, vth), s_back)
            r, a, b = t.state([s_back])
            vals.append(float(np.asarray(g_sampler(r, a, b)).ravel()[0]))
        worst = max(worst, abs(vals[0] - vals[1]))
        wall = max(wall, abs(here[0] - here[1]))
    return SpecularityReport(worst, count, worst <= tol, wall)


def dump_trajectory(traj, fm, path, samples=400):
    """Columnar text: s r v_r v_theta e p."""
    ts = np.linspace(traj.segments[0][0], traj.s_end, samples)
    r, vr, vth = traj.state(ts)
    e, p = invariants(field_model(fm), traj.sign, r, vr, vth)
    np.savetxt(path, np.column_stack([ts, r, vr, vth, e, p]),
               header="species %+d reflections %d\ns r v_r v_theta e p"
               % (traj.sign, len(traj.events)), fmt="%.12e")


# orbit engine ----------------------------------------------------------------

CHEB_M = 64


def _cheb_nodes(M):
    x = np.cos(np.pi * (np.arange(M) + 0.5) / M)[::-1]
    V = cheb.chebvander(x, M - 1)
    return x, np.linalg.inv(V)


_X, _VINV = _cheb_nodes(CHEB_M)


def u_tilde(fm, sign, e, p, r):
    """r^2 v_r^2 expressed through the invariants; the orbit lives where >= 0."""
    g = e - sign * fm.phi(r)
    return r * r * (g * g - 1.0) - (p - sign * r * fm.psi(r)) ** 2


def _bisect(fun, a, b, iters=64):
    fa = fun(a)
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm_ = fun(m)
        left = np.sign(fm_) == np.sign(fa)
        a = np.where(left, m, a)
        fa = np.where(left, fm_, fa)
        b = np.where(left, b, m)
    return 0.5 * (a + b)


_RF = np.linspace(0.0, 1.0, 513)


def orbit_bounds(fm, sign, e, p, r0):
    """Radial interval [r_lo, r_hi] of the orbit through radius r0.

    r_hi = 1 flags an orbit that reaches the wall.
    """
    e, p, r0 = (np.asarray(a, dtype=float).ravel() for a in np.broadcast_arrays(e, p, r0))
    U = u_tilde(fm, sign, e[:, None], p[:, None], _RF[None, :])
    neg = U < 0
    below = neg & (_RF[None, :] < r0[:, None])
    above = neg & (_RF[None, :] > r0[:, None])
    K = _RF.size
    ib = np.where(below.any(axis=1), K - 1 - np.argmax(below[:, ::-1], axis=1), -1)
    ia = np.where(above.any(axis=1), np.argmax(above, axis=1), K)
    a_lo = np.where(ib >= 0, _RF[np.clip(ib, 0, K - 1)], 0.0)
    b_lo = np.minimum(np.where(ib >= 0, _RF[np.clip(ib + 1, 0, K - 1)], 0.0), r0)
    b_lo = np.maximum(b_lo, a_lo)
    f = lambda r: u_tilde(fm, sign, e, p, r)
    has_lo = ib >= 0
    rlo = np.zeros_like(r0)
    if has_lo.any():
        rlo = np.where(has_lo, _bisect(f, np.where(has_lo, a_lo, 0.0),
                                       np.where(has_lo, b_lo, r0)), 0.0)
    # p != 0 always has a root between 0 and the first nonnegative sample
    need = (~has_lo) & (p != 0)
    if need.any():
        rlo = np.where(need, _bisect(f, np.zeros_like(r0), r0), rlo)
    has_hi = ia < K
    rhi = np.ones_like(r0)
    if has_hi.any():
        a_hi = np.maximum(np.where(has_hi, _RF[np.clip(ia - 1, 0, K - 1)], r0), r0)
        b_hi = np.where(has_hi, _RF[np.clip(ia, 0, K - 1)], 1.0)
        rhi = np.where(has_hi, _bisect(f, a_hi, b_hi), 1.0)
    return rlo, rhi


def orbit_intervals(fm, sign, e, p):
    """All orbits at the invariant pairs (e, p).

    Returns (index into e/p, r_lo, r_hi); several orbits may share a pair.
    """
    e = np.asarray(e, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    U = u_tilde(fm, sign, e[:, None], p[:, None], _RF[None, :])
    pos = U > 0
    # starts and ends of positive runs
    padded = np.zeros((e.size, _RF.size + 2), dtype=bool)
    padded[:, 1:-1] = pos
    d = np.diff(padded.astype(np.int8), axis=1)
    rows_s, cols_s = np.nonzero(d == 1)
    rows_e, cols_e = np.nonzero(d == -1)
    f = lambda idx: (lambda r: u_tilde(fm, sign, e[idx], p[idx], r))
    K = _RF.size
    idx = rows_s
    # inner end: root between RF[c-1] and RF[c] (or r=0)
    a = np.where(cols_s > 0, _RF[np.clip(cols_s - 1, 0, K - 1)], 0.0)
    b = _RF[np.clip(cols_s, 0, K - 1)]
    rlo = np.where(cols_s > 0, _bisect(f(idx), a, b), 0.0)
    zero_p = (cols_s == 0) & (p[idx] != 0)
    if zero_p.any():
        rlo = np.where(zero_p, _bisect(f(idx), np.zeros_like(b), b), rlo)
    last = cols_e - 1  # last positive sample
    a = _RF[np.clip(last, 0, K - 1)]
    b = _RF[np.clip(last + 1, 0, K - 1)]
    wall = last >= K - 1
    rhi = np.where(wall, 1.0, _bisect(f(idx), a, np.where(wall, a, b)))
    keep = rhi > rlo
    return idx[keep], rlo[keep], rhi[keep]


class OrbitTable:
    """Time along a family of orbits, as Chebyshev series in an angle.

    a in [0, pi] runs the outward leg and s(a) is the elapsed time from the
    inner end.  The angle parametrises rho = r^2 (the radial potential is
    smooth in r^2, which keeps passages near the centre resolved):
    rho = rho_lo + D sin^2(a/2) between two turning points, and
    rho = rho_lo + D (1 - cos(a/2)) when the outer end is the wall, so that
    s(a) keeps a nonzero slope there.
    """

    def __init__(self, fm, sign, e, p, rlo, rhi):
        self.fm, self.sign = fm, sign
        self.e, self.p = np.asarray(e, float), np.asarray(p, float)
        self.rlo, self.rhi = np.asarray(rlo, float), np.asarray(rhi, float)
        self.wall = self.rhi >= 1.0
        self.rho_lo = self.rlo**2
        self.D = self.rhi**2 - self.rho_lo
        a = 0.5 * np.pi * (_X + 1.0)
        f = self.dsda(a[:, None])  # (M, N)
        self.c = _VINV @ f
        self.cint = cheb.chebint(self.c, lbnd=-1, axis=0)
        self.half = 0.5 * np.pi * cheb.chebval(1.0, self.cint)
        self.T = 2 * self.half

    def radius(self, a):
        x = np.where(self.wall, 2 * np.sin(0.25 * a) ** 2, np.sin(0.5 * a) ** 2)
        return np.sqrt(self.rho_lo + self.D * x)

    def _angle_of(self, x):
        """Inverse of the radius map, x = (r^2 - r_lo^2)/D in [0, 1]."""
        return np.where(self.wall, 4 * np.arcsin(np.sqrt(0.5 * x)),
                        2 * np.arcsin(np.sqrt(x)))

    def dsda(self, a):
        r = self.radius(a)
        drho = self.D * np.where(self.wall, 0.5 * np.sin(0.5 * a), 0.5 * np.sin(a))
        g = self.e - self.sign * self.fm.phi(r)
        # rounding can push U below zero on very thin orbits; the floor keeps
        # their (negligible) period bounded
        U = np.maximum(u_tilde(self.fm, self.sign, self.e, self.p, r), 1e-14)
        return 0.5 * g * drho / np.sqrt(U)

    def time(self, a):
        return 0.5 * np.pi * cheb.chebval(a / (0.5 * np.pi) - 1.0, self.cint, tensor=False)

    def rate(self, a):
        return cheb.chebval(a / (0.5 * np.pi) - 1.0, self.c, tensor=False)

    def angle(self, s, iters=60):
        """Invert s(a) for targets s (shape (m, orbits)) in [0, T/2].

        Safeguarded Newton, iterating only on orbits not yet converged.
        """
        s = np.clip(s, 0.0, self.half)
        half = np.where(self.half > 0, self.half, 1.0)
        a = np.pi * s / half
        lo = np.zeros_like(s)
        hi = np.full_like(s, np.pi)
        act = np.arange(s.shape[1])
        tol = 4e-15 * (1 + self.half)
        for _ in range(iters):
            x = a[:, act] / (0.5 * np.pi) - 1.0
            F = 0.5 * np.pi * cheb.chebval(x, self.cint[:, act], tensor=False) - s[:, act]
            done = np.all(np.abs(F) <= tol[act], axis=0)
            if done.all():
                break
            keep = ~done
            act, x, F = act[keep], x[:, keep], F[:, keep]
            l = np.where(F < 0, a[:, act], lo[:, act])
            h = np.where(F >= 0, a[:, act], hi[:, act])
            d = cheb.chebval(x, self.c[:, act], tensor=False)
            an = a[:, act] - np.where(d > 0, F / np.where(d > 0, d, 1.0), np.inf)
            bad = ~((an >= l) & (an <= h))
            a[:, act] = np.where(bad, 0.5 * (l + h), an)
            lo[:, act], hi[:, act] = l, h
        return a

    def state(self, t):
        """State at times t (shape (m, N)) after leaving the inner end.

        Returns r, v_r, v_theta, <v>.
        """
        tt = np.mod(t, self.T)
        out = tt > self.half
        s = np.where(out, self.T - tt, tt)
        a = self.angle(s)
        r = self.radius(a)
        g = self.e - self.sign * self.fm.phi(r)
        U = np.maximum(u_tilde(self.fm, self.sign, self.e, self.p, r), 0.0)
        rr = np.where(r > 0, r, 1.0)
        vr = np.where(r > 0, np.sqrt(U) / rr, np.sqrt(np.maximum(g * g - 1.0, 0.0)))
        vr = np.where(out, -vr, vr)
        vth = np.where(r > 0, self.p / rr - self.sign * self.fm.psi(r), 0.0)
        return r, vr, vth, g

    def phase(self, r0, vr0):
        """Time since the inner end of the points (r0, v_r0) on their orbits."""
        span = np.where(self.D > 0, self.D, 1.0)
        x = np.clip((r0**2 - self.rho_lo) / span, 0.0, 1.0)
        a = self._angle_of(x)
        s = self.time(a)
        return np.where(vr0 >= 0, s, self.T - s)


def q_lambda_points(equilibrium, sign, lam, g, r, vr, vth, order=24):
    """Q_lambda g at many points at once, through the periodic orbit.

    Q g = int_{-T}^0 lam e^{lam t} G(t) dt / (1 - e^{-lam T}) with G the
    values of g one period back; Gauss panels are split where the path
    passes the ends of the radial interval.  lam = 0 returns the orbit
    average.  A list of callables shares the trajectory evaluation and
    gives one row per function.
    """
    many = isinstance(g, (list, tuple))
    gs = list(g) if many else [g]
    fm = field_model(equilibrium)
    r, vr, vth = (np.asarray(a, dtype=float).ravel() for a in np.broadcast_arrays(r, vr, vth))
    e, p = invariants(fm, sign, r, vr, vth)
    rlo, rhi = orbit_bounds(fm, sign, e, p, r)
    tab = OrbitTable(fm, sign, e, p, rlo, rhi)
    s0 = tab.phase(r, vr)
    T, half = tab.T, tab.half
    x, w = np.polynomial.legendre.leggauss(order)
    # breakpoints of [s0 - T, s0] at multiples of T/2
    k0 = np.floor((s0 - T) / half)
    bps = [s0 - T]
    for j in range(1, 4):
        b = (k0 + j) * half
        bps.append(np.clip(b, s0 - T, s0))
    bps.append(s0)
    total = np.zeros((len(gs), r.size))
    for a, b in zip(bps[:-1], bps[1:]):
        mid, hl = 0.5 * (a + b), 0.5 * (b - a)
        t = mid[None, :] + hl[None, :] * x[:, None]
        rr, vrr, vtt, _ = tab.state(t)
        tau = t - s0[None, :]
        # below lam T ~ 1e-12 the weight equals the orbit average to rounding,
        # and the ratio itself loses all digits for subnormal lam
        lt = lam * T
        norm = np.where(lt > 1e-12, lam / -np.expm1(-np.maximum(lt, 1e-12)), 1.0 / T)
        wt = norm[None, :] * np.exp(lam * tau)
        wt = w[:, None] * hl[None, :] * wt
        for i, fn in enumerate(gs):
            total[i] += np.sum(wt * fn(rr, vrr, vtt), axis=0)
    return total if many else total[0]


# orbit grid for operator assembly -----------------------------------------

@dataclass
class OrbitGrid:
    """Phase-space quadrature in orbit coordinates (e, p, t).

    dx dv = 2 pi de dp dt for radial functions, so each orbit o carries the
    weight ``omega[o]`` per time cell.  Each orbit has N (odd) cells of
    length T/N centred at t_m = m T/N, t_0 at the inner end; every cell is
    sampled at k sub-points.  Time reversal maps cell m to cell -m mod N.
    """
    sign: int
    e: np.ndarray
    p: np.ndarray
    T: np.ndarray
    omega: np.ndarray
    N: int
    k: int
    r: np.ndarray
    vr: np.ndarray
    vth: np.ndarray
    gam: np.ndarray
    e_max: float

    @property
    def n_orbits(self):
        return self.e.size

    @property
    def vth_hat(self):
        return self.vth / self.gam

    def sub_weights(self):
        """Quadrature weight of every sub-point, shape (orbits, N, k)."""
        return np.broadcast_to((self.omega / self.k)[:, None, None], self.r.shape)

    def integrate(self, F):
        """Phase-space integral of values given at the sub-points."""
        return float(np.sum(self.sub_weights() * F))

    def mirrored(self):
        return OrbitGrid(-self.sign, self.e.copy(), -self.p, self.T, self.omega,
                         self.N, self.k, self.r, self.vr, -self.vth, self.gam,
                         self.e_max)


def _gauss_panels(lo, hi, breaks, m):
    x, w = np.polynomial.legendre.leggauss(m)
    pts = [lo] + [b for b in breaks if lo < b < hi] + [hi]
    nodes, weights = [], []
    for a, b in zip(pts[:-1], pts[1:]):
        nodes.append(0.5 * (a + b) + 0.5 * (b - a) * x)
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _momentum_rule(g, ps, n_p):
    """Quadrature in p over the momenta reachable at one energy.

    g = e - sign*phi on the sample radii.  The reachable set at radius r is
    r(ps - speed) < p < r(ps + speed); the period has log singularities where
    the orbit topology changes, i.e. at extrema and end values of these two
    boundary curves, so the rule is split there.  Each panel uses Gauss
    nodes under a smoothstep map, which clusters nodes at both ends.
    """
    rf = _RF
    ok = g * g - 1.0 >= 0
    if not ok.any():
        return np.empty(0), np.empty(0)
    speed = np.sqrt(np.maximum(g * g - 1.0, 0.0))
    pts = []
    runs = np.diff(np.concatenate([[0], ok.astype(np.int8), [0]]))
    ends = np.concatenate([np.nonzero(runs == 1)[0], np.nonzero(runs == -1)[0] - 1])
    for curve in (rf * (ps - speed), rf * (ps + speed)):
        c = np.where(ok, curve, np.nan)
        d = np.diff(c)
        with np.errstate(invalid="ignore"):
            turn = np.nonzero(d[:-1] * d[1:] < 0)[0] + 1
        pts.extend(c[turn])
        pts.extend(c[ends])
    pts = np.sort(np.asarray(pts))
    lo, hi = pts[0], pts[-1]
    span = hi - lo
    if span <= 0:
        return np.empty(0), np.empty(0)
    keep = np.concatenate([[True], np.diff(pts) > 1e-9 * span])
    pts = pts[keep]
    if pts[-1] < hi:
        pts[-1] = hi
    nodes, weights = [], []
    for a, b in zip(pts[:-1], pts[1:]):
        m = max(4, int(math.ceil(n_p * (b - a) / span)))
        u, wu = np.polynomial.legendre.leggauss(m)
        u, wu = 0.5 * (u + 1), 0.5 * wu
        nodes.append(a + (b - a) * u * u * (3 - 2 * u))
        weights.append((b - a) * 6 * u * (1 - u) * wu)
    return np.concatenate(nodes), np.concatenate(weights)


def build_orbit_grid(equilibrium, sign, V_max, N, k=4, n_e=8, n_p=24):
    """Sample every orbit with invariants up to the speed cutoff V_max.

    Energies use Gauss panels of width 0.5, 1, 2, 4, ... above the lowest
    reachable energy; momenta use Gauss nodes in an angle chi with
    p = p_c + p_h sin(chi), which absorbs the square-root edge of the
    reachable set.
    """
    fm = field_model(equilibrium)
    if N % 2 == 0:
        raise ValueError("cells per orbit must be odd")
    if sign < 0 and fm.phi0_zero:
        return build_orbit_grid(fm, 1, V_max, N, k, n_e, n_p).mirrored()
    rf = _RF
    phi_f = sign * fm.phi(rf)
    e_min = float(np.min(1.0 + phi_f))
    e_max = float(math.sqrt(1 + V_max**2) + np.max(phi_f))
    breaks, b, width = [], e_min, 0.5
    while b + width < e_max:
        b += width
        breaks.append(b)
        width *= 2
    # the energy-shell measure has kinks where e - 1 crosses a critical value
    # of the potential (ends of [0, 1] and interior extrema)
    crit = [phi_f[0], phi_f[-1]]
    d = np.diff(phi_f)
    turn = np.nonzero(d[:-1] * d[1:] < 0)[0] + 1
    crit += list(phi_f[turn])
    breaks = sorted(set(breaks) | {1.0 + c for c in crit if 1.0 + c > e_min + 1e-12})
    E, WE = _gauss_panels(e_min, e_max, breaks, n_e)
    ps = sign * fm.psi(rf)
    Ef, P, W = [], [], []
    for e_i, w_i in zip(E, WE):
        p_i, wp_i = _momentum_rule(e_i - phi_f, ps, n_p)
        Ef.append(np.full(p_i.size, e_i))
        P.append(p_i)
        W.append(w_i * wp_i)
    Ef, P, W = np.concatenate(Ef), np.concatenate(P), np.concatenate(W)
    idx, rlo, rhi = orbit_intervals(fm, sign, Ef, P)
    thick = rhi**2 - rlo**2 > 1e-10
    idx, rlo, rhi = idx[thick], rlo[thick], rhi[thick]
    e_o, p_o, w_o = Ef[idx], P[idx], W[idx]
    tab = OrbitTable(fm, sign, e_o, p_o, rlo, rhi)
    T = tab.T
    # sub-point times, (N*k, orbits)
    frac = (np.arange(N)[:, None] + (np.arange(k)[None, :] + 0.5) / k - 0.5).ravel() / N
    t = frac[:, None] * T[None, :]
    r, vr, vth, gam = tab.state(t)
    shape = (N, k, e_o.size)
    arr = [a.reshape(shape).transpose(2, 0, 1).copy() for a in (r, vr, vth, gam)]
    # exact time-reversal symmetry of the samples: cell -m mirrors cell m
    rev = (-np.arange(N)) % N
    for j, a in enumerate(arr):
        mirror = a[:, rev, ::-1]
        arr[j] = 0.5 * (a + mirror) if j != 1 else 0.5 * (a - mirror)
    omega = 2 * np.pi * w_o * T / N
    return OrbitGrid(sign, e_o, p_o, T, omega, N, k, *arr, e_max)
