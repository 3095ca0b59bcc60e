"""Stability verdicts, the lambda continuation and growing modes.

The verdict is the sign of kappa0, the smallest eigenvalue of L at
lambda = 0.  In the unstable case kappa(lambda) is followed up the real
axis until it changes sign; its zero lambda* is the growth rate, and the
eigenvector there gives the mode (psi, phi, f).
"""
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
from scipy.linalg import LinAlgError, eigh
from scipy.optimize import brentq

from . import profiles as profiles_mod
from .discretization import _flux_matrix, build_grid, build_velocity_quad
from .equilibrium import (solve_equilibrium, solve_psi0_dirichlet,
                          vacuum_equilibrium)
from .kernelproj import orbit_space, radial_integral
from .operators import (_dirichlet_form, assemble_L, projection_term,
                        smallest_L_eig)
from .phasespace import OrbitSpace, hat_matrix
from .trajectories import OrbitTable, invariants, orbit_intervals, q_lambda_points

LAMBDA_MIN, LAMBDA_MAX, SCAN_POINTS = 1e-2, 1e2, 25

MODE_GATES = {"maxwell_poisson": 1e-4, "maxwell_ampere": 1e-4, "jr_identity": 1e-4,
              "specularity": 1e-6, "invariant_relative": 1e-4, "casimir": 1e-4}


class StabilityError(RuntimeError):
    pass


def kappa(operator_set):
    """(kappa, psi): smallest eigenvalue of L and its unit L^2 eigenvector."""
    try:
        return smallest_L_eig(operator_set)
    except (LinAlgError, ValueError) as exc:
        raise StabilityError("eigensolve failed at lambda=%g: %s"
                             % (operator_set.lam, exc)) from exc


def resolve(equilibrium, grid):
    """The same equilibrium recomputed on another radial grid."""
    if equilibrium.grid.n == grid.n:
        return equilibrium
    prof = equilibrium.profile
    if prof.is_zero:
        return vacuum_equilibrium(prof, grid, equilibrium.quad)
    if equilibrium.variant.startswith("dirichlet"):
        init = None
        if equilibrium.variant == "dirichlet-newton":
            init = np.interp(grid.nodes, equilibrium.grid.nodes, equilibrium.psi0)
        return solve_psi0_dirichlet(prof, grid, equilibrium.quad, tol=equilibrium.tol,
                                    psi_init=init)
    return solve_equilibrium(prof, equilibrium.alpha, equilibrium.beta, grid,
                             equilibrium.quad, tol=equilibrium.tol)


# spectral curve --------------------------------------------------------------

@dataclass
class SpectralCurve:
    """kappa(lambda) samples with the bracket and root found on them."""
    lambdas: list = field(default_factory=list)
    kappas: list = field(default_factory=list)
    vectors: list = field(default_factory=list)
    kappa0: float = None
    bracket: tuple = None
    lambda_star: float = None
    kappa_star: float = None
    psi_star: np.ndarray = None
    tol: float = 1e-6
    evaluations: int = 0
    notes: list = field(default_factory=list)

    def add(self, lam, k, psi):
        self.lambdas.append(float(lam))
        self.kappas.append(float(k))
        self.vectors.append(psi)
        self.evaluations += 1

    def rows(self):
        order = np.argsort(self.lambdas)
        return [(self.lambdas[i], self.kappas[i]) for i in order]

    @property
    def positive_at_top(self):
        i = int(np.argmax(self.lambdas))
        return self.kappas[i] > 0

    def small_lambda_fit(self):
        """kappa0 extrapolated from the two smallest positive lambdas.

        Fits kappa = a + b lambda^2 (kappa is even in lambda to leading order
        once the projections have converged).
        """
        pts = sorted((l, k) for l, k in zip(self.lambdas, self.kappas) if l > 0)[:2]
        if len(pts) < 2:
            return None
        (l1, k1), (l2, k2) = pts
        b = (k2 - k1) / (l2 * l2 - l1 * l1)
        return k1 - b * l1 * l1


def _kappa_at(equilibrium, lam, proj=None):
    ops = assemble_L(equilibrium, lam, proj=proj)
    return kappa(ops)


def find_lambda_star(equilibrium, lam_min=LAMBDA_MIN, lam_max=LAMBDA_MAX, tol=1e-6,
                     points=SCAN_POINTS, proj=None, jobs=1, kappa0=None, max_iter=200):
    """Scan kappa(lambda) geometrically, then bisect the first sign change.

    kappa0 (lambda = 0, projections) is used as the left end when kappa is
    already positive at lam_min, so the bracket is never extrapolated.
    Without a sign change up to lam_max the curve is returned with
    ``lambda_star = None`` and a warning.
    """
    if not 0 < lam_min < lam_max:
        raise ValueError("need 0 < lam_min < lam_max")
    curve = SpectralCurve(tol=tol)
    if kappa0 is None:
        kappa0 = _kappa_at(equilibrium, 0.0, proj)[0]
    curve.kappa0 = float(kappa0)
    lams = np.geomspace(lam_min, lam_max, points)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            res = list(ex.map(lambda l: _kappa_at(equilibrium, l, proj), lams))
    else:
        res = [_kappa_at(equilibrium, l, proj) for l in lams]
    for lam, (k, v) in zip(lams, res):
        curve.add(lam, k, v)
    if not curve.positive_at_top:
        curve.notes.append("kappa(%g) = %.6g <= 0: no sign change up to lam_max; the "
                           "discrete operators contradict kappa >= lambda^2 - C"
                           % (lam_max, curve.kappas[-1]))
        warnings.warn(curve.notes[-1])
        return curve
    ks = [curve.kappa0] + curve.kappas[:points]
    ls = [0.0] + list(lams)
    i = next(j for j in range(1, len(ks)) if ks[j] > 0)
    if ks[i - 1] > 0:
        curve.notes.append("kappa0 = %.6g is not negative; nothing to bracket" % ks[0])
        return curve
    a, b = ls[i - 1], ls[i]
    ka, kb = ks[i - 1], ks[i]
    curve.bracket = (a, b)
    best = (abs(kb), b, kb, curve.vectors[i - 1])
    for _ in range(max_iter):
        c = 0.5 * (a + b)
        if c <= a or c >= b:
            break
        kc, vc = _kappa_at(equilibrium, c, proj)
        curve.add(c, kc, vc)
        if abs(kc) < best[0]:
            best = (abs(kc), c, kc, vc)
        if abs(kc) <= tol:
            break
        if kc < 0:
            a, ka = c, kc
        else:
            b, kb = c, kc
    _, curve.lambda_star, curve.kappa_star, curve.psi_star = best
    if abs(curve.kappa_star) > tol:
        curve.notes.append("bisection stopped at |kappa| = %.3e > tol" % abs(curve.kappa_star))
    return curve


# growing mode ----------------------------------------------------------------

def _vhat(vr, vth):
    return vth / np.sqrt(1.0 + vr * vr + vth * vth)


class ModeDistribution:
    """The perturbation f(sign, r, v_r, v_theta) of a mode.

    f = sign [mu_e (1 - Q) phi + r mu_p psi + mu_e Q(vth_hat psi)], with Q
    the trajectory average at the mode's lambda (the projection at 0).
    Calling the object evaluates it pointwise through the true trajectory;
    ``subpoints`` gives its values on the orbit grid of a species.
    """

    def __init__(self, equilibrium, lam, phi, psi, space=None):
        self.eq = equilibrium
        self.lam = float(lam)
        self.phi = np.asarray(phi, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        self.space = space if space is not None else orbit_space(equilibrium)
        self.grid = equilibrium.grid

    def cell_part(self, sp):
        """(1 - Q) phi + Q(vth_hat psi) as cell sequences, shape (O, N)."""
        xp = sp.cells(self.phi, "phi")
        xj = sp.cells(self.psi, "vpsi")
        return xp - sp.apply_q(self.lam, xp) + sp.apply_q(self.lam, xj)

    def transport_part(self, sp):
        """sign mu_e (1 - Q)(phi - vth_hat psi) on the cells, broadcast to the
        sub-points.  f minus this part is psi d(mu)/dv_theta, whose charge and
        radial current vanish after the velocity integration."""
        x = sp.cells(self.phi, "phi") - sp.cells(self.psi, "vpsi")
        c = sp.sign * sp.mu_e[:, None] * (x - sp.apply_q(self.lam, x))
        return np.broadcast_to(c[:, :, None], sp.og.r.shape)

    def subpoints(self, sp):
        og = sp.og
        c = self.cell_part(sp)
        psi_s = (sp.S_psi @ self.psi).reshape(og.r.shape)
        return sp.sign * (sp.mu_e[:, None, None] * c[:, :, None]
                          + og.r * sp.mu_p[:, None, None] * psi_s)

    def __call__(self, sign, r, vr, vth):
        r, vr, vth = (np.asarray(a, dtype=float) for a in np.broadcast_arrays(r, vr, vth))
        shape = r.shape
        r, vr, vth = r.ravel(), vr.ravel(), vth.ravel()
        prof = self.eq.profile
        e, p = invariants(self.eq.field_model, sign, r, vr, vth)
        g = self.grid

        def source(rr, vrr, vtt):
            rr = np.asarray(rr)
            shp = rr.shape
            ps = hat_matrix(g, rr, "psi") @ self.psi
            ph = hat_matrix(g, rr, "phi") @ self.phi
            return (_vhat(vrr, vtt).ravel() * ps - ph).reshape(shp)
        Qs = q_lambda_points(self.eq, sign, self.lam, source, r, vr, vth)
        phi_r = hat_matrix(g, r, "phi") @ self.phi
        psi_r = hat_matrix(g, r, "psi") @ self.psi
        f = sign * (prof.mu_e(sign, e, p) * (phi_r + Qs) + r * prof.mu_p(sign, e, p) * psi_r)
        return f.reshape(shape)


def _subpoint_values(f, sp):
    if hasattr(f, "subpoints"):
        return f.subpoints(sp)
    og = sp.og
    return np.asarray(f(sp.sign, og.r, og.vr, og.vth), dtype=float)


def _sub_weights(sp):
    return (sp.og.omega / sp.k)[:, None, None]


def invariant_I(equilibrium, f, phi, psi, psi_t, space=None, parts=False):
    """The conserved quadratic functional of a state (f, phi, psi, psi_t).

    sum_s int [ |f - s r mu_p psi|^2 / |mu_e| - r mu_p vth_hat |psi|^2 ]
      + int |grad phi|^2 + |psi_t|^2 + |B|^2,
    by quadrature on the orbit grid and the radial grid.  ``f`` is a
    ModeDistribution or any callable f(sign, r, v_r, v_theta).
    """
    grid = equilibrium.grid
    phi, psi, psi_t = (np.asarray(a, dtype=float) for a in (phi, psi, psi_t))
    out = {"electric": float(phi @ _flux_matrix(grid) @ phi),
           "magnetic": float(psi @ _dirichlet_form(grid) @ psi),
           "inductive": grid.inner(psi_t, psi_t), "kinetic": 0.0, "local": 0.0}
    if not equilibrium.profile.is_zero:
        space = space if space is not None else orbit_space(equilibrium)
        for sp in space.species:
            F = _subpoint_values(f, sp)
            psi_s = (sp.S_psi @ psi).reshape(sp.og.r.shape)
            G = F - sp.sign * sp.og.r * sp.mu_p[:, None, None] * psi_s
            me = np.abs(sp.mu_e)[:, None, None]
            inv = np.divide(1.0, me, out=np.zeros_like(me), where=me > 0)
            out["kinetic"] += float(np.sum(_sub_weights(sp) * inv * G * G))
            out["local"] += float(psi @ sp.M_loc @ psi)
    total = sum(out.values())
    if parts:
        out["total"] = total
        out["norm2"] = sum(abs(v) for k, v in out.items() if k != "total")
        return out
    return total


def invariant_fn(equilibrium, fn):
    """Phase-space function (r, v_r, v_theta, sign) -> fn(e, p) of the invariants."""
    fm = equilibrium.field_model

    def g(r, vr, vth, sign):
        e, p = invariants(fm, sign, r, vr, vth)
        return fn(e, p)
    return g


def casimir_K(equilibrium, f, psi, g, sign=None, space=None, kernel_tol=1e-6):
    """int (f - s mu_e vth_hat psi - s r mu_p psi) g over phase space.

    ``g(r, v_r, v_theta, sign)`` must be constant along the orbits; it is
    checked on the orbit grid and rejected otherwise.  Returns a dict over
    both species, or the value for ``sign``.
    """
    psi = np.asarray(psi, dtype=float)
    space = space if space is not None else orbit_space(equilibrium)
    out = {}
    for sp in space.species:
        if sign is not None and sp.sign != sign:
            continue
        og = sp.og
        G = np.asarray(g(og.r, og.vr, og.vth, sp.sign), dtype=float) * np.ones(og.r.shape)
        scale = max(np.max(np.abs(G)), 1e-300)
        drift = np.max(np.abs(G - G.mean(axis=(1, 2), keepdims=True)))
        if drift > kernel_tol * scale:
            raise ValueError("g is not constant along the orbits (variation %.2e relative)"
                             % (drift / scale))
        F = _subpoint_values(f, sp)
        psi_s = (sp.S_psi @ psi).reshape(og.r.shape)
        H = F - sp.sign * (sp.mu_e[:, None, None] * og.vth_hat
                           + og.r * sp.mu_p[:, None, None]) * psi_s
        out[sp.sign] = float(np.sum(_sub_weights(sp) * H * G))
    return out if sign is None else out[sign]


@dataclass
class GrowingMode:
    lambda_star: float
    psi: np.ndarray
    phi: np.ndarray
    f: ModeDistribution
    residuals: dict
    accepted: bool
    rejections: list = field(default_factory=list)
    kappa: float = None

    def rows(self):
        return list(zip(self.f.grid.nodes, self.psi, self.phi))


def _weak_moments(space, grid, F_of):
    """Weak charge, current and radial-current forms of sum_s s f."""
    rho = np.zeros(grid.n)
    jth = np.zeros(grid.n)
    jr = np.zeros(grid.n)
    for sp in space.species:
        og = sp.og
        wF = (_sub_weights(sp) * sp.sign * F_of(sp)).ravel()
        rs = og.r.ravel()
        rho += hat_matrix(grid, rs, "phi").T @ wF
        jth += sp.S_psi.T @ (wF * og.vth_hat.ravel())
        jr += _hat_slope(grid, rs).T @ (wF * (og.vr / og.gam).ravel())
    return rho, jth, jr


def _spectral_jr(space, dist):
    """Weak radial current -sum_s s int chi D f, D the spectral time derivative.

    int j_r chi' dx = int f D(chi) = -int chi D(f) along the orbits, with f the
    transport part on the cells.
    """
    out = np.zeros(dist.grid.n)
    for sp in space.species:
        F = dist.transport_part(sp)[:, :, 0]
        dF = sp.derivative(F) * sp.og.omega[:, None]
        out -= sp.sign * (sp.I_phi.T @ dF.ravel())
    return out


def _hat_slope(grid, r):
    """d/dr of the 'phi' hat functions at radii r (zero outside [r_1, r_n])."""
    n, h = grid.n, grid.h
    x = r / h - 0.5
    j = np.floor(x).astype(int)
    inner = (j >= 0) & (j <= n - 2)
    rows = np.nonzero(inner)[0]
    ji = j[inner]
    vals = np.concatenate([np.full(ji.size, -1.0 / h), np.full(ji.size, 1.0 / h)])
    return sparse.csr_matrix((vals, (np.concatenate([rows, rows]), np.concatenate([ji, ji + 1]))),
                         shape=(r.size, n))


def _vlasov_fd(eq, dist, count=12, seed=0, h_rel=1e-4):
    """Pointwise residual of the linearized Vlasov equation along trajectories.

    Central differences in time at points whose stencil stays inside one
    grid cell (the potentials are piecewise linear).  Diagnostic only.
    """
    rng = np.random.default_rng(seed)
    grid = eq.grid
    worst = 0.0
    prof = eq.profile
    for sp in dist.space.species:
        og = sp.og
        pick = rng.choice(og.e.size, size=min(count, og.e.size), replace=False)
        idx, lo, hi = orbit_intervals(eq.field_model, sp.sign, og.e[pick], og.p[pick])
        if idx.size == 0:
            continue
        tab = OrbitTable(eq.field_model, sp.sign, og.e[pick][idx], og.p[pick][idx], lo, hi)
        t0 = rng.uniform(0.05, 0.45, size=idx.size) * tab.T
        h = h_rel * tab.T
        ts = np.stack([t0 - h, t0, t0 + h])
        r, vr, vth, gam = tab.state(ts)
        cell = np.floor(r / grid.h - 0.5)
        ok = (cell[0] == cell[1]) & (cell[1] == cell[2]) & (r[1] > 0)
        if not np.any(ok):
            continue
        r, vr, vth = r[:, ok], vr[:, ok], vth[:, ok]
        f = np.stack([dist(sp.sign, r[i], vr[i], vth[i]) for i in range(3)])
        phi = np.stack([hat_matrix(grid, r[i], "phi") @ dist.phi for i in range(3)])
        rpsi = np.stack([r[i] * (hat_matrix(grid, r[i], "psi") @ dist.psi) for i in range(3)])
        e, p = invariants(eq.field_model, sp.sign, r[1], vr[1], vth[1])
        me, mp = prof.mu_e(sp.sign, e, p), prof.mu_p(sp.sign, e, p)
        hh = h[ok]
        lam = dist.lam
        lhs = (f[2] - f[0]) / (2 * hh) + lam * f[1]
        rhs = sp.sign * (me * (phi[2] - phi[0]) / (2 * hh) + mp * (rpsi[2] - rpsi[0]) / (2 * hh)
                         + lam * (me * _vhat(vr[1], vth[1]) + mp * r[1]) * rpsi[1] / r[1])
        scale = np.max(np.abs(lam * f[1])) + np.max(np.abs(rhs)) + 1e-300
        worst = max(worst, float(np.max(np.abs(lhs - rhs)) / scale))
    return worst


def reconstruct_mode(equilibrium, lambda_star, psi, ops=None, gates=None, seed=0,
                     spec_samples=64, vlasov_samples=12):
    """Mode (psi, phi, f) at lambda* with its residual report.

    psi is normalised to unit L^2 norm; phi solves A1 phi = B psi with zero
    disk average.  Residual gates default to MODE_GATES; a mode failing any
    gate is returned with ``accepted = False`` and the reasons listed.
    """
    eq = equilibrium
    grid = eq.grid
    lam = float(lambda_star)
    gates = dict(MODE_GATES, **(gates or {}))
    if ops is None:
        ops = assemble_L(eq, lam)
    psi = np.asarray(psi, dtype=float)
    psi = psi / grid.norm(psi)
    phi = ops.solve_A1(ops.B @ psi)
    space = orbit_space(eq)
    dist = ModeDistribution(eq, lam, phi, psi, space)
    res = {}
    Lpsi = ops.L @ psi
    res["L_residual"] = grid.norm(Lpsi)
    res["phi_mean"] = abs(grid.mean(phi))

    SN = _flux_matrix(grid)
    field_form = (_dirichlet_form(grid) + lam * lam * np.diag(grid.weights)) @ psi
    zero = np.zeros(grid.n)
    rho = jth = jr = rho_t = jr_t = zero
    if not eq.profile.is_zero:
        cache = {}

        def full(sp):
            if id(sp) not in cache:
                cache[id(sp)] = dist.subpoints(sp)
            return cache[id(sp)]
        rho, jth, jr = _weak_moments(space, grid, full)
        rho_t, _, _ = _weak_moments(space, grid, dist.transport_part)
        jr_t = _spectral_jr(space, dist)
    w = grid.weights
    scale = np.max(np.abs(field_form / w)) or 1.0
    interior = slice(1, grid.n - 1)

    def rel(v):
        return float(np.max(np.abs((v / w)[interior])) / scale)
    # charge and radial current with the d(mu)/dv_theta part integrated out
    # exactly, as in the operators; the fully sampled versions are diagnostics
    res["maxwell_poisson"] = rel(SN @ phi - rho_t)
    res["jr_identity"] = rel(lam * (SN @ phi) - jr_t)
    res["poisson_sampled"] = rel(SN @ phi - rho)
    res["jr_sampled"] = rel(lam * (SN @ phi) - jr)
    res["maxwell_ampere"] = rel(field_form - jth)

    # specular reflection at the wall
    rng = np.random.default_rng(seed)
    vr = np.abs(rng.normal(size=spec_samples)) * 1.5 + 0.05
    vth = rng.normal(size=spec_samples) * 1.5
    one = np.ones(spec_samples)
    spec = 0.0
    if not eq.profile.is_zero:
        for sg in (1, -1):
            a = dist(sg, one, vr, vth)
            b = dist(sg, one, -vr, vth)
            spec = max(spec, float(np.max(np.abs(a - b)) / (np.max(np.abs(a)) + 1e-300)))
    res["specularity"] = spec

    parts = invariant_I(eq, dist, phi, psi, lam * psi, space, parts=True)
    res["invariant_I"] = parts["total"]
    res["mode_norm2"] = parts["norm2"]
    res["invariant_relative"] = abs(parts["total"]) / parts["norm2"]
    if eq.profile.is_zero:
        cas = {"1": {1: 0.0, -1: 0.0}, "e": {1: 0.0, -1: 0.0}}
    else:
        cas = {"1": casimir_K(eq, dist, psi, lambda r, vr, vth, s: np.ones_like(r), space=space),
               "e": casimir_K(eq, dist, psi, invariant_fn(eq, lambda e, p: e), space=space)}
    for name, d in cas.items():
        for sg, v in d.items():
            res["casimir_%s_%s" % (name, "plus" if sg > 0 else "minus")] = v
    res["casimir"] = max(abs(v) for d in cas.values() for v in d.values())
    if not eq.profile.is_zero and vlasov_samples:
        res["vlasov_fd"] = _vlasov_fd(eq, dist, vlasov_samples, seed)

    bad = [k for k, tol in gates.items() if not res.get(k, 0.0) <= tol]
    return GrowingMode(lam, psi, phi, dist, res, not bad,
                       ["%s = %.3e > %.1e" % (k, res[k], gates[k]) for k in bad],
                       float(grid.inner(Lpsi, psi)))


# test function -----------------------------------------------------------------

def build_psi_star(grid):
    """Antisymmetric test function r(1/2 - r) on [0, 1/2], -psi(1 - r) beyond.

    Normalised so that the discrete gradient form psi' S_D psi equals 1.
    """
    r = grid.nodes
    psi = np.where(r <= 0.5, r * (0.5 - r), -(1 - r) * (0.5 - (1 - r)))
    return psi / np.sqrt(psi @ _dirichlet_form(grid) @ psi)


# certificates ------------------------------------------------------------------

@dataclass
class Certificate:
    name: str
    hypothesis: bool
    value: float
    threshold: float
    conclusion: str
    consistent: object = None
    details: dict = field(default_factory=dict)

    def line(self):
        cons = {True: "consistent", False: "INCONSISTENT", None: "n/a"}[self.consistent]
        return "%-22s hypothesis=%s value=%.6g threshold=%.6g conclusion=%s %s" % (
            self.name, "holds" if self.hypothesis else "fails", self.value,
            self.threshold, self.conclusion, cons)


def _velocity_moments(eq, quad):
    """Per-node velocity integrals of the equilibrium used by the certificates."""
    r = eq.grid.nodes[:, None]
    gam = quad.gamma_v[None, :]
    vth = quad.vth[None, :]
    prof = eq.profile
    out = {}
    for sg in (1, -1):
        e = gam + sg * eq.phi0[:, None]
        p = r * (vth + sg * eq.psi0[:, None])
        mp = prof.mu_p(sg, e, p)
        me = prof.mu_e(sg, e, p)
        out[sg] = {"abs_mu_p_over_v": (np.abs(mp) / gam) @ quad.weights,
                   "p_mu_p_over_v": (p * mp / gam) @ quad.weights,
                   "p2_mu_e_over_v2": (p * p * me / gam**2) @ quad.weights,
                   "abs_mu_e_over_v2": (np.abs(me) / gam**2) @ quad.weights,
                   "r_vhat_mu_p": (r * vth / gam * mp) @ quad.weights}
    return out


def poincare_constant(grid):
    """Smallest c0 with int r |psi|^2 dx <= c0 psi' S_D psi on the grid."""
    vals = eigh(_dirichlet_form(grid), np.diag(grid.weights * grid.nodes),
                eigvals_only=True, subset_by_index=[0, 0])
    return float(1.0 / vals[0])


def _net(eq, count=48):
    V = eq.quad.V_max if eq.quad is not None else 20.0
    return profiles_mod.sampling_net(count, V, float(np.max(np.abs(eq.phi0))),
                                     float(np.max(np.abs(eq.psi0))))


def magnetic_bound_terms(eq, psi, quad=None):
    """Terms of the upper bound on <A2 psi, psi> for purely magnetic
    equilibria with mirrored species (closed-form projection)."""
    grid = eq.grid
    quad = quad if quad is not None else eq.quad
    m = _velocity_moments(eq, quad)[-1]
    w, r = grid.weights, grid.nodes
    psi_R = radial_integral(psi, grid)
    R0 = radial_integral(r * eq.psi0 * psi, grid)
    t = {"I": float(psi @ _dirichlet_form(grid) @ psi),
         "IIA": float(-2 * np.sum(w * m["p_mu_p_over_v"] * psi**2)),
         "IIIA": float(-16 * np.sum(w * m["p2_mu_e_over_v2"]) * psi_R**2),
         "IIB": float(2 * np.max(m["abs_mu_p_over_v"]) * np.sum(w * r * np.abs(eq.psi0) * psi**2)),
         "IIIB": float(16 * np.max(m["abs_mu_e_over_v2"]) * R0**2)}
    t["bound"] = sum(t.values())
    return t


def theorem_certificates(equilibrium, kappa0=None, quad=None, form=None):
    """Sufficient stability and instability conditions checked on an equilibrium.

    Each certificate reports whether its hypothesis holds on the sampling
    net, the value it certifies and, when kappa0 is supplied, whether the
    conclusion agrees with the computed spectrum.
    """
    eq = equilibrium
    prof = eq.profile
    grid = eq.grid
    if quad is None:
        quad = eq.quad if eq.quad is not None else build_velocity_quad(prof)
    certs = []
    if prof.is_zero:
        certs.append(Certificate("vacuum", True, 0.0, 0.0, "stable",
                                 None if kappa0 is None else kappa0 > 0))
        return certs
    E, P = _net(eq)
    mom = _velocity_moments(eq, quad)
    sup_psi0 = float(np.max(np.abs(eq.psi0)))

    # p mu_p <= 0 with small psi0
    pmp = max(float(np.max(P * prof.mu_p(sg, E, P))) for sg in (1, -1))
    c0 = poincare_constant(grid)
    S = float(np.max(mom[1]["abs_mu_p_over_v"] + mom[-1]["abs_mu_p_over_v"]))
    val = c0 * sup_psi0 * S
    hyp = pmp <= 1e-14
    certs.append(Certificate("nonpositive-p-mu_p", hyp, val, 1.0,
                             "stable" if hyp and val <= 1 else "none",
                             None if kappa0 is None or not (hyp and val <= 1) else kappa0 > 0,
                             {"max_p_mu_p": pmp, "poincare_c0": c0, "sup_psi0": sup_psi0,
                              "sup_int_mu_p": S}))

    # small |mu_p| with phi0 = 0: the local term against the Dirichlet gap
    eps = max(float(np.max(np.abs(prof.mu_p(sg, E, P)) * (1 + np.abs(E) ** prof.gamma)))
              for sg in (1, -1))
    local = float(np.max(np.abs(mom[1]["r_vhat_mu_p"] + mom[-1]["r_vhat_mu_p"])))
    gap = float(eigh(_dirichlet_form(grid), np.diag(grid.weights), eigvals_only=True,
                     subset_by_index=[0, 0])[0])
    hyp2 = not np.any(eq.phi0)
    ok2 = hyp2 and local < gap
    certs.append(Certificate("small-mu_p", hyp2, local, gap,
                             "stable" if ok2 else "none",
                             None if kappa0 is None or not ok2 else kappa0 > 0,
                             {"epsilon": eps, "gamma": prof.gamma}))

    # lower bound p mu-_p >= c0 p^2 nu(e) under mirrored species
    sym = profiles_mod.is_symmetric(prof)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(P != 0, P * prof.mu_p(-1, E, P) / (P * P), np.inf)
    if prof.nu is not None and prof.c0 is not None:
        nu = prof.nu(E)
        slack = float(np.min(P * prof.mu_p(-1, E, P) - prof.c0 * P * P * nu))
        hyp3 = sym and prof.c0 > 0 and slack >= -1e-12 * (1 + np.max(np.abs(P * P * nu)))
        det = {"c0": prof.c0, "slack": slack}
    else:
        hyp3 = sym and float(np.min(ratio)) >= 0 and float(np.max(ratio[np.isfinite(ratio)])) > 0
        det = {"min_ratio": float(np.min(ratio))}
    det["mirrored_species"] = sym
    psi_star = build_psi_star(grid)
    if form is None:
        ops = assemble_L(eq, 0.0)
        form = grid.inner(ops.A2 @ psi_star, psi_star)
    det["psi_star_form"] = form
    unstable = hyp3 and form < 0
    certs.append(Certificate("momentum-lower-bound", hyp3, form, 0.0,
                             "unstable" if unstable else "none",
                             None if kappa0 is None or not unstable else kappa0 < 0, det))
    if eq.kind in ("homogeneous", "magnetic") and sym:
        t = magnetic_bound_terms(eq, psi_star, quad)
        certs.append(Certificate("magnetic-bound", hyp3, t["bound"], 0.0,
                                 "unstable" if hyp3 and t["bound"] < 0 else "none",
                                 None if kappa0 is None or not (hyp3 and t["bound"] < 0)
                                 else kappa0 < 0, dict(t, psi_star_form=form)))
    return certs


# verdict -----------------------------------------------------------------------

@dataclass
class StabilityReport:
    verdict: str
    kappa0: float
    margin: float
    n: int
    kappa_ref: float
    n_ref: int
    psi: np.ndarray
    certificates: list = field(default_factory=list)
    mode: GrowingMode = None
    curve: SpectralCurve = None
    diagnostics: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_text(self):
        lines = ["verdict = %s" % self.verdict,
                 "kappa0 = %.12g" % self.kappa0,
                 "margin = %.6g" % self.margin,
                 "n = %d" % self.n,
                 "kappa0_reference = %.12g" % self.kappa_ref,
                 "n_reference = %d" % self.n_ref]
        lines.append("[diagnostics]")
        for k in sorted(self.diagnostics):
            lines.append("%s = %s" % (k, _fmt(self.diagnostics[k])))
        if self.certificates:
            lines.append("[certificates]")
            lines += [c.line() for c in self.certificates]
        if self.curve is not None:
            lines.append("[spectral_curve]")
            lines.append("lambda_star = %s" % _fmt(self.curve.lambda_star))
            lines.append("kappa_star = %s" % _fmt(self.curve.kappa_star))
            lines.append("bracket = %s" % (None if self.curve.bracket is None else
                                           tuple(float(x) for x in self.curve.bracket),))
            lines.append("evaluations = %d" % self.curve.evaluations)
        if self.mode is not None:
            lines.append("[mode]")
            lines.append("accepted = %s" % self.mode.accepted)
            for k in sorted(self.mode.residuals):
                lines.append("%s = %s" % (k, _fmt(self.mode.residuals[k])))
            lines += ["rejected: " + s for s in self.mode.rejections]
        if self.notes:
            lines.append("[notes]")
            lines += self.notes
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return "%.9g" % v
    return str(v)


def verdict(equilibrium, grid=None, quad=None, margin=None, refine="coarse", search=True,
            lam_min=LAMBDA_MIN, lam_max=LAMBDA_MAX, tol=1e-6, certificates=True, jobs=1):
    """Stable / unstable / inconclusive from the sign of kappa0.

    The margin is 10x the shift of kappa0 between this grid and a reference
    grid (n/2 for refine='coarse', 2n for 'fine').  An unstable verdict
    launches the lambda search and the mode reconstruction when ``search``.
    """
    eq = equilibrium if grid is None else resolve(equilibrium, grid)
    g = eq.grid
    ops = assemble_L(eq, 0.0)
    k0, psi = kappa(ops)
    n_ref = g.n // 2 if refine == "coarse" else 2 * g.n
    if n_ref < 8:
        n_ref = 2 * g.n
    eq_ref = resolve(eq, build_grid(n_ref))
    k_ref = kappa(assemble_L(eq_ref, 0.0))[0]
    if margin is None:
        margin = max(10 * abs(k0 - k_ref), 1e-10 * max(1.0, abs(k0)))
    if k0 >= margin:
        v = "stable"
    elif k0 <= -margin:
        v = "unstable"
    else:
        v = "inconclusive"
    diag = dict(ops.diagnostics)
    diag["refinement_shift"] = abs(k0 - k_ref)
    rep = StabilityReport(v, float(k0), float(margin), g.n, float(k_ref), n_ref, psi,
                          diagnostics=diag)
    if v == "inconclusive":
        rep.notes.append("|kappa0| below the discretisation margin; refine to n=%d" % (2 * g.n))
    if certificates:
        ps = build_psi_star(g)
        rep.certificates = theorem_certificates(eq, k0, quad,
                                                form=g.inner(ops.A2 @ ps, ps))
    if v == "unstable" and search:
        curve = find_lambda_star(eq, lam_min, lam_max, tol, proj=None, jobs=jobs, kappa0=k0)
        rep.curve = curve
        if curve.lambda_star is not None:
            rep.mode = reconstruct_mode(eq, curve.lambda_star, curve.psi_star)
        else:
            rep.notes.append("no growing mode located: " + "; ".join(curve.notes))
    return rep


# K sweeps ------------------------------------------------------------------------

SCALINGS = {"amplitude": profiles_mod.scale_amplitude, "momentum": profiles_mod.scale_momentum}


@dataclass
class SweepResult:
    profile: str
    scaling: str
    mode: str
    n: int
    K: list
    kappa0: list
    form: list
    psi_star_norm2: float
    bound: list = field(default_factory=list)
    sup_psi0: list = field(default_factory=list)
    K_star_form: float = None
    K_star_kappa: float = None
    verdicts: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def rows(self):
        cols = [self.K, self.kappa0, self.form, self.sup_psi0 or [0.0] * len(self.K),
                self.bound or [float("nan")] * len(self.K)]
        return list(zip(*cols))

    @property
    def rayleigh_ok(self):
        """kappa0 <= form / ||psi_*||^2 at every K (to rounding)."""
        return all(k <= f / self.psi_star_norm2 + 1e-9 * (1 + abs(f))
                   for k, f in zip(self.kappa0, self.form))


class _Family:
    """kappa0 and the psi_* form along a scaled profile family."""

    def __init__(self, profile, scaling, mode, grid, step):
        self.base = profile
        self.scale = SCALINGS[scaling]
        self.mode = mode
        self.grid = grid
        self.step = step
        self.psi_star = build_psi_star(grid)
        self.cache = {}
        self.path = {}
        self.space0 = None

    def equilibrium(self, K):
        prof = self.scale(self.base, K)
        if self.mode == "homogeneous":
            eq = solve_equilibrium(prof, 0.0, 0.0, self.grid)
            if eq.kind != "homogeneous":
                raise ValueError("profile does not give a homogeneous equilibrium")
            return eq
        # continuation from the largest solved K below (or a fresh start)
        below = [k for k in self.path if k <= K]
        if not below:
            start, psi = K, None
            if self.path:
                start = min(self.path)
                if start > K:
                    start, psi = K, None
        else:
            start = max(below)
            psi = self.path[start]
        if psi is None:
            eq = solve_psi0_dirichlet(prof, self.grid)
            self.path[K] = eq.psi0
            return eq
        ks = np.linspace(start, K, max(1, int(np.ceil((K - start) / self.step))) + 1)[1:]
        eq = None
        for k in ks:
            eq = solve_psi0_dirichlet(self.scale(self.base, k), self.grid, psi_init=psi)
            psi = eq.psi0
            self.path[float(k)] = psi
        if eq is None:
            eq = solve_psi0_dirichlet(prof, self.grid, psi_init=psi)
        return eq

    def evaluate(self, K):
        K = float(K)
        if K in self.cache:
            return self.cache[K]
        eq = self.equilibrium(K)
        if self.mode == "homogeneous":
            if self.space0 is None:
                self.space0 = OrbitSpace(eq)
            space = self.space0.reweighted(eq.profile)
        else:
            space = OrbitSpace(eq)
        ops = assemble_L(eq, 0.0, proj=space)
        k0 = kappa(ops)[0]
        ps = self.psi_star
        form = self.grid.inner(ops.A2 @ ps, ps)
        bound = float("nan")
        if self.mode != "homogeneous":
            bound = magnetic_bound_terms(eq, ps)["bound"]
        out = (k0, form, float(np.max(np.abs(eq.psi0))), bound)
        self.cache[K] = out
        return out


def _crossing(fun, Ks, vals, rtol):
    for i in range(1, len(Ks)):
        if vals[i - 1] > 0 and vals[i] <= 0:
            a, b = Ks[i - 1], Ks[i]
            if vals[i] == 0:
                return b
            return brentq(fun, a, b, xtol=rtol * a, rtol=rtol)
    return None


def sweep_K(profile, scaling, K_list, mode="homogeneous", n=64, grid=None, rtol=2e-3,
            continuation_step=0.25, locate=("form", "kappa")):
    """kappa0(K) and <A2 psi_*, psi_*>(K) along a scaled family.

    mode 'homogeneous' keeps the fields zero and reuses one orbit grid;
    'dirichlet-magnetic' solves the Dirichlet magnetic equilibrium at each
    K by continuation in K (steps <= continuation_step).  K* is the first
    positive-to-negative crossing, refined by bracketed root finding to
    relative accuracy ``rtol``.
    """
    if scaling not in SCALINGS:
        raise ValueError("scaling must be 'amplitude' or 'momentum'")
    if mode not in ("homogeneous", "dirichlet-magnetic"):
        raise ValueError("mode must be 'homogeneous' or 'dirichlet-magnetic'")
    grid = grid if grid is not None else build_grid(n)
    Ks = sorted(float(k) for k in K_list)
    fam = _Family(profile, scaling, mode, grid, continuation_step)
    vals = [fam.evaluate(K) for K in Ks]
    res = SweepResult(profile.name, scaling, mode, grid.n, Ks,
                      [v[0] for v in vals], [v[1] for v in vals],
                      grid.inner(fam.psi_star, fam.psi_star),
                      [v[3] for v in vals], [v[2] for v in vals])
    res.verdicts = ["stable" if k > 0 else "unstable" for k in res.kappa0]
    if not profiles_mod.is_symmetric(profile):
        res.notes.append("species are not mirrored; the psi_* form bounds A2 only")
    if "form" in locate:
        res.K_star_form = _crossing(lambda K: fam.evaluate(K)[1], Ks, res.form, rtol)
    if "kappa" in locate:
        res.K_star_kappa = _crossing(lambda K: fam.evaluate(K)[0], Ks, res.kappa0, rtol)
    if res.K_star_form is None:
        res.notes.append("psi_* form stays positive on the sampled K")
    return res
