"""Projections onto the kernel of the transport operator.

Functions of the invariants (e, p) are constant along every orbit, so the
orthogonal projection in L^2 weighted by |mu_e| is the orbit average.  On
the orbit grid it is the k = 0 Fourier mode of each cell sequence, and the
trajectory averages Q_lambda converge to it as lambda -> 0.

The closed forms for homogeneous and purely magnetic equilibria are kept as
separate functions; they replace the orbit average of psi(r)/r by a disk
average, which is exact only for psi proportional to r.  The operators
always use the orbit average.
"""
from dataclasses import dataclass, field

import numpy as np

from .discretization import build_grid
from .phasespace import OrbitSpace

STRATEGIES = ("homogeneous-explicit", "purely-magnetic-explicit", "q-lambda-limit")


class ProjectionError(ValueError):
    pass


def strategy_for(equilibrium):
    """Projection strategy implied by the equilibrium fields."""
    kind = "homogeneous" if equilibrium is None else equilibrium.kind
    return {"homogeneous": STRATEGIES[0], "magnetic": STRATEGIES[1]}.get(kind, STRATEGIES[2])


def _grid_for(psi, grid):
    return grid if grid is not None else build_grid(len(psi))


def _require(equilibrium, allowed, what):
    if equilibrium is not None and equilibrium.kind not in allowed:
        raise ProjectionError("%s needs a %s equilibrium, got %s"
                              % (what, " or ".join(allowed), equilibrium.kind))


def radial_integral(psi, grid):
    """(psi)_R = int_0^1 psi dr by the midpoint rule on the nodes."""
    return float(grid.h * np.sum(psi))


def project_radial_homogeneous(psi_samples, grid=None, equilibrium=None):
    """Disk average of a radial function."""
    _require(equilibrium, ("homogeneous",), "project_radial_homogeneous")
    psi = np.asarray(psi_samples, dtype=float)
    return _grid_for(psi, grid).mean(psi)


def project_radial_purely_magnetic(psi_samples, grid=None, equilibrium=None):
    _require(equilibrium, ("homogeneous", "magnetic"), "project_radial_purely_magnetic")
    psi = np.asarray(psi_samples, dtype=float)
    return _grid_for(psi, grid).mean(psi)


def project_vtheta_homogeneous(psi_samples, grid=None, equilibrium=None):
    """Closed form (r, v_r, v_theta) -> 2 r vth_hat psi_R."""
    _require(equilibrium, ("homogeneous",), "project_vtheta_homogeneous")
    psi = np.asarray(psi_samples, dtype=float)
    R = radial_integral(psi, _grid_for(psi, grid))

    def closed_form(r, vr, vth):
        gam = np.sqrt(1 + np.square(vr) + np.square(vth))
        return 2 * np.asarray(r) * (vth / gam) * R
    closed_form.psi_R = R
    return closed_form


def project_vtheta_purely_magnetic(equilibrium, psi_samples, grid=None, sign=-1):
    """Closed form 2<v>^-1 p psi_R - sign 2<v>^-1 (r psi0 psi)_R.

    For the minus species this is 2<v>^-1 p^- psi_R + 2<v>^-1 (r psi0 psi)_R.
    """
    _require(equilibrium, ("homogeneous", "magnetic"), "project_vtheta_purely_magnetic")
    psi = np.asarray(psi_samples, dtype=float)
    grid = grid if grid is not None else equilibrium.grid
    fm = equilibrium.field_model
    R = radial_integral(psi, grid)
    R0 = radial_integral(grid.nodes * fm.psi(grid.nodes) * psi, grid)

    def closed_form(r, vr, vth):
        r = np.asarray(r, dtype=float)
        gam = np.sqrt(1 + np.square(vr) + np.square(vth))
        p = r * (vth + sign * fm.psi(r))
        return 2 * p * R / gam - sign * 2 * R0 / gam
    closed_form.psi_R = R
    closed_form.r_psi0_psi_R = R0
    return closed_form


@dataclass
class ProjectionOperator:
    """Orbit-average projection for one species on an orbit discretisation.

    ``strategy`` records the dispatch (which closed form, if any, the
    equilibrium admits); evaluation is always by orbit averages.
    """
    strategy: str
    sign: int
    equilibrium: object
    space: OrbitSpace
    evaluation: str = "orbit-average"

    @property
    def species(self):
        return self.space.plus if self.sign > 0 else self.space.minus

    def sample(self, g):
        """Cell averages (orbits, N) of g(r, v_r, v_theta) over the sub-points."""
        og = self.species.og
        return self.species.cell_average(np.asarray(g(og.r, og.vr, og.vth), dtype=float))

    def apply(self, cells):
        cells = np.asarray(cells, dtype=float)
        return np.broadcast_to(cells.mean(axis=1, keepdims=True), cells.shape).copy()

    def q(self, lam, cells):
        return self.species.apply_q(lam, np.asarray(cells, dtype=float))

    def inner(self, a, b):
        """Inner product of L^2 weighted by |mu_e| on the orbit grid."""
        return float(np.sum(self.species.D[:, None] * a * b))

    def norm(self, a):
        return np.sqrt(max(self.inner(a, a), 0.0))

    def invariant_cells(self, fn):
        """Cells of a function of the invariants, fn(e, p)."""
        og = self.species.og
        vals = np.asarray(fn(og.e, og.p), dtype=float)
        return np.repeat(vals[:, None], og.N, axis=1)


def projection(equilibrium, sign, space=None, **space_opts):
    space = space if space is not None else orbit_space(equilibrium, **space_opts)
    return ProjectionOperator(strategy_for(equilibrium), int(np.sign(sign)), equilibrium, space)


def orbit_space(equilibrium, **opts):
    """The orbit discretisation of an equilibrium, cached on the object."""
    store = equilibrium.__dict__.setdefault("_orbit_spaces", {})
    key = tuple(sorted(opts.items()))
    if key not in store:
        store[key] = OrbitSpace(equilibrium, **opts)
    return store[key]


@dataclass
class QLimitReport:
    lambdas: list
    values: list
    cauchy: list
    converged: bool
    limit: np.ndarray
    projection: np.ndarray
    gap: float
    tol: float
    notes: list = field(default_factory=list)

    def rows(self):
        out = []
        for i, lam in enumerate(self.lambdas):
            out.append((lam, self.cauchy[i - 1] if i else float("nan")))
        return out


def project_q_limit(equilibrium, species, g, lambda_sequence=(1.0, 0.3, 0.1, 0.03, 0.01),
                    tol=1e-3, space=None, orbit_budget=200000, **space_opts):
    """Tabulate Q_lambda g along a decreasing lambda sequence.

    ``g`` is a callable g(r, v_r, v_theta) or an array of cells.  Differences
    between successive terms are measured in the |mu_e|-weighted norm
    relative to ||g||; the limit counts as converged once two successive
    differences are below ``tol``.  Nothing is extrapolated past the last
    lambda; the projection itself is reported alongside as ``projection``.
    """
    lams = [float(x) for x in lambda_sequence]
    if any(b >= a for a, b in zip(lams[:-1], lams[1:])) or min(lams) <= 0:
        raise ValueError("lambda sequence must be positive and strictly decreasing")
    proj = projection(equilibrium, species, space, **space_opts)
    if proj.species.O > orbit_budget:
        raise ProjectionError("orbit budget exceeded: %d > %d" % (proj.species.O, orbit_budget))
    cells = proj.sample(g) if callable(g) else np.asarray(g, dtype=float)
    scale = proj.norm(cells) or 1.0
    values = [proj.q(lam, cells) for lam in lams]
    cauchy = [proj.norm(b - a) / scale for a, b in zip(values[:-1], values[1:])]
    conv = any(c1 <= tol and c2 <= tol for c1, c2 in zip(cauchy[:-1], cauchy[1:]))
    P = proj.apply(cells)
    gap = proj.norm(values[-1] - P) / scale
    notes = [] if conv else ["Cauchy differences above %.1e; limit not reached" % tol]
    return QLimitReport(lams, values, cauchy, conv, values[-1], P, gap, tol, notes)
