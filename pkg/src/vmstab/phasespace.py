"""Radial functions on the orbit grid and the discrete averages Q_lambda, P.

Every orbit carries N time cells.  A radial function enters through its
cell averages along the orbit (hat-function interpolation of nodal values),
and the trajectory average acts on these periodic cell sequences as the
resolvent lam (lam + d/dt)^{-1}, i.e. the Fourier multiplier

    q_k = lam / (lam + i w_k),   w_k = 2 pi k / T.

For sequences even under time reversal (all radial functions of r and
v_theta are) only Re q_k = lam^2 / (lam^2 + w_k^2) contributes to the
quadratic forms; at lam = 0 the multiplier keeps the k = 0 mode, the orbit
average.
"""
import numpy as np
import scipy.sparse as sp

from .trajectories import build_orbit_grid, field_model


def hat_matrix(grid, r, kind):
    """Sparse interpolation matrix from nodal values to radii r.

    ``kind='phi'``: piecewise linear, constant beyond the end nodes.
    ``kind='psi'``: piecewise linear through 0 at r = 0 and at r = 1.
    """
    r = np.asarray(r, dtype=float).ravel()
    n, h = grid.n, grid.h
    x = r / h - 0.5
    j = np.clip(np.floor(x).astype(int), -1, n - 1)
    t = x - j
    rows = np.arange(r.size)
    inner = (j >= 0) & (j <= n - 2)
    lo = j < 0
    hi = j >= n - 1
    R = [rows[inner], rows[inner], rows[lo], rows[hi]]
    C = [j[inner], j[inner] + 1, np.zeros(lo.sum(), int), np.full(hi.sum(), n - 1)]
    if kind == "phi":
        V = [1 - t[inner], t[inner], np.ones(lo.sum()), np.ones(hi.sum())]
    elif kind == "psi":
        r1, rn = grid.nodes[0], grid.nodes[-1]
        V = [1 - t[inner], t[inner], r[lo] / r1, np.maximum(1 - r[hi], 0) / (1 - rn)]
    else:
        raise ValueError("kind must be 'phi' or 'psi'")
    return sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                         shape=(r.size, n))


def interpolate(grid, values, r, kind):
    return hat_matrix(grid, r, kind) @ np.asarray(values, dtype=float)


def resolvent_symbol(lam, T, N):
    """Re q_k for k = 0..(N-1)/2 on orbits of period T; shape (orbits, K)."""
    k = np.arange(N // 2 + 1)
    if lam == 0:
        c = np.zeros((T.size, k.size))
        c[:, 0] = 1.0
        return c
    w = 2 * np.pi * k[None, :] / T[:, None]
    # written in w / lam so that tiny lam cannot underflow to 0 / 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.square(w / lam))


def _fold_weights(N):
    """Multiplicity of each rfft mode in Parseval's identity (N odd)."""
    w = np.full(N // 2 + 1, 2.0)
    w[0] = 1.0
    return w


class SpeciesOrbits:
    """One species on the orbit grid with its interpolation data."""

    def __init__(self, og, grid, profile):
        self.og = og
        self.sign = og.sign
        O, N, k = og.r.shape
        self.O, self.N, self.k = O, N, k
        rs = og.r.ravel()
        Sphi = hat_matrix(grid, rs, "phi")
        self.S_psi = hat_matrix(grid, rs, "psi")
        avg = sp.kron(sp.identity(O * N, format="csr"),
                      np.full((1, k), 1.0 / k), format="csr")
        vh = og.vth_hat.ravel()
        self.I_phi = (avg @ Sphi).tocsr()
        self.J_psi = (avg @ sp.diags(vh) @ self.S_psi).tocsr()
        self.I_psi = (avg @ self.S_psi).tocsr()
        # sub-point weights of the local term -int r vth_hat mu_p dv psi
        self._loc_base = np.repeat(og.omega / k, N * k) * (-rs * vh)
        self._spectra = {}
        self._local = {}
        self.mirror_of = None
        self._weigh(profile)

    def _weigh(self, profile):
        og = self.og
        self.mu_e = np.asarray(profile.mu_e(og.sign, og.e, og.p), dtype=float)
        self.mu_p = np.asarray(profile.mu_p(og.sign, og.e, og.p), dtype=float)
        # |mu_e| times the phase-space weight of one cell
        self.D = np.abs(self.mu_e) * og.omega
        loc = self._loc_base * np.repeat(self.mu_p, self.N * self.k)
        self.M_loc = (self.S_psi.T @ sp.diags(loc) @ self.S_psi).toarray()

    def reweighted(self, profile, mirror_of=None):
        """Same orbits and spectra, different distribution function."""
        new = SpeciesOrbits.__new__(SpeciesOrbits)
        new.__dict__.update(self.__dict__)
        # spectra depend on the orbits only; local forms on the weights too
        new._local = {}
        new.mirror_of = mirror_of
        new._weigh(profile)
        return new

    CACHE_BYTES = 160e6
    CHUNK = 128

    def _matrix(self, which):
        return {"phi": self.I_phi, "vpsi": self.J_psi, "psi": self.I_psi}[which]

    def _spectrum(self, which, a, b):
        """Real rfft of the cell sequences of all basis functions, orbits a:b.

        Shape (b - a, N//2 + 1, n).  Sequences even under time reversal have
        real spectra.
        """
        if self.mirror_of is not None:
            F = self.mirror_of._spectrum(which, a, b)
            return -F if which == "vpsi" else F
        full = self._spectra.get(which)
        if full is not None:
            return full[a:b]
        M = self._matrix(which)
        n = M.shape[1]
        X = M[a * self.N:b * self.N].toarray().reshape(b - a, self.N, n)
        return np.fft.rfft(X, axis=1).real

    def _fill_cache(self, which):
        if self.mirror_of is not None:
            self.mirror_of._fill_cache(which)
            return
        if which in self._spectra:
            return
        n = self._matrix(which).shape[1]
        if self.O * (self.N // 2 + 1) * n * 8 > self.CACHE_BYTES:
            return
        out = np.empty((self.O, self.N // 2 + 1, n))
        for a in range(0, self.O, self.CHUNK):
            b = min(self.O, a + self.CHUNK)
            out[a:b] = self._spectrum(which, a, b)
        self._spectra[which] = out

    def gram(self, lam, left, right, complement):
        """sum_o D_o <left_i, (1 - Q) or Q right_j> over the orbits.

        ``left``/``right`` name cell-sequence families ('phi', 'vpsi', 'psi').
        """
        if complement:
            # Parseval: sum_k (1 - c_k)|F_k|^2 = sum_m |x_m|^2 - sum_k c_k |F_k|^2
            return self.local_gram(left, right) - self.gram(lam, left, right, False)
        if lam == 0:
            # orbit average: the k = 0 mode is the plain cell sum
            FL, FR = self.orbit_sums(left), self.orbit_sums(right)
            return (FL.T @ sp.diags(self.D / self.N) @ FR).toarray()
        c = resolvent_symbol(lam, self.og.T, self.N)
        coef = self.D[:, None] * _fold_weights(self.N)[None, :] * c / self.N
        kmax = c.shape[1]
        self._fill_cache(left)
        self._fill_cache(right)
        n1 = self._matrix(left).shape[1]
        n2 = self._matrix(right).shape[1]
        out = np.zeros((n1, n2))
        for a in range(0, self.O, self.CHUNK):
            b = min(self.O, a + self.CHUNK)
            FL = self._spectrum(left, a, b)[:, :kmax]
            FR = self._spectrum(right, a, b)[:, :kmax] if right != left else FL
            out += FL.reshape(-1, n1).T @ (FR * coef[a:b, :kmax, None]).reshape(-1, n2)
        return out

    def orbit_sums(self, which):
        """Sparse (orbits, n): sum over the cells of each orbit."""
        key = ("sum", which)
        if key not in self._spectra:
            if self.mirror_of is not None:
                F = self.mirror_of.orbit_sums(which)
                self._spectra[key] = -F if which == "vpsi" else F
            else:
                S = sp.kron(sp.identity(self.O, format="csr"), np.ones((1, self.N)),
                            format="csr")
                self._spectra[key] = (S @ self._matrix(which)).tocsr()
        return self._spectra[key]

    def local_gram(self, left, right):
        """sum_o D_o sum_m left_i(m) right_j(m): the form of the identity."""
        key = (left, right)
        if key not in self._local:
            d = sp.diags(np.repeat(self.D, self.N))
            self._local[key] = (self._matrix(left).T @ d @ self._matrix(right)).toarray()
        return self._local[key]

    # cell-level evaluation ---------------------------------------------------

    def cells(self, values, which):
        """Cell sequences (O, N) of a radial function given by nodal values."""
        M = {"phi": self.I_phi, "vpsi": self.J_psi, "psi": self.I_psi}[which]
        return (M @ values).reshape(self.O, self.N)

    def apply_q(self, lam, x):
        """Full (complex-symbol) Q_lambda on real cell sequences (O, N)."""
        X = np.fft.fft(x, axis=1)
        if lam == 0:
            q = np.zeros(self.N)
            q[0] = 1.0
            q = np.broadcast_to(q, X.shape)
        else:
            k = np.fft.fftfreq(self.N, d=1.0 / self.N)
            w = 2 * np.pi * k[None, :] / self.og.T[:, None]
            with np.errstate(over="ignore"):
                q = 1.0 / (1.0 + 1j * (w / lam))
        return np.fft.ifft(q * X, axis=1).real

    def derivative(self, x):
        """Spectral time derivative of cell sequences along each orbit."""
        X = np.fft.fft(x, axis=1)
        k = np.fft.fftfreq(self.N, d=1.0 / self.N)
        w = 2 * np.pi * k[None, :] / self.og.T[:, None]
        return np.fft.ifft(1j * w * X, axis=1).real

    def cell_average(self, sub_values):
        return sub_values.reshape(self.O, self.N, self.k).mean(axis=2)


class OrbitSpace:
    """Both species of an equilibrium on a common orbit discretisation."""

    def __init__(self, equilibrium, grid=None, V_max=None, cells=None, sub=4,
                 n_e=8, n_p=24):
        self.eq = equilibrium
        self.grid = grid if grid is not None else equilibrium.grid
        self.profile = equilibrium.profile
        if V_max is None:
            V_max = equilibrium.quad.V_max if equilibrium.quad is not None else 20.0
        self.V_max = float(V_max)
        n = self.grid.n
        N = cells if cells is not None else 2 * n + 1
        if N % 2 == 0:
            N += 1
        fm = field_model(equilibrium)
        self.plus = SpeciesOrbits(build_orbit_grid(fm, 1, self.V_max, N, sub, n_e, n_p),
                                  self.grid, self.profile)
        og_m = build_orbit_grid(fm, -1, self.V_max, N, sub, n_e, n_p)
        self.minus = SpeciesOrbits(og_m, self.grid, self.profile)
        # with phi0 = 0 the - orbits are the + orbits with v_theta reversed,
        # so the cell spectra are shared (the v_theta-weighted ones flip sign)
        self.mirrored = fm.phi0_zero
        if self.mirrored:
            self.minus.mirror_of = self.plus
        self.N = N
        self.sub = sub

    def reweighted(self, profile):
        """The same orbit discretisation under another profile.

        Valid when the equilibrium fields do not change, e.g. scaled
        profiles over a homogeneous equilibrium.
        """
        new = OrbitSpace.__new__(OrbitSpace)
        new.__dict__.update(self.__dict__)
        new.profile = profile
        new.plus = self.plus.reweighted(profile)
        new.minus = self.minus.reweighted(
            profile, mirror_of=new.plus if self.mirrored else None)
        return new

    @property
    def species(self):
        return (self.plus, self.minus)

    @property
    def orbit_count(self):
        return self.plus.O + self.minus.O
