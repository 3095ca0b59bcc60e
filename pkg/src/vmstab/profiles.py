"""Equilibrium velocity profiles mu(e, p) for the two species.

A profile is a pair of closed-form callables of the particle energy e and
angular momentum p, together with their partial derivatives.  Everything is
vectorised over numpy arrays.  Species are indexed by sign: +1 and -1.
"""
from dataclasses import dataclass, field, replace

import numpy as np

FD_STEP = 1e-5


def _fd_e(mu):
    def d(e, p):
        h = FD_STEP * (1.0 + np.abs(e))
        return (mu(e + h, p) - mu(e - h, p)) / (2 * h)
    return d


def _fd_p(mu):
    def d(e, p):
        h = FD_STEP * (1.0 + np.abs(e))
        return (mu(e, p + h) - mu(e, p - h)) / (2 * h)
    return d


@dataclass(frozen=True)
class Profile:
    """Pair of profiles mu_plus, mu_minus with derivatives and decay data.

    Derivatives left as None are replaced by centred differences with step
    1e-5 * (1 + |e|).  ``nu`` and ``c0`` describe the lower bound
    p * mu_p >= c0 * p**2 * nu(e) used by the instability workflows.
    """
    name: str
    mu_plus: object
    mu_minus: object
    mu_e_plus: object = None
    mu_e_minus: object = None
    mu_p_plus: object = None
    mu_p_minus: object = None
    C_mu: float = 1.0
    gamma: float = 3.0
    nu: object = None
    c0: float = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for sp in ("plus", "minus"):
            mu = getattr(self, "mu_" + sp)
            if getattr(self, "mu_e_" + sp) is None:
                object.__setattr__(self, "mu_e_" + sp, _fd_e(mu))
            if getattr(self, "mu_p_" + sp) is None:
                object.__setattr__(self, "mu_p_" + sp, _fd_p(mu))

    def mu(self, sign, e, p):
        return (self.mu_plus if sign > 0 else self.mu_minus)(e, p)

    def mu_e(self, sign, e, p):
        return (self.mu_e_plus if sign > 0 else self.mu_e_minus)(e, p)

    def mu_p(self, sign, e, p):
        return (self.mu_p_plus if sign > 0 else self.mu_p_minus)(e, p)

    @property
    def is_zero(self):
        return bool(self.params.get("vacuum", False))


@dataclass
class Clause:
    name: str
    passed: bool
    worst: float
    location: tuple


@dataclass
class AdmissibilityReport:
    clauses: list

    @property
    def passed(self):
        return all(c.passed for c in self.clauses)

    def clause(self, name):
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self):
        return ["%-24s %s worst=%.3e at (e=%.4g, p=%.4g)"
                % (c.name, "pass" if c.passed else "FAIL", c.worst, *c.location)
                for c in self.clauses]


def sampling_net(sample_count, V_max=20.0, phi_sup=0.0, psi_sup=0.0):
    """Physically reachable (e, p) pairs for |v| <= V_max and r <= 1.

    Energies cover <v> shifted by +-sup|phi0|; momenta cover |p| up to the
    largest |r (v_theta +- psi0)| reachable at that speed.
    """
    m = max(int(sample_count), 4)
    speed = np.linspace(0.0, V_max, m)
    t = np.linspace(-1.0, 1.0, m)
    S, T = np.meshgrid(speed, t, indexing="ij")
    e0 = np.sqrt(1.0 + S**2)
    pmax = S + psi_sup
    E = np.concatenate([e0 - phi_sup, e0 + phi_sup]).ravel()
    P = np.concatenate([T * pmax, T * pmax]).ravel()
    return E, P


def check_admissible(profile, sample_count=64, V_max=20.0, phi_sup=0.0,
                     psi_sup=0.0, seed=0):
    """Check the sign, decay and derivative-consistency conditions on a net."""
    E, P = sampling_net(sample_count, V_max, phi_sup, psi_sup)
    clauses = []

    def worst_at(vals, mask_bad):
        i = int(np.argmax(vals))
        return float(vals[i]), (float(E[i]), float(P[i])), not mask_bad.any()

    nonneg, neg_e, decay = [], [], []
    for s in (1, -1):
        mu = profile.mu(s, E, P)
        me = profile.mu_e(s, E, P)
        mp = profile.mu_p(s, E, P)
        for arr in (mu, me, mp):
            bad = ~np.isfinite(arr)
            if bad.any():
                i = int(np.argmax(bad))
                raise ValueError("profile %s is not finite at e=%g, p=%g"
                                 % (profile.name, E[i], P[i]))
        nonneg.append(-mu)
        neg_e.append(me)
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.abs(mp) + np.abs(me) + np.where(me != 0, mp**2 / np.abs(me), np.inf)
        bound = profile.C_mu / (1.0 + np.abs(E) ** profile.gamma)
        decay.append(lhs / bound - 1.0)

    v = np.maximum(*nonneg)
    w, loc, _ = worst_at(v, v > 0)
    clauses.append(Clause("mu_nonnegative", bool((v <= 0).all()), max(w, 0.0), loc))
    v = np.maximum(*neg_e)
    w, loc, _ = worst_at(v, v >= 0)
    clauses.append(Clause("mu_e_negative", bool((v < 0).all()), w, loc))
    v = np.maximum(*decay)
    v = np.where(np.isnan(v), np.inf, v)
    w, loc, _ = worst_at(v, v > 0)
    clauses.append(Clause("decay_bound", bool((v <= 1e-12).all()), w, loc))

    # derivative consistency at random points of the net
    rng = np.random.default_rng(seed)
    idx = rng.choice(E.size, size=min(200, E.size), replace=False)
    e, p = E[idx], P[idx]
    err = np.zeros(idx.size)
    for s in (1, -1):
        me, mp = profile.mu_e(s, e, p), profile.mu_p(s, e, p)
        fe, fp = _fd_e(lambda a, b: profile.mu(s, a, b))(e, p), _fd_p(lambda a, b: profile.mu(s, a, b))(e, p)
        err = np.maximum(err, np.abs(me - fe) / (1 + np.abs(me)))
        err = np.maximum(err, np.abs(mp - fp) / (1 + np.abs(mp)))
    i = int(np.argmax(err))
    clauses.append(Clause("derivative_consistency", bool(err.max() <= 1e-5),
                          float(err[i]), (float(e[i]), float(p[i]))))
    return AdmissibilityReport(clauses)


def is_symmetric(profile, sample_count=32, V_max=20.0, tol=1e-12):
    """True when mu_plus(e, p) == mu_minus(e, -p) on the sampling net."""
    E, P = sampling_net(sample_count, V_max)
    a = profile.mu_plus(E, P)
    b = profile.mu_minus(E, -P)
    return bool(np.max(np.abs(a - b)) <= tol * (1 + np.max(np.abs(a))))


def estimate_C_mu(mu, mu_e, mu_p, gamma, e_max=80.0, count=4000):
    """Sup of (|mu_p| + |mu_e| + mu_p^2/|mu_e|)(1 + e^gamma) on |p| <= e."""
    e = np.linspace(1.0, e_max, count)
    t = np.linspace(-1.0, 1.0, 41)
    E, T = np.meshgrid(e, t, indexing="ij")
    P = T * E
    best = 0.0
    for f_e, f_p in zip(mu_e, mu_p):
        me, mp = f_e(E, P), f_p(E, P)
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.abs(mp) + np.abs(me) + np.where(me != 0, mp**2 / np.abs(me), 0.0)
        best = max(best, float(np.nanmax(lhs * (1 + E**gamma))))
    return best * (1 + 1e-9)


def scale_amplitude(profile, K):
    """mu -> K mu for both species."""
    if not K > 0:
        raise ValueError("amplitude scale K must be positive, got %r" % (K,))
    if K == 1:
        return profile

    def sc(f):
        return lambda e, p: K * f(e, p)
    params = dict(profile.params, amplitude=profile.params.get("amplitude", 1.0) * K)
    return replace(profile, name=profile.name,
                   mu_plus=sc(profile.mu_plus), mu_minus=sc(profile.mu_minus),
                   mu_e_plus=sc(profile.mu_e_plus), mu_e_minus=sc(profile.mu_e_minus),
                   mu_p_plus=sc(profile.mu_p_plus), mu_p_minus=sc(profile.mu_p_minus),
                   C_mu=K * profile.C_mu,
                   c0=None if profile.c0 is None else K * profile.c0,
                   params=params)


def scale_momentum(profile, K):
    """mu(e, p) -> mu(e, K p); mu_p picks up the chain-rule factor K."""
    if not K > 0:
        raise ValueError("momentum scale K must be positive, got %r" % (K,))
    if K == 1:
        return profile

    def at(f):
        return lambda e, p: f(e, K * p)

    def dp(f):
        return lambda e, p: K * f(e, K * p)
    mu_e = (at(profile.mu_e_plus), at(profile.mu_e_minus))
    mu_p = (dp(profile.mu_p_plus), dp(profile.mu_p_minus))
    params = dict(profile.params, momentum=profile.params.get("momentum", 1.0) * K)
    return replace(profile,
                   mu_plus=at(profile.mu_plus), mu_minus=at(profile.mu_minus),
                   mu_e_plus=mu_e[0], mu_e_minus=mu_e[1],
                   mu_p_plus=mu_p[0], mu_p_minus=mu_p[1],
                   C_mu=estimate_C_mu(None, mu_e, mu_p, profile.gamma),
                   c0=None if profile.c0 is None else K**2 * profile.c0,
                   params=params)


# built-in library ----------------------------------------------------------

def _exp(e):
    return np.exp(-np.asarray(e, dtype=float))


def maxwellian(amp_plus=1.0, amp_minus=1.0, gamma=3.0):
    """mu = A exp(-e), independent of p."""
    def mk(a):
        return (lambda e, p: a * _exp(e) + 0 * p,
                lambda e, p: -a * _exp(e) + 0 * p,
                lambda e, p: 0.0 * _exp(e) * p)
    mp_, me_, mpp = mk(amp_plus)
    mm_, mem, mpm = mk(amp_minus)
    C = estimate_C_mu(None, (me_, mem), (mpp, mpm), gamma)
    return Profile("maxwellian", mp_, mm_, me_, mem, mpp, mpm, C_mu=C, gamma=gamma,
                   params={"amp_plus": amp_plus, "amp_minus": amp_minus})


def even_p(amplitude=1.0, gamma=3.0):
    """mu = A exp(-e) (1 + p^2/2), the same for both species.

    Satisfies p mu_p = A p^2 exp(-e), i.e. the lower bound with nu = exp(-e)
    and c0 = A.
    """
    a = amplitude
    mu = lambda e, p: a * _exp(e) * (1 + 0.5 * np.asarray(p) ** 2)
    me = lambda e, p: -a * _exp(e) * (1 + 0.5 * np.asarray(p) ** 2)
    mp = lambda e, p: a * _exp(e) * np.asarray(p)
    C = estimate_C_mu(None, (me,), (mp,), gamma)
    return Profile("even_p", mu, mu, me, me, mp, mp, C_mu=C, gamma=gamma,
                   nu=lambda e: _exp(e), c0=a, params={"amplitude": a})


def odd_damped(amplitude=1.0, gamma=3.0):
    """mu = A exp(-e - p^2), so that p mu_p = -2 p^2 mu <= 0."""
    a = amplitude
    mu = lambda e, p: a * np.exp(-np.asarray(e, dtype=float) - np.asarray(p) ** 2)
    me = lambda e, p: -mu(e, p)
    mp = lambda e, p: -2 * np.asarray(p) * mu(e, p)
    C = estimate_C_mu(None, (me,), (mp,), gamma)
    return Profile("odd_damped", mu, mu, me, me, mp, mp, C_mu=C, gamma=gamma,
                   params={"amplitude": a})


SKEW_PEAK = 1.1009173687604006  # max over p > 0 of p(3 + p^2)/(1 + p^2)^2


def skew_p(amplitude=1.0, skew=0.5, gamma=3.0):
    """mu+ = A exp(-e) (1 + p^2/2 + b p^3/(1 + p^2)) and mu-(e, p) = mu+(e, -p).

    The cubic odd part drives a nonzero current at psi0 = 0, so the
    Dirichlet magnetic equilibrium is not the trivial one.  For 0 <= b < 1
    the lower bound p mu-_p >= c0 p^2 exp(-e) holds with
    c0 = A (1 - b * SKEW_PEAK).
    """
    a, b = amplitude, skew
    if not 0 <= b < 1:
        raise ValueError("skew must lie in [0, 1)")

    def mk(sg):
        def mu(e, p):
            p = sg * np.asarray(p, dtype=float)
            return a * _exp(e) * (1 + 0.5 * p**2 + b * p**3 / (1 + p**2))

        def mp(e, p):
            q = sg * np.asarray(p, dtype=float)
            return sg * a * _exp(e) * (q + b * q * q * (3 + q * q) / (1 + q * q) ** 2)

        return mu, (lambda e, p: -mu(e, p)), mp

    mu_p, me_p, mp_p = mk(1)
    mu_m, me_m, mp_m = mk(-1)
    C = estimate_C_mu(None, (me_p, me_m), (mp_p, mp_m), gamma)
    return Profile("skew_p", mu_p, mu_m, me_p, me_m, mp_p, mp_m, C_mu=C, gamma=gamma,
                   nu=lambda e: _exp(e), c0=a * (1 - b * SKEW_PEAK),
                   params={"amplitude": a, "skew": b})


def vacuum():
    """mu = 0.  Not admissible (mu_e is not negative); used as a reference."""
    z = lambda e, p: 0.0 * np.asarray(e, dtype=float) * np.asarray(p, dtype=float)
    return Profile("vacuum", z, z, z, z, z, z, C_mu=0.0, gamma=3.0,
                   params={"vacuum": True})


LIBRARY = {
    "maxwellian": maxwellian,
    "even_p": even_p,
    "odd_damped": odd_damped,
    "skew_p": skew_p,
    "vacuum": vacuum,
}


def from_name(name, **params):
    try:
        factory = LIBRARY[name]
    except KeyError:
        raise ValueError("unknown profile %r (known: %s)"
                         % (name, ", ".join(sorted(LIBRARY)))) from None
    return factory(**params)
