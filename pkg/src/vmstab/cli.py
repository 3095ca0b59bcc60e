"""Scenario-driven command line: ``vmstab run|validate|sweep <config>``.

A scenario is an INI file whose sections follow the library modules:

    [profile]        name, scaling, K and any parameters of the profile
    [equilibrium]    variant (volterra | dirichlet-magnetic), alpha, beta, tol
    [numerics]       n, quad_level, quad_tol, lambda_min, lambda_max,
                     lambda_tol, scan_points, refine
    [workflow]       task (verdict | mode | certificates | diagnostics | sweep),
                     sweep_mode, sweep_values, jobs
    [output]         dir (default: $VMSTAB_OUTPUT or ./vmstab-out)

Exit codes: 0 completed run (any verdict), 1 numerical failure, 2 config error.
"""
import argparse
import configparser
import hashlib
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import profiles as profiles_mod
from .discretization import build_grid, build_velocity_quad
from .equilibrium import (EquilibriumError, solve_equilibrium, solve_psi0_dirichlet,
                          vacuum_equilibrium)
from .operators import AssemblyError, assemble_L, nonlocal_norms
from .stability import (LAMBDA_MAX, LAMBDA_MIN, SCAN_POINTS, StabilityError,
                        theorem_certificates, sweep_K, verdict)

OUTPUT_ENV = "VMSTAB_OUTPUT"
TASKS = ("verdict", "mode", "certificates", "diagnostics", "sweep")
VARIANTS = ("volterra", "dirichlet-magnetic")
EXTRAPOLATION_FLOOR = 1e-2
# pointwise trajectory evaluations made by the mode checks (specularity, Vlasov)
MODE_TRAJECTORY_SAMPLES = 2 * 2 * 64 + 2 * 3 * 12
BISECTION_CAP = 60

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class Scenario:
    path: str
    profile_name: str
    profile_params: dict
    scaling: str
    K: float
    variant: str
    alpha: float
    beta: float
    eq_tol: float
    n: int
    quad_level: int
    quad_tol: float
    lambda_min: float
    lambda_max: float
    lambda_tol: float
    scan_points: int
    refine: str
    task: str
    sweep_mode: str
    sweep_values: list
    jobs: int
    output: str
    digest: str
    warnings: list = field(default_factory=list)

    def profile(self):
        prof = profiles_mod.from_name(self.profile_name, **self.profile_params)
        if self.K != 1.0:
            prof = _scale(prof, self.scaling, self.K)
        return prof


def _scale(prof, scaling, K):
    fn = {"amplitude": profiles_mod.scale_amplitude,
          "momentum": profiles_mod.scale_momentum}[scaling]
    return fn(prof, K)


def _line_of(text, section, key):
    """Line number of ``key`` inside ``[section]`` (0 when absent)."""
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].strip().lower() == key:
            return i
    return 0


def config_digest(cp):
    """sha256 of the normalised scenario (the output section excluded)."""
    parts = []
    for sec in sorted(cp.sections()):
        if sec == "output":
            continue
        for k in sorted(cp[sec]):
            parts.append("%s.%s=%s" % (sec, k, " ".join(cp[sec][k].split())))
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


def _parse_number(text):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    low = text.strip().lower()
    if low in ("true", "yes", "on", "false", "no", "off"):
        return low in ("true", "yes", "on")
    return text


def load_scenario(path):
    """Parse and check a scenario file; raises ConfigError with the location."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("%s: cannot read config: %s" % (path, exc.strerror)) from None
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    known = ("profile", "equilibrium", "numerics", "workflow", "output")
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError("%s:%d: unknown section [%s]" % (
                path, _line_of_section(text, sec), sec))

    def where(sec, key):
        line = _line_of(text, sec, key)
        return "%s:%d: [%s] %s" % (path, line, sec, key) if line else \
            "%s: [%s] %s" % (path, sec, key)

    def get(sec, key, kind, default=None, required=False):
        if not cp.has_option(sec, key):
            if required:
                raise ConfigError("%s: [%s] missing required field '%s'" % (path, sec, key))
            return default
        raw = cp.get(sec, key)
        try:
            return kind(raw)
        except (TypeError, ValueError):
            raise ConfigError("%s: cannot read %r as %s" % (where(sec, key), raw,
                                                           kind.__name__)) from None

    if not cp.has_section("profile"):
        raise ConfigError("%s: missing [profile] section" % path)
    name = get("profile", "name", str, required=True).strip()
    if name not in profiles_mod.LIBRARY:
        raise ConfigError("%s: unknown profile %r (known: %s)" % (
            where("profile", "name"), name, ", ".join(sorted(profiles_mod.LIBRARY))))
    params = {k: _parse_number(v) for k, v in cp["profile"].items()
              if k not in ("name", "scaling", "k")}
    scaling = get("profile", "scaling", str, "momentum").strip()
    if scaling not in ("amplitude", "momentum"):
        raise ConfigError("%s: must be 'amplitude' or 'momentum'" % where("profile", "scaling"))
    K = get("profile", "k", float, 1.0)
    if not K > 0:
        raise ConfigError("%s: must be positive" % where("profile", "k"))

    variant = get("equilibrium", "variant", str, "volterra").strip()
    if variant not in VARIANTS:
        raise ConfigError("%s: must be one of %s" % (where("equilibrium", "variant"),
                                                     ", ".join(VARIANTS)))
    n = get("numerics", "n", int, 64)
    if n < 8:
        raise ConfigError("%s: grid needs n >= 8" % where("numerics", "n"))
    task = get("workflow", "task", str, "verdict").strip()
    if task not in TASKS:
        raise ConfigError("%s: must be one of %s" % (where("workflow", "task"),
                                                     ", ".join(TASKS)))
    sweep_mode = get("workflow", "sweep_mode", str,
                     "dirichlet-magnetic" if variant == "dirichlet-magnetic"
                     else "homogeneous").strip()
    if sweep_mode not in ("homogeneous", "dirichlet-magnetic"):
        raise ConfigError("%s: must be homogeneous or dirichlet-magnetic"
                          % where("workflow", "sweep_mode"))
    values = get("workflow", "sweep_values", _float_list, [])
    out = get("output", "dir", str, os.environ.get(OUTPUT_ENV, "vmstab-out"))
    sc = Scenario(
        path=path, profile_name=name, profile_params=params, scaling=scaling, K=K,
        variant=variant, alpha=get("equilibrium", "alpha", float, 0.0),
        beta=get("equilibrium", "beta", float, 0.0),
        eq_tol=get("equilibrium", "tol", float, 1e-10), n=n,
        quad_level=get("numerics", "quad_level", int, 1),
        quad_tol=get("numerics", "quad_tol", float, 1e-10),
        lambda_min=get("numerics", "lambda_min", float, LAMBDA_MIN),
        lambda_max=get("numerics", "lambda_max", float, LAMBDA_MAX),
        lambda_tol=get("numerics", "lambda_tol", float, 1e-6),
        scan_points=get("numerics", "scan_points", int, SCAN_POINTS),
        refine=get("numerics", "refine", str, "coarse").strip(),
        task=task, sweep_mode=sweep_mode, sweep_values=values,
        jobs=get("workflow", "jobs", int, 1), output=out.strip(), digest=config_digest(cp))
    for key in ("eq_tol", "quad_tol", "lambda_tol", "lambda_min"):
        if not getattr(sc, key) > 0:
            raise ConfigError("%s: tolerances and lambda bounds must be positive (%s)"
                              % (path, key))
    if not sc.lambda_max > sc.lambda_min:
        raise ConfigError("%s: lambda_max must exceed lambda_min" % where("numerics", "lambda_max"))
    if sc.refine not in ("coarse", "fine"):
        raise ConfigError("%s: must be coarse or fine" % where("numerics", "refine"))
    if sc.scan_points < 2 or sc.jobs < 1:
        raise ConfigError("%s: scan_points >= 2 and jobs >= 1 required" % path)
    try:
        sc.profile()
    except (TypeError, ValueError) as exc:
        raise ConfigError("%s: bad profile parameters: %s" % (path, exc)) from None
    if sc.lambda_min < EXTRAPOLATION_FLOOR:
        sc.warnings.append("warning: lambda_min = %g is below %g, the extrapolation regime; "
                           "kappa is only evaluated, never extrapolated, there"
                           % (sc.lambda_min, EXTRAPOLATION_FLOOR))
    return sc


def _line_of_section(text, sec):
    for i, raw in enumerate(text.splitlines(), 1):
        if raw.strip() == "[%s]" % sec:
            return i
    return 0


def _float_list(text):
    return [float(x) for x in text.replace(",", " ").split()]


# pipeline ------------------------------------------------------------------------

def build_equilibrium(sc):
    prof = sc.profile()
    grid = build_grid(sc.n)
    if prof.is_zero:
        return vacuum_equilibrium(prof, grid)
    quad = build_velocity_quad(prof, tol=sc.quad_tol, level=sc.quad_level)
    if sc.variant == "dirichlet-magnetic":
        return solve_psi0_dirichlet(prof, grid, quad, tol=sc.eq_tol)
    return solve_equilibrium(prof, sc.alpha, sc.beta, grid, quad, tol=sc.eq_tol)


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "%.12g" % v
    return str(v)


class Artifacts:
    """Files staged in a temporary directory and moved in only on success."""

    def __init__(self, sc):
        self.sc = sc
        self.files = {}

    def header(self, what):
        return "# vmstab %s config_hash %s\n# %s\n" % (__version__, self.sc.digest, what)

    def table(self, name, what, columns, rows):
        lines = [self.header(what) + "# " + " ".join(columns)]
        for row in rows:
            lines.append(" ".join("%.15e" % float(x) for x in row))
        self.files[name] = "\n".join(lines) + "\n"

    def text(self, name, body):
        self.files[name] = self.header(name) + body

    def summary(self, pairs):
        body = "".join("%s = %s\n" % (k, _fmt(v)) for k, v in pairs)
        self.files["summary.txt"] = "config_hash = %s\nversion = %s\n%s" % (
            self.sc.digest, __version__, body)

    def commit(self):
        out = os.path.abspath(self.sc.output)
        parent = os.path.dirname(out)
        os.makedirs(parent, exist_ok=True)
        stage = tempfile.mkdtemp(prefix=".vmstab-", dir=parent)
        try:
            for name, body in self.files.items():
                with open(os.path.join(stage, name), "w") as fh:
                    fh.write(body)
            os.makedirs(out, exist_ok=True)
            for name in self.files:
                os.replace(os.path.join(stage, name), os.path.join(out, name))
        finally:
            shutil.rmtree(stage, ignore_errors=True)
        return out


def _equilibrium_table(art, eq):
    art.table("equilibrium.dat", "equilibrium profile=%s variant=%s residual=%.3e"
              % (eq.profile.name, eq.variant, eq.residual),
              ["r", "phi0", "psi0", "E0r", "B0"],
              zip(eq.grid.nodes, eq.phi0, eq.psi0, eq.E0r, eq.B0))


def run_scenario(sc, task=None):
    """Run the scenario's workflow; returns the staged artifacts."""
    task = task or sc.task
    art = Artifacts(sc)
    if task == "sweep":
        return _run_sweep(sc, art)
    eq = build_equilibrium(sc)
    _equilibrium_table(art, eq)
    pairs = [("task", task), ("profile", sc.profile_name), ("n", sc.n),
             ("equilibrium_kind", eq.kind), ("equilibrium_variant", eq.variant),
             ("equilibrium_residual", eq.residual), ("equilibrium_contraction", eq.contraction)]
    if task == "diagnostics":
        ops = assemble_L(eq, 0.0)
        norms = nonlocal_norms(eq)
        for k in sorted(ops.diagnostics):
            pairs.append(("diag_" + k, ops.diagnostics[k]))
        for k in sorted(norms):
            pairs.append(("nonlocal_norm_" + k, norms[k]))
        art.summary(pairs)
        return art
    if task == "certificates":
        from .stability import kappa
        k0 = kappa(assemble_L(eq, 0.0))[0]
        certs = theorem_certificates(eq, k0)
        art.text("certificates.txt", "".join(c.line() + "\n" for c in certs))
        pairs.append(("kappa0", k0))
        for c in certs:
            pairs.append(("certificate_" + c.name, c.conclusion))
        art.summary(pairs)
        return art
    rep = verdict(eq, refine=sc.refine, search=(task == "mode"), lam_min=sc.lambda_min,
                  lam_max=sc.lambda_max, tol=sc.lambda_tol, jobs=sc.jobs)
    art.text("report.txt", rep.to_text())
    art.table("kappa0_eigenvector.dat", "eigenvector of L at lambda=0", ["r", "psi"],
              zip(eq.grid.nodes, rep.psi))
    pairs += [("verdict", rep.verdict), ("kappa0", rep.kappa0), ("margin", rep.margin),
              ("kappa0_reference", rep.kappa_ref), ("n_reference", rep.n_ref),
              ("refinement_shift", rep.diagnostics.get("refinement_shift")),
              ("symmetry_defect_L", rep.diagnostics.get("symmetry_defect_L")),
              ("velocity_tail", rep.diagnostics.get("velocity_tail"))]
    for c in rep.certificates:
        pairs.append(("certificate_" + c.name, c.conclusion))
    if rep.curve is not None:
        art.table("kappa_curve.dat", "smallest eigenvalue of L along real lambda",
                  ["lambda", "kappa"], rep.curve.rows())
        pairs += [("lambda_star", rep.curve.lambda_star), ("kappa_star", rep.curve.kappa_star),
                  ("lambda_evaluations", rep.curve.evaluations)]
    if rep.mode is not None:
        art.table("mode.dat", "growing mode at lambda*=%.12g" % rep.mode.lambda_star,
                  ["r", "psi", "phi"], rep.mode.rows())
        pairs.append(("mode_accepted", rep.mode.accepted))
        for k in ("maxwell_poisson", "maxwell_ampere", "jr_identity", "specularity",
                  "invariant_relative", "casimir"):
            pairs.append(("mode_" + k, rep.mode.residuals[k]))
    art.summary(pairs)
    return art


def _run_sweep(sc, art):
    if not sc.sweep_values:
        raise ConfigError("%s: [workflow] sweep_values is empty" % sc.path)
    base = profiles_mod.from_name(sc.profile_name, **sc.profile_params)
    res = sweep_K(base, sc.scaling, sc.sweep_values, sc.sweep_mode, n=sc.n)
    art.table("sweep.dat", "K sweep profile=%s scaling=%s mode=%s" % (
        res.profile, res.scaling, res.mode),
        ["K", "kappa0", "psi_star_form", "sup_psi0", "bound"], res.rows())
    pairs = [("task", "sweep"), ("profile", sc.profile_name), ("scaling", sc.scaling),
             ("sweep_mode", sc.sweep_mode), ("n", sc.n), ("points", len(res.K)),
             ("K_star_form", res.K_star_form), ("K_star_kappa", res.K_star_kappa),
             ("psi_star_norm2", res.psi_star_norm2), ("rayleigh_consistent", res.rayleigh_ok)]
    pairs += [("note_%d" % i, s) for i, s in enumerate(res.notes)]
    art.summary(pairs)
    return art


def estimate(sc, task=None):
    """Cost estimate of a scenario without running it."""
    task = task or sc.task
    prof = sc.profile()
    lines = [("task", task), ("n", sc.n), ("matrix_size", "%dx%d" % (sc.n, sc.n)),
             ("operators_per_lambda", 5), ("cells_per_orbit", 2 * sc.n + 1)]
    general = sc.variant != "dirichlet-magnetic" and (sc.alpha != 0 or sc.beta != 0)
    kind = "general" if general else ("magnetic" if sc.variant == "dirichlet-magnetic"
                                      else "homogeneous")
    lines.append(("expected_equilibrium", "vacuum" if prof.is_zero else kind))
    lam_evals = {"verdict": 2, "certificates": 1, "diagnostics": 1}.get(task, 0)
    traj = 0
    if task == "mode":
        lam_evals = 2 + sc.scan_points + BISECTION_CAP
        traj = 0 if prof.is_zero else MODE_TRAJECTORY_SAMPLES
    if task == "sweep":
        lam_evals = len(sc.sweep_values)
    lines += [("lambda_evaluations_max", lam_evals), ("trajectory_integrations", traj)]
    if traj:
        lines.append(("trajectory_budget_note",
                      "pointwise Q_lambda samples for the mode checks"))
    return lines


# command line ------------------------------------------------------------------------

def make_parser():
    ap = argparse.ArgumentParser(prog="vmstab", description="Linear stability of "
                                 "Vlasov-Maxwell equilibria in a disk.")
    ap.add_argument("--version", action="version", version="vmstab " + __version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("run", "run the scenario workflow"),
                      ("validate", "check the config and estimate the cost")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("config")
        p.add_argument("--workflow", choices=TASKS, help="override [workflow] task")
        p.add_argument("--jobs", type=int, help="cap on worker threads")
        p.add_argument("--output", help="output directory")
    p = sub.add_parser("sweep", help="K sweep along a scaled profile family")
    p.add_argument("config")
    p.add_argument("--param", default="K", help="swept parameter (only K)")
    p.add_argument("--values", nargs="+", required=True, help="values, space or comma separated")
    p.add_argument("--jobs", type=int)
    p.add_argument("--output")
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        sc = load_scenario(args.config)
        if args.output:
            sc.output = args.output
        if args.jobs:
            sc.jobs = args.jobs
        task = getattr(args, "workflow", None)
        if args.command == "sweep":
            if args.param.upper() != "K":
                raise ConfigError("--param: only K can be swept, got %r" % args.param)
            try:
                sc.sweep_values = _float_list(" ".join(args.values))
            except ValueError:
                raise ConfigError("--values: not a list of numbers") from None
            if not sc.sweep_values or min(sc.sweep_values) <= 0:
                raise ConfigError("--values: need positive K values")
            task = "sweep"
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    for w in sc.warnings:
        print(w, file=sys.stderr)
    if args.command == "validate":
        print("config_hash = %s" % sc.digest)
        for k, v in estimate(sc, task):
            print("%s = %s" % (k, _fmt(v)))
        return EXIT_OK
    try:
        art = run_scenario(sc, task)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (EquilibriumError, AssemblyError, StabilityError, np.linalg.LinAlgError,
            FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print("numerical failure in %s: %s" % (_module_of(exc), exc), file=sys.stderr)
        return EXIT_NUMERICAL
    out = art.commit()
    sys.stdout.write(art.files["summary.txt"])
    print("artifacts: %s" % out)
    return EXIT_OK


def _module_of(exc):
    tb = exc.__traceback__
    mod = "vmstab"
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("vmstab."):
            mod = name
        tb = tb.tb_next
    return mod


if __name__ == "__main__":
    sys.exit(main())
