"""Batch front end: ``smoothtails {spectrum,simulate,tails,constants,validate}``.

Each command reads a model config, writes its results into ``--out`` and
records a ``manifest.json``.  The manifest hash covers everything that can
change the numbers (command, config hash, seed, size knobs, tool version)
and is stamped into every output; the thread count and output directory
are run-time details and go to ``runtime.txt`` instead, so reruns with
any thread count produce byte-identical outputs.

Exit codes: 0 success, 1 failed validation, 2 configuration error,
3 estimation error, 4 provenance mismatch.
"""
import argparse
import hashlib
import os
import sys
import warnings

import numpy as np

from . import __version__, _rng, spectral, tails, wbp
from . import io as _io
from .config import load_config
from .errors import ConfigError, ProvenanceError, SmoothTailsError
from .models import SamplePool, contraction_conditions, covariance_residual, solve_eigenvector

BETA_WARN = 0.1


class Run:
    """Collects outputs in memory and writes them only after success."""

    def __init__(self, args, command, spec, config_hash, knobs):
        self.out = args.out
        self.threads = args.threads
        self.manifest = {"schema": "smoothtails.manifest/1", "tool": "smoothtails",
                         "version": __version__, "command": command,
                         "config": {"path": args.config, "sha256": config_hash,
                                    "spec_hash": spec.digest()},
                         "seed": args.seed, "knobs": knobs}
        self.hash = hashlib.sha256(_io.dumps(self.manifest).encode()).hexdigest()
        self.files = {}

    def json(self, name, obj):
        rec = dict(obj)
        rec["manifest"] = self.hash
        self.files[name] = _io.dumps(rec)

    def csv(self, name, columns, rows):
        self.files[name] = _io.csv_text(columns, rows, [f"manifest={self.hash}"])

    def raw(self, name, data):
        self.files[name] = data

    def commit(self):
        self.json("manifest.json", self.manifest)
        os.makedirs(self.out, exist_ok=True)
        for name, data in sorted(self.files.items()):
            _io.atomic_write(os.path.join(self.out, name), data)
        _io.atomic_write(os.path.join(self.out, "runtime.txt"),
                         f"threads={self.threads}\nout={os.path.abspath(self.out)}\n")


def _directions(text, d):
    """``"radial;1,0;0,1"`` -> ``["radial", array, array]``."""
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if part == "radial":
            out.append("radial")
            continue
        try:
            v = np.array([float(x) for x in part.split(",")])
        except ValueError:
            raise ConfigError(f"bad direction {part!r}") from None
        if v.size != d or not np.any(v):
            raise ConfigError(f"direction {part!r} must be a nonzero {d}-vector")
        out.append(v / np.linalg.norm(v))
    return out


def _load_samples(path, spec):
    try:
        R, meta = wbp.load_samples(path)
    except OSError as exc:
        raise ConfigError(f"cannot read samples {path}: {exc}") from None
    if meta.get("spec_hash") != spec.digest():
        raise ProvenanceError(f"samples {path} were produced from a different model "
                              f"({meta.get('spec_hash')!r} != {spec.digest()!r})")
    if R.ndim == 1:
        R = R[:, None]
    if R.shape[1] != spec.d:
        raise ProvenanceError(f"samples have dimension {R.shape[1]}, model has d={spec.d}")
    return R, meta


def _file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _check_beta(beta, path, spec):
    if not path:
        return
    rec = _io.read_json(path)
    rep = spectral.ExponentReport.from_dict(rec)
    if rep.spec_hash != spec.digest():
        raise ProvenanceError(f"exponent report {path} belongs to a different model")
    if rep.beta is None or abs(rep.beta - beta) > BETA_WARN:
        warnings.warn(f"beta={beta} is inconsistent with the stored exponent report (beta={rep.beta})")


# ----------------------------------------------------------------------


def cmd_spectrum(args, spec, chash):
    knobs = {"s_lo": args.s_lo, "s_hi": args.s_hi, "step": args.step, "method": args.method,
             "B": args.pool, "G": args.grid, "n": args.n}
    run = Run(args, "spectrum", spec, chash, knobs)
    pool = grid = None
    if args.method == "operator":
        pool = SamplePool.generate(spec, args.seed, args.pool, args.threads)
        grid = spectral.SphereGrid(spec.d, args.grid or spectral.default_grid_size(spec.d), args.seed)
    curve = spectral.MCurve(spec, pool, args.method, grid, n=args.n, B=args.pool,
                            seed=args.seed, threads=args.threads)
    rep = spectral.find_exponents(spec, args.s_lo, args.s_hi, args.step, method=args.method, curve=curve)
    run.csv("m_curve.csv", list(rep.CSV_COLUMNS), rep.curve_rows())
    run.json("exponents.json", rep.to_dict())
    if args.method == "operator":
        for name, s in (("alpha", rep.alpha), ("beta", rep.beta)):
            if s is None:
                continue
            sol = spectral.power_iterate(curve.table.operator(s), spec_hash=spec.digest())
            run.json(f"spectral_{name}.json", sol.to_dict())
            run.csv(f"eigen_{name}.csv", *sol.eigen_csv())
    run.commit()
    print(f"alpha={rep.alpha} beta={rep.beta} m'(beta)={rep.m_prime_beta}")
    return 0


def cmd_simulate(args, spec, chash):
    knobs = {"M": args.M, "sweeps": args.sweeps, "init": args.init, "format": args.format}
    run = Run(args, "simulate", spec, chash, knobs)
    Sigma = np.eye(spec.d) if spec.family == "maxwell" and spec.homogeneous else None
    pop, diag = wbp.run_population(spec, args.M, args.sweeps, args.seed, args.init,
                                   Sigma=Sigma, threads=args.threads)
    cols = ["generation", "huge"] + [f"mean{i}" for i in range(spec.d)] + \
           [f"drift_se{i}" for i in range(spec.d)]
    if Sigma is not None:
        cols += ["cov_residual", "cov_residual_se"]
    rows = []
    for g in diag:
        row = [g["generation"], g["huge"], *g["mean"], *g["drift_se"]]
        if Sigma is not None:
            row += [g["cov_residual"], g["cov_residual_se"]]
        rows.append(row)
    run.csv("diagnostics.csv", cols, rows)
    name = "samples.csv" if args.format == "csv" else "samples.npy"
    meta = {"schema": "smoothtails.samples/1", "spec_hash": spec.digest(), "seed": args.seed,
            "generation": pop.generation, "M": len(pop), "d": spec.d}
    if args.format == "csv":
        run.raw(name, _io.csv_text([f"x{i}" for i in range(spec.d)], pop.samples))
    else:
        import io as stdio

        buf = stdio.BytesIO()
        np.save(buf, np.ascontiguousarray(pop.samples))
        run.raw(name, buf.getvalue())
    run.json(name + ".meta.json", meta)
    run.commit()
    print(f"wrote {len(pop)} samples after {pop.generation} sweeps")
    return 0


def cmd_tails(args, spec, chash):
    R, meta = _load_samples(args.samples, spec)
    _check_beta(args.beta, args.exponents, spec)
    knobs = {"samples_sha256": _file_hash(args.samples), "samples_seed": meta.get("seed"),
             "beta": args.beta, "directions": args.directions, "k": args.k}
    run = Run(args, "tails", spec, chash, knobs)
    reports = []
    for j, x in enumerate(_directions(args.directions, spec.d)):
        rep = tails.tail_report(R, x, args.beta, args.k)
        reports.append(rep.to_dict())
        tag = "radial" if isinstance(x, str) else f"dir{j}"
        run.csv(f"survival_{tag}.csv", ["t", "value", "se"], rep.survival)
        if rep.plateau is not None:
            run.csv(f"plateau_{tag}.csv", ["t", "value", "se"], rep.plateau)
    run.json("tails.json", {"schema": "smoothtails.tails/1", "reports": reports})
    run.commit()
    for r in reports:
        print(f"{r['direction']}: hill={r['hill']['estimate']:.4f} +- {r['hill']['se']:.4f}")
    return 0


def _spectral_at(args, spec, s, pool, grid):
    if args.spectral:
        sol = spectral.SpectralSolution.from_dict(_io.read_json(args.spectral))
        if sol.spec_hash != spec.digest():
            raise ProvenanceError(f"spectral record {args.spectral} belongs to a different model")
        if abs(sol.s - s) > 1e-12:
            raise ProvenanceError(f"spectral record is for s={sol.s}, not beta={s}")
        if sol.grid.G != grid.G:
            grid = sol.grid
        table = spectral.TransferTable(grid, pool, args.threads)
        return sol, table
    table = spectral.TransferTable(grid, pool, args.threads)
    return spectral.power_iterate(table.operator(s), spec_hash=spec.digest()), table


def cmd_constants(args, spec, chash):
    R, meta = _load_samples(args.samples, spec)
    _check_beta(args.beta, args.exponents, spec)
    beta = args.beta
    knobs = {"samples_sha256": _file_hash(args.samples), "samples_seed": meta.get("seed"),
             "beta": beta, "B": args.pool, "G": args.grid, "directions": args.directions,
             "goldie_s": args.goldie_s, "alpha": args.alpha,
             "spectral_sha256": _file_hash(args.spectral) if args.spectral else None}
    run = Run(args, "constants", spec, chash, knobs)
    pool = SamplePool.generate(spec, args.seed, args.pool, args.threads)
    grid = spectral.SphereGrid(spec.d, args.grid or spectral.default_grid_size(spec.d), args.seed)
    sol, table = _spectral_at(args, spec, beta, pool, grid)
    lb = spectral.compute_l_beta(spec, beta, sol, pool, table)
    dirs = _directions(args.directions, spec.d)
    if spec.family != "similarity":
        dirs = [x for x in dirs if not isinstance(x, str)]
    out = {"schema": "smoothtails.constants/1", "beta": beta,
           "l_beta": {"value": lb[0], "se": lb[1]}, "K": []}
    Ks = tails.constant_K(spec, beta, sol, lb, R, pool, dirs, seed=args.seed)
    out["K"] = [k.to_dict() for k in Ks]
    if spec.family == "similarity":
        mb = spectral.compute_m_beta_similarity(spec, beta, pool)
        out["m_beta"] = {"value": mb[0], "se": mb[1]}
        out["sigma_S"] = tails.sigma_S(spec, beta, mb, R, pool, seed=args.seed).to_dict()
    if abs(beta - 2.0) <= 0.05 and not spec.homogeneous:
        vec = [x for x in dirs if not isinstance(x, str)]
        out["beta2"] = [c.to_dict() for c in tails.beta2_constant(spec, sol, lb, pool, vec, beta)]
    probe = tails.moment_divergence_probe(R, [beta], seed=args.seed)[0]
    out["divergence_probe"] = {"s": probe.s, "ratio": probe.ratio, "verdict": probe.verdict,
                               "label": probe.label}
    out["positivity_conflict"] = any(tails.positivity_gate(k, probe) for k in Ks)
    if args.goldie_s is not None:
        g = tails.goldie_identity_residual(spec, args.goldie_s, R, pool, args.alpha, beta, seed=args.seed)
        out["goldie"] = None if g is None else {
            "s": g.s, "lhs": g.lhs, "lhs_se": g.lhs_se, "rhs": g.rhs, "rhs_se": g.rhs_se,
            "combined_se": g.combined_se, "tail_correction": g.tail_correction}
    run.json("constants.json", out)
    run.commit()
    for k in out["K"]:
        print(f"K[{k.get('direction')}] = {k['value']:.6g} +- {k['se']:.3g}")
    return 0


# ----------------------------------------------------------------------


def validate_checks(spec, seed=0, B=2000, G=32):
    """Quick structural checks at reduced sizes; returns ``[(name, passed, detail)]``."""
    checks = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except SmoothTailsError as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        checks.append((name, bool(ok), detail))

    pool = SamplePool.generate(spec, seed, B)
    again = SamplePool.generate(spec, seed, B)
    check("pool determinism", lambda: (np.array_equal(pool.C, again.C) and np.array_equal(pool.Q, again.Q), ""))
    if spec.family == "maxwell":
        dev = float(np.abs(pool.C.sum(axis=1) - np.eye(spec.d)).max())
        check("C1 + C2 = Id", lambda: (dev <= 1e-12, f"max deviation {dev:.3g}"))

        def cov():
            res, se = covariance_residual(spec, pool, np.eye(spec.d), se=True)
            return res <= 3 * se, f"residual {res:.3g}, SE {se:.3g}"

        check("covariance Sigma = Id", cov)
    if spec.family == "similarity":
        C = pool.branches()
        dev = float(np.abs(np.linalg.norm(C, axis=1) - np.linalg.norm(C, ord=2, axis=(1, 2))[:, None]).max())
        check("similarity |Ce_j| = ||C||", lambda: (dev <= 1e-10, f"max deviation {dev:.3g}"))
    z = contraction_conditions(spec, pool)
    check("z3 <= z2 <= z1", lambda: (z[2] <= z[1] * (1 + 1e-12) and z[1] <= z[0] * (1 + 1e-12),
                                     "z = (%.6g, %.6g, %.6g)" % z))
    sol = solve_eigenvector(spec, pool)
    check("mean equation", lambda: (True, "r = %s%s" % (
        None if sol.r is None else np.round(sol.r, 6).tolist(), "" if sol.unique else " (not unique)")))
    grid = spectral.SphereGrid(spec.d, G if spec.d > 1 else 2, seed)
    table = spectral.TransferTable(grid, pool)
    rs = table.operator(0.0).row_sums()
    check("T0 row sums = 1", lambda: (np.abs(rs - 1).max() <= 1e-12, f"max deviation {np.abs(rs - 1).max():.3g}"))

    def eig():
        e = spectral.power_iterate(table.operator(1.0))
        anti = np.abs(e.e - e.e[grid.antipode(np.arange(grid.G))]).max() / e.e.max()
        ok = (e.e.min() > 0 and abs(e.nu.sum() - 1) <= 1e-12 and abs(e.e @ e.nu - 1) <= 1e-8
              and anti <= 5 * 1e-10 * max(1.0, 1 / e.kappa))
        return ok, f"kappa(1) = {e.kappa:.6g}, symmetry {anti:.3g}"

    check("eigen-elements at s=1", eig)

    def convex():
        ln = wbp.path_log_norms(spec, 10, 2000, seed)
        s = np.linspace(0.1, 4, 21)
        f = spectral.log_moment_curve(ln, s)
        mid = f[1:-1] - 0.5 * (f[:-2] + f[2:])
        return bool(np.all(mid <= 1e-12 * np.maximum(1, np.abs(f[1:-1])))), f"max midpoint excess {mid.max():.3g}"

    check("log-convexity of the moment curve", convex)

    def sweep():
        wbp.run_population(spec, 2000, 5, seed, init="mean")
        return True, "5 sweeps of 2000 particles finite"

    check("population dynamics", sweep)
    return checks


def cmd_validate(args, spec=None, chash=None):
    try:
        spec, chash = load_config(args.config)
    except ConfigError as exc:
        checks = [("configuration", False, str(exc))]
    else:
        checks = [("configuration", True, spec.family)] + validate_checks(spec, args.seed)
    ok = all(c[1] for c in checks)
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    if args.out:
        rec = {"schema": "smoothtails.validate/1", "passed": ok,
               "checks": [{"name": n, "passed": p, "detail": d} for n, p, d in checks]}
        _io.write_json(os.path.join(args.out, "validate.json"), rec)
    return 0 if ok else 1


# ----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="smoothtails", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default ${_rng.THREADS_ENV} or 1)")
        sp.add_argument("--out", required=out, default=None)

    s = sub.add_parser("spectrum", help="m(s) curve, exponents and eigen-elements")
    common(s)
    s.add_argument("--s-lo", type=float, default=0.05)
    s.add_argument("--s-hi", type=float, default=6.0)
    s.add_argument("--step", type=float, default=0.25)
    s.add_argument("--method", choices=("operator", "direct"), default="operator")
    s.add_argument("--pool", type=int, default=100_000)
    s.add_argument("--grid", type=int, default=None)
    s.add_argument("--n", type=int, default=30, help="path length for the direct method")

    s = sub.add_parser("simulate", help="population dynamics samples of R")
    common(s)
    s.add_argument("--M", type=int, default=100_000)
    s.add_argument("--sweeps", type=int, default=wbp.BURN_IN)
    s.add_argument("--init", choices=("gaussian", "mean"), default="gaussian")
    s.add_argument("--format", choices=("npy", "csv"), default="npy")

    for name, hlp in (("tails", "tail-index reports"), ("constants", "limiting constants")):
        s = sub.add_parser(name, help=hlp)
        common(s)
        s.add_argument("--samples", required=True)
        s.add_argument("--beta", type=float, required=True)
        s.add_argument("--exponents", default=None, help="exponents.json to cross-check --beta")
        s.add_argument("--directions", default="radial")
        if name == "tails":
            s.add_argument("--k", type=int, default=None)
        else:
            s.add_argument("--pool", type=int, default=200_000)
            s.add_argument("--grid", type=int, default=None)
            s.add_argument("--spectral", default=None, help="spectral_beta.json from spectrum")
            s.add_argument("--goldie-s", type=float, default=None)
            s.add_argument("--alpha", type=float, default=None)

    s = sub.add_parser("validate", help="structural checks at reduced sizes")
    common(s, out=False)
    return p


COMMANDS = {"spectrum": cmd_spectrum, "simulate": cmd_simulate, "tails": cmd_tails,
            "constants": cmd_constants, "validate": cmd_validate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is None:
        args.threads = _rng.default_threads()
    warnings.simplefilter("default")
    try:
        if args.command == "validate":
            return cmd_validate(args)
        spec, chash = load_config(args.config)
        return COMMANDS[args.command](args, spec, chash)
    except SmoothTailsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
