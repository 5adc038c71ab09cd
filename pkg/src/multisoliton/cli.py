"""Command-line reports: admissibility, ansatz builds, residual scans and identity checks.

Every subcommand writes a report into --out (JSON, or CSV tables with
--format csv), prints a one-line summary, and exits 0 on success, 1 when
the checked property fails, 2 on malformed input.  Reports embed the
hash of the soliton configuration they were computed for.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import admissibility as adm
from . import ansatz as an
from . import elliptic as el
from . import groundstate as gs
from . import quadrature as qd
from .kinematics import SolitonConfig

VERSION = "0.1.0"


class InputError(ValueError):
    """Malformed command-line input or configuration file."""


# ------------------------------------------------------------------ output

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if is_dataclass(obj) and not isinstance(obj, type):
        return _plain({k: v for k, v in asdict(obj).items()
                       if not callable(v) and not hasattr(v, "evaluator")})
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _write(args, name: str, report: dict, rows: list[dict] | None = None) -> Path:
    """Write report (JSON) or its table (CSV) into the output directory."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = _plain({"command": args.command, "version": VERSION, **report})
    if args.format == "csv" and rows:
        path = out / f"{name}.csv"
        keys = list(dict.fromkeys(k for row in rows for k in row))
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for row in rows:
                writer.writerow(_plain(row))
    else:
        path = out / f"{name}.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _table(rows: list[dict], keys: list[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.3e}"
        return str(v)
    cells = [[fmt(r.get(k, "")) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) if cells else len(k)
              for i, k in enumerate(keys)]
    lines = ["  ".join(k.ljust(w) for k, w in zip(keys, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# ------------------------------------------------------------ configuration

def _parse_family(text: str) -> float:
    key, _, value = text.partition("=")
    if key.strip() not in ("x2", "x") or not value:
        raise InputError(f"--family expects x2=<speed>, got {text!r}")
    try:
        x = float(value)
    except ValueError as err:
        raise InputError(f"--family speed {value!r} is not a number") from err
    if not 0 < x < 1:
        raise InputError("--family speed must lie in (0, 1)")
    return x


def _load_config(args) -> SolitonConfig:
    if getattr(args, "config", None):
        try:
            return SolitonConfig.load(args.config)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise InputError(f"cannot read configuration {args.config}: {err}") from err
    return adm.family_config(_parse_family(args.family))


def _add_config(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", help="soliton configuration JSON file")
    g.add_argument("--family", default="x2=0.9",
                   help="stock collinear family with outer speed x2 (default x2=0.9)")


# ------------------------------------------------------------- subcommands

def cmd_admissible(args) -> int:
    """Interaction matrix, admissible scales, balance residuals, strong scan."""
    cfg = _load_config(args)
    tol = 1e-8 * args.tol
    A = adm.interaction_matrix(cfg)
    report = {"config": cfg.to_dict(), "config_hash": an.config_hash(cfg),
              "det_A": float(np.linalg.det(A.matrix)),
              "quartic_roots": list(adm.quartic_roots())}
    try:
        mu = adm.find_admissible_scales(A, tol=max(tol, 1e-12))
    except adm.NotAdmissibleError as err:
        report.update({"admissible": False, "diagnostic": str(err)})
        _write(args, "admissible", report)
        print(f"not admissible: {err}")
        return 1
    mu = mu * cfg.mu[0]
    coef = A.matrix @ cfg.mu
    admissible = bool(np.max(np.abs(coef)) <= tol * np.max(np.abs(cfg.mu)))
    balanced, res = adm.balanced_check(cfg, cfg.mu, tol=tol)
    report.update({"mu": mu.tolist(), "config_mu": cfg.mu.tolist(),
                   "leading_coefficients": coef.tolist(), "admissible": admissible,
                   "balanced": balanced, "balanced_residuals": res.tolist()})
    ok = admissible
    if args.strong and admissible:
        try:
            scan = adm.strong_admissible_scan(cfg, i_max=args.i_max)
            report["strong_scan"] = scan["dets"]
            report["tail_certificate"] = scan["tail"]
            report["strongly_admissible"] = all(abs(d["det"]) > 0.9 for d in scan["dets"])
        except adm.NotStronglyAdmissibleError as err:
            report["strongly_admissible"] = False
            report["diagnostic"] = str(err)
        ok = ok and report["strongly_admissible"]
    rows = [{"i": d["i"], "det": d["det"]} for d in report.get("strong_scan", [])]
    _write(args, "admissible", report, rows)
    if not admissible:
        print(f"not admissible: leading coefficients {np.round(coef, 12).tolist()}")
    else:
        print(f"admissible: mu = {np.round(cfg.mu, 10).tolist()}"
              + (f", strongly admissible = {report['strongly_admissible']}" if args.strong else ""))
    return 0 if ok else 1


def _build(args, cfg):
    if args.supercritical:
        return an.build_supercritical(cfg, gs.Nonlinearity.parse(args.poly), args.order)
    if args.radiative:
        return an.build_with_radiation(cfg, args.order)
    return an.build(cfg, max(args.order, 3), args.lmax)


def cmd_build(args) -> int:
    """Build and serialize the ansatz with its error-state summary."""
    cfg = _load_config(args)
    out = Path(args.out)
    report = {"config_hash": an.config_hash(cfg), "order": args.order, "lmax": args.lmax}
    code = 0
    try:
        ans, state = _build(args, cfg)
    except an.SchedulerStallError as err:
        if err.ansatz is None:
            raise
        ans, state = err.ansatz, err.state
        report["failed_pass"] = str(err)
        code = 1
    ans.save(out)
    report.update({"mode": ans.mode, "terms": len(ans.terms), "state": state.summary(),
                   "diagnostics": _plain(state.diagnostics)})
    rows = [t.to_dict() for t in ans.terms]
    _write(args, "state", report, rows)
    faces = {f: o for f, o in state.order.items()}
    print(f"{ans.mode} ansatz: {len(ans.terms)} terms, orders {faces}"
          + (f"; stopped: {report['failed_pass']}" if code else ""))
    return code


def _sample_points(ans, n: int, rng):
    """Seeded rest-frame face samples and interior samples."""
    pts = []
    for a, tr in enumerate(ans.tracks):
        for _ in range(n):
            ta = float(10 ** rng.uniform(2, 5))
            d = rng.normal(size=3)
            y = d / np.linalg.norm(d) * rng.uniform(0.2, 3.0) * tr.length
            y = y + float(tr.drift(ta)) * tr.axis
            t, x = an._lab_point(tr.velocity, tr.gamma, ta, y)
            pts.append(("face", f"F{a}", x, t))
    for _ in range(n):
        t = float(10 ** rng.uniform(2, 5))
        d = rng.normal(size=3)
        pts.append(("interior", "+", d / np.linalg.norm(d) * rng.uniform(0.05, 0.3) * t, t))
    return pts


def cmd_residual(args) -> int:
    """Residual of the built ansatz at seeded sample points."""
    cfg = _load_config(args)
    ans, _ = an.build(cfg, 3, args.lmax)
    rng = np.random.default_rng(args.seed)
    pts = _sample_points(ans, args.samples, rng)
    rep = ans.residual([(p[2], p[3]) for p in pts])
    rows = []
    for (kind, face, x, t), v, ok, sc in zip(pts, rep.values, rep.valid, rep.scale):
        rows.append({"kind": kind, "face": face, "t": t, "x0": x[0], "x1": x[1], "x2": x[2],
                     "residual": float(v), "t3_residual": float(v) * t ** 3,
                     "scale": float(sc), "valid": bool(ok)})
    report = {"config_hash": an.config_hash(cfg), "seed": args.seed, "samples": rows}
    _write(args, "residual", report, rows)
    valid = [r for r in rows if r["valid"]]
    print(f"{len(valid)} of {len(rows)} samples valid; "
          f"max |t^3 R| at faces {max(abs(r['t3_residual']) for r in valid if r['kind'] == 'face'):.3e}")
    return 0


def cmd_decay(args) -> int:
    """Fitted decay exponents toward the faces and the interior."""
    cfg = _load_config(args)
    ans, state = an.build(cfg, 3, args.lmax)
    ts = np.geomspace(1e2, 1e5, args.samples)
    rep = an.decay_report(ans, state, ts)
    slack = 0.1 * args.tol
    rows = []
    for face, fits in rep["faces"].items():
        for k, fit in enumerate(fits):
            rows.append({"ray": f"{face}/{k}", "required": 3 - slack, **fit})
    for k, fit in enumerate(rep["interior"]):
        rows.append({"ray": f"+/{k}", "required": 5 - slack, **fit})
    for r in rows:
        r["pass"] = bool(not r["unresolved"] and r["exponent"] >= r["required"])
    report = {"config_hash": an.config_hash(cfg), "state": state.summary(), "rays": rows}
    _write(args, "decay", report, rows)
    print(_table(rows, ["ray", "slope", "exponent", "log_power", "curvature", "pass"]))
    return 0 if all(r["pass"] for r in rows) else 1


def cmd_spectrum(args) -> int:
    """Unstable mode of Delta + V: eigenvalue, refinement, scaling law, kernel."""
    tol = args.tol
    mode = gs.unstable_mode()
    coarse = gs.unstable_mode(r_max=40.0)
    r = np.linspace(0.0, 20.0, 401)
    kernel = float(np.max(np.abs(gs.lap_LW(r) + gs.V(r) * gs.LW(r))))
    rows = [{"check": "refinement", "value": abs(mode.lamed - coarse.lamed), "tol": 1e-6 * tol},
            {"check": "eigen_residual", "value": gs.eigen_residual(mode), "tol": 1e-6 * tol},
            {"check": "scaling_mode_kernel", "value": kernel, "tol": 1e-10 * tol}]
    for lam in (0.5, 2.0):
        res, fitted = gs.scaled_eigenvalue_check(mode, lam)
        rel = abs(fitted - lam ** 2 * mode.lamed ** 2) / (lam ** 2 * mode.lamed ** 2)
        rows.append({"check": f"scaling_law_{lam}", "value": max(res, rel), "tol": 1e-6 * tol})
    for row in rows:
        row["pass"] = bool(row["value"] <= row["tol"])
    report = {"lamed": mode.lamed, "lamed_squared": mode.lamed ** 2, "checks": rows}
    _write(args, "spectrum", report, rows)
    print(f"lamed = {mode.lamed:.12f}, lamed^2 = {mode.lamed ** 2:.12f}")
    print(_table(rows, ["check", "value", "tol", "pass"]))
    return 0 if all(r["pass"] for r in rows) else 1


def _identities():
    """name -> (suite, callable returning [(numeric, closed form, relative error)], tolerance)."""
    def localized(fn):
        def run():
            out = []
            for R in (0.1, 1.0, 10.0, 100.0):
                num, closed = fn(R)
                out.append((num, closed, abs(num - closed) / abs(closed)))
            return out
        return run

    def global_cubic():
        val, mag = qd.global_cubic_orthogonality()
        return [(val, 0.0, abs(val) / mag)]

    def supercritical():
        rep = qd.supercritical_cancellation()
        return [(rep.value, 0.0, rep.relative)]

    def kernel(key):
        def run():
            kc = qd.kernel_constants()
            num = kc.c_grad if key == "c_grad" else kc.c_scale
            closed = kc.closed_forms[key]
            return [(num, closed, abs(num - closed) / abs(closed))]
        return run

    def y_scale():
        rep = qd.Y_scale_identity()
        # int 10 W^3 Lambda W Y^2 against lamed^2 int Y^2
        return [(rep.weighted, gs.unstable_mode().lamed ** 2 * rep.mass, rep.reduced)]

    def no_radiation():
        rho = np.linspace(0.0, 0.99, 100)
        out = []
        for sigma in (1, 2, 3, 5):
            u = el.invert_Nsigma(lambda s: -1 / (2 * s), sigma)
            g = el.no_radiation_profile(sigma)
            out.append((float(u(0.0)), 1 / (2 * (1 + sigma)),
                        float(np.max(np.abs(u(rho) - g(rho))))))
        return out

    return {
        "lin:localised_M1": ("integrals", localized(qd.localized_cubic_integral), 1e-9),
        "lin:localised_M2": ("integrals", localized(qd.localized_com_integral), 1e-9),
        "orth:cubic_global": ("integrals", global_cubic, 1e-8),
        "orth:supercritical": ("integrals", supercritical, 1e-8),
        "kernel:C_grad": ("integrals", kernel("c_grad"), 1e-9),
        "kernel:C_scale": ("integrals", kernel("c_scale"), 1e-9),
        "spec:Y_scale": ("integrals", y_scale, 1e-8),
        "model:no_radiation": ("elliptic", no_radiation, 1e-8),
    }


def cmd_verify(args) -> int:
    """Identity suite: numeric value, closed form, relative error, pass flag."""
    table = _identities()
    if args.only:
        missing = [n for n in args.only if n not in table]
        if missing:
            raise InputError(f"unknown identities {missing}; known: {sorted(table)}")
        names = list(args.only)
    else:
        names = [n for n, (suite, _, _) in table.items() if args.suite in ("all", suite)]
    rows = []
    for name in names:
        _, run, tol = table[name]
        for k, (num, closed, err) in enumerate(run()):
            rows.append({"identity": name, "case": k, "numeric": float(num),
                         "closed_form": float(closed), "rel_error": float(err),
                         "tol": tol * args.tol, "pass": bool(err <= tol * args.tol)})
    _write(args, "verify", {"identities": rows}, rows)
    print(_table(rows, ["identity", "case", "numeric", "closed_form", "rel_error", "pass"]))
    failed = sorted({r["identity"] for r in rows if not r["pass"]})
    if failed:
        print(f"failed: {', '.join(failed)}")
    return 1 if failed else 0


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from err


def cmd_radiation_design(args) -> int:
    """Design boundary data for value targets at axis points and check a forward solve."""
    pos, targets = _floats(args.points), _floats(args.targets)
    if len(pos) != len(targets):
        raise InputError("one target per point is required")
    grads = _floats(args.gradients) if args.gradients else None
    pts = [(0.0, 0.0, p) for p in pos]
    design = el.design_radiation(pts, targets, grads, sigma=args.sigma, l_max=args.lmax)
    values = el.reconstruct_on_axis(design, pos)
    err = float(np.max(np.abs(values - np.asarray(targets))))
    gram = el.boundary_gram(pts, args.sigma)
    trace = float(np.sqrt(np.sum(design.coef ** 2 * 4 * np.pi
                                 / (2 * np.arange(design.coef.size) + 1))))
    report = {**design.report(), "forward_values": values.tolist(), "forward_error": err,
              "boundary_gram_condition": float(np.linalg.cond(gram)), "boundary_l2": trace}
    rows = [{"ell": ell, "coef": float(c)} for ell, c in enumerate(design.coef)]
    _write(args, "radiation_design", report, rows)
    print(f"forward error {err:.3e}, Gram condition {report['boundary_gram_condition']:.3e}, "
          f"boundary L2 {trace:.3e}")
    return 0 if err <= 1e-6 * args.tol else 1


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="reports", help="output directory")
    common.add_argument("--tol", type=float, default=1.0,
                        help="factor applied to every tolerance of the subcommand")
    common.add_argument("--seed", type=int, default=0, help="seed for sampled checks")
    common.add_argument("--format", choices=("json", "csv"), default="json")

    parser = argparse.ArgumentParser(prog="multisoliton", parents=[common],
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("admissible", parents=[common], help="admissibility report")
    _add_config(p)
    p.add_argument("--strong", action="store_true", help="also scan strong admissibility")
    p.add_argument("--i-max", type=int, default=10)
    p.set_defaults(func=cmd_admissible)

    p = sub.add_parser("build", parents=[common], help="build and serialize the ansatz")
    _add_config(p)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--lmax", type=int, default=8)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--supercritical", action="store_true")
    mode.add_argument("--radiative", action="store_true")
    p.add_argument("--poly", default="7:1,9:-1", help="supercritical nonlinearity p:c,...")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("residual", parents=[common], help="residual at seeded samples")
    _add_config(p)
    p.add_argument("--samples", type=int, default=8, help="samples per face and interior")
    p.add_argument("--lmax", type=int, default=8)
    p.set_defaults(func=cmd_residual)

    p = sub.add_parser("decay", parents=[common], help="decay exponents of the residual")
    _add_config(p)
    p.add_argument("--samples", type=int, default=10, help="times per ray")
    p.add_argument("--lmax", type=int, default=8)
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("spectrum", parents=[common], help="unstable mode checks")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("verify", parents=[common], help="identity suite")
    p.add_argument("suite", nargs="?", default="all", choices=("all", "integrals", "elliptic"))
    p.add_argument("--only", action="append", help="run a single identity (repeatable)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("radiation-design", parents=[common], help="design outgoing radiation")
    p.add_argument("--points", default="-0.4,0.3", help="axis positions in the unit ball (write --points=-0.4,0.3)")
    p.add_argument("--targets", default="1,0", help="target values at the points")
    p.add_argument("--gradients", default=None, help="optional axial derivative targets")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--lmax", type=int, default=8)
    p.set_defaults(func=cmd_radiation_design)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.tol <= 0:
        print("error: --tol must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (an.NotAdmissibleError, an.NotStronglyAdmissibleError,
            an.SchedulerStallError, el.LinearDependenceError, el.SolverError,
            an.DegenerateNonlinearityError, an.UnsupportedConfigurationError) as err:
        print(f"failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
