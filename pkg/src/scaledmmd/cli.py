"""Command-line entry point: ``scaledmmd <verb> [options]``.

Verbs: estimate, field, isolines, critic-field, train, selftest. Every verb is
deterministic given its flags and ``--seed``. Exit codes: 0 ok, 2 bad input,
3 numerical failure (diagnostics JSON on stderr). Output schemas are listed in
docs/formats.md.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import dynamics, estimators as est, selftest
from .errors import InputError, NumericalError
from .kernels import Gaussian, Kernel, kernel_from_json

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

ISOLINE_DISTANCES = ("mmd", "gcmmd", "opt-smmd", "opt-gcmmd")
ISOLINE_COLUMNS = ("mean", "std", "distance", "log_distance")
CRITIC_FIELD_COLUMNS = ("x", "y", "witness", "grad_x", "grad_y", "grad_norm", "unit_x", "unit_y")
P_STD = 0.1
DEFAULT_PSI_GRID = tuple(2.0**k for k in range(-6, 7))


# --- parsing helpers ---------------------------------------------------------

def read_samples(path) -> np.ndarray:
    """Headerless numeric CSV, one sample per row."""
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        data = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: not a numeric CSV ({exc})") from exc
    if data.ndim != 2 or data.size == 0:
        raise InputError(f"{path}: rows must be non-empty and of equal length")
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path}: non-finite entries")
    return data


def parse_kernel(text) -> Kernel:
    """Kernel from inline JSON or from a path to a JSON file."""
    if text is None:
        return Gaussian(1.0)
    if os.path.exists(text):
        with open(text) as fh:
            text = fh.read()
    try:
        return kernel_from_json(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"kernel is neither a JSON file nor inline JSON: {exc}") from exc


def parse_grid(text, name="grid") -> np.ndarray:
    """``a,b,c`` list, ``lo:hi:n`` linear or ``log:lo:hi:n`` log-spaced points."""
    try:
        if text.startswith("log:"):
            lo, hi, n = text[4:].split(":")
            if float(lo) <= 0 or float(hi) <= 0:
                raise InputError(f"{name}: log grids need positive bounds")
            out = np.geomspace(float(lo), float(hi), int(n))
        elif ":" in text:
            lo, hi, n = text.split(":")
            out = np.linspace(float(lo), float(hi), int(n))
        else:
            out = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise InputError(f"{name}: cannot parse {text!r}") from exc
    if out.size == 0 or not np.all(np.isfinite(out)):
        raise InputError(f"{name}: grid must be non-empty and finite")
    return out


def parse_vector(text, dim=2, name="vector") -> np.ndarray:
    try:
        v = np.array([float(c) for c in text.split(",")])
    except ValueError as exc:
        raise InputError(f"{name}: cannot parse {text!r}") from exc
    if v.size == 1:
        v = np.repeat(v, dim)
    if v.size != dim:
        raise InputError(f"{name}: expected {dim} comma-separated numbers")
    return v


def parse_seed(text) -> int:
    try:
        seed = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from exc
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return seed


def _fmt(x):
    return repr(float(x))


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# --- figure data ---------------------------------------------------------------

def _isoline_value(distance, P, Q, Pmu, bandwidth, lam, psi_grid):
    if distance == "mmd":
        return np.sqrt(max(est.mmd2_biased(Gaussian(bandwidth), P, Q), 0.0))
    if distance == "gcmmd":
        return np.sqrt(max(est.gcmmd2(Gaussian(bandwidth), P, Q, Pmu, lam)[0], 0.0))
    if distance == "opt-smmd":
        fn = lambda psi, X, Y: est.smmd(est.scaled_gaussian(psi), X, Y, Pmu, lam)
    else:
        fn = lambda psi, X, Y: np.sqrt(max(est.gcmmd2(est.scaled_gaussian(psi), X, Y, Pmu, lam)[0], 0.0))
    return est.optimize_over_family(fn, psi_grid, P, Q)[0]


def isolines(means, stds, distance="mmd", bandwidth=0.1, lam=1.0, n=1024, n_mu=256,
             psi_grid=DEFAULT_PSI_GRID, seed=0):
    """log D(P, N(mean, std^2)) with P = N(0, 0.1^2), over the (std, mean) grid.

    Each cell draws fresh P and Q samples from its own child of ``seed``; the
    gradient-constrained distances use the first ``n_mu`` P samples as mu.
    Returns rows ``(mean, std, D, log D)`` with means varying fastest.
    """
    if distance not in ISOLINE_DISTANCES:
        raise InputError(f"distance must be one of {ISOLINE_DISTANCES}")
    means, stds = np.asarray(means, float), np.asarray(stds, float)
    if np.any(stds <= 0):
        raise InputError("standard deviations must be positive")
    if n < 2 or n_mu < 1:
        raise InputError("need n >= 2 and n_mu >= 1")
    children = np.random.SeedSequence(seed).spawn(len(means) * len(stds))
    rows = []
    for a, s in enumerate(stds):
        for b, m in enumerate(means):
            rng = np.random.default_rng(children[a * len(means) + b])
            P = P_STD * rng.standard_normal((n, 1))
            Q = m + s * rng.standard_normal((n, 1))
            D = _isoline_value(distance, P, Q, P[:n_mu], bandwidth, lam, psi_grid)
            with np.errstate(divide="ignore"):
                rows.append((m, s, D, np.log(D)))
    return rows


def critic_field(k: Kernel, X, Y, xs, ys, Xmu=None, lam=1.0):
    """GCMMD witness and its gradient on the ``xs`` x ``ys`` grid (x fastest).

    ``Xmu`` defaults to the union of both samples, an empirical ``(P + Q) / 2``.
    Returns rows in the order of CRITIC_FIELD_COLUMNS.
    """
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    if X.shape[1] != 2 or Y.shape[1] != 2:
        raise InputError("critic fields are two-dimensional")
    Xmu = np.vstack([X, Y]) if Xmu is None else np.asarray(Xmu, float)
    _, wit = est.gcmmd2(k, X, Y, Xmu, lam)
    gx, gy = np.meshgrid(np.asarray(xs, float), np.asarray(ys, float))
    T = np.column_stack([gx.ravel(), gy.ravel()])
    f = wit(T)
    g = wit.gradient(T)
    nrm = np.linalg.norm(g, axis=1)
    unit = g / np.where(nrm > 0, nrm, 1.0)[:, None]
    return [(t[0], t[1], fv, gv[0], gv[1], nv, uv[0], uv[1])
            for t, fv, gv, nv, uv in zip(T, f, g, nrm, unit)]


# --- verbs -----------------------------------------------------------------------

def cmd_estimate(args):
    X, Y = read_samples(args.x), read_samples(args.y)
    if X.shape[1] != Y.shape[1]:
        raise InputError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    k = parse_kernel(args.kernel)
    Xmu = read_samples(args.mu) if args.mu else None
    Z = read_samples(args.grid) if args.grid else None
    res = est.estimate(args.method, k, X, Y, Xmu, args.lam, args.n_blocks,
                       args.chol_tol, args.max_rank, Z)
    _write_text(args.out, res.to_json() + "\n")


def cmd_field(args):
    loss = dynamics.DiracLoss(args.variant, lam=args.lam, gp_weight=args.gp_weight)
    thetas = parse_grid(args.thetas, "--thetas")
    inv_psis = parse_grid(args.inv_psis, "--inv-psis")
    grid = dynamics.dirac_field(loss, thetas, inv_psis)
    _write_text(args.out, grid.to_csv())
    if args.trajectories:
        base = os.path.splitext(args.out)[0] if args.out not in (None, "-") else "trajectory"
        for name in dynamics.FIXTURE_INITS:
            traj = dynamics.simulate_fixture(loss, name, args.steps)
            _write_text(f"{base}_traj_{name}.csv", traj.to_csv())


def cmd_isolines(args):
    psi = parse_grid(args.psi_grid, "--psi-grid") if args.psi_grid else DEFAULT_PSI_GRID
    rows = isolines(parse_grid(args.means, "--means"), parse_grid(args.stds, "--stds"),
                    args.distance, args.bandwidth, args.lam, args.n, args.n_mu, psi, args.seed)
    _write_text(args.out, _rows_to_csv(ISOLINE_COLUMNS, rows))


def cmd_critic_field(args):
    if args.x and args.y:
        X, Y = read_samples(args.x), read_samples(args.y)
    elif args.x or args.y:
        raise InputError("give both --x and --y, or neither")
    else:
        ss = np.random.SeedSequence(args.seed)
        rp, rq = (np.random.default_rng(c) for c in ss.spawn(2))
        X = parse_vector(args.p_mean, name="--p-mean") + parse_vector(args.p_std, name="--p-std") \
            * rp.standard_normal((args.n, 2))
        Y = parse_vector(args.q_mean, name="--q-mean") + parse_vector(args.q_std, name="--q-std") \
            * rq.standard_normal((args.n, 2))
    k = parse_kernel(args.kernel)
    xs = parse_grid(args.xs, "--xs")
    ys = parse_grid(args.ys, "--ys")
    rows = critic_field(k, X, Y, xs, ys, lam=args.lam)
    _write_text(args.out, _rows_to_csv(CRITIC_FIELD_COLUMNS, rows))


def cmd_train(args):
    conf = {}
    if args.config:
        try:
            with open(args.config) as fh:
                conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
    for key in ("loss", "seed", "gen_steps", "batch_size", "lr", "critic_steps", "scale", "lam",
                "spectral"):
        val = getattr(args, key)
        if val is not None:
            conf[key] = val
    try:
        cfg = dynamics.TrainConfig(**conf)
    except TypeError as exc:
        raise InputError(f"bad config: {exc}") from exc
    hist = dynamics.train_toy(cfg)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "config.json"), json.dumps(cfg.to_dict(), indent=1) + "\n")
    _write_text(os.path.join(out, "steps.csv"), hist.steps_csv())
    _write_text(os.path.join(out, "conditions.csv"), hist.conditions_csv())
    _write_text(os.path.join(out, "history.json"), hist.to_json() + "\n")
    _write_text(os.path.join(out, "generator.json"), json.dumps(hist.generator.to_dict()) + "\n")
    _write_text(os.path.join(out, "critic.json"), json.dumps(hist.critic.to_dict()) + "\n")
    score = dynamics.evaluate_generator(hist.generator,
                                        rng=dynamics.rng_streams(cfg.seed)["eval"])
    _write_text(os.path.join(out, "eval.json"),
                json.dumps({"heldout_mmd2_unbiased": score, "bandwidth": 0.5, "n": 512}) + "\n")
    for step, snap in hist.snapshots.items():
        _write_text(os.path.join(out, f"snapshot_{step}.json"), json.dumps(snap) + "\n")


def cmd_selftest(args):
    results = selftest.run(args.seed, sys.stdout)
    failed = [r for r in results if not r[1]]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scaledmmd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_default="-"):
        sp.add_argument("--seed", type=parse_seed, default=0, help="64-bit unsigned seed")
        sp.add_argument("--out", default=out_default, help="output file ('-' for stdout)")

    e = sub.add_parser("estimate", help="run a discrepancy estimator on two CSV samples")
    e.add_argument("--x", required=True, help="samples from P (headerless CSV)")
    e.add_argument("--y", required=True, help="samples from Q (headerless CSV)")
    e.add_argument("--kernel", help="kernel JSON (inline or path); default Gaussian bw 1")
    e.add_argument("--method", default="mmd2_unbiased", choices=est.METHODS)
    e.add_argument("--lam", type=float, default=1.0)
    e.add_argument("--mu", help="samples of mu (CSV); default: the P samples")
    e.add_argument("--grid", help="LipMMD constraint points (CSV); default: automatic")
    e.add_argument("--n-blocks", type=int, default=1)
    e.add_argument("--chol-tol", type=float, default=None)
    e.add_argument("--max-rank", type=int, default=None)
    common(e)
    e.set_defaults(func=cmd_estimate)

    f = sub.add_parser("field", help="DiracGAN parameter-space vector field")
    f.add_argument("--variant", default="SMMD", choices=dynamics.DIRAC_VARIANTS)
    f.add_argument("--thetas", default="log:0.25:20:40", help="theta grid")
    f.add_argument("--inv-psis", default="log:0.25:20:40", help="1/psi grid")
    f.add_argument("--lam", type=float, default=1.0)
    f.add_argument("--gp-weight", type=float, default=None)
    f.add_argument("--trajectories", action="store_true",
                   help="also simulate from the three fixture inits")
    f.add_argument("--steps", type=int, default=10_000)
    common(f)
    f.set_defaults(func=cmd_field)

    i = sub.add_parser("isolines", help="log-distances between N(0, 0.1^2) and N(mean, std^2)")
    i.add_argument("--distance", default="mmd", choices=ISOLINE_DISTANCES)
    i.add_argument("--means", default="-1:1:21")
    i.add_argument("--stds", default="log:0.01:1:13")
    i.add_argument("--bandwidth", type=float, default=0.1, help="for mmd and gcmmd")
    i.add_argument("--psi-grid", default=None, help="family grid for the optimized distances")
    i.add_argument("--lam", type=float, default=1.0)
    i.add_argument("--n", type=int, default=1024)
    i.add_argument("--n-mu", type=int, default=256)
    common(i)
    i.set_defaults(func=cmd_isolines)

    c = sub.add_parser("critic-field", help="GCMMD critic gradients between 2D samples")
    c.add_argument("--x", help="P samples (CSV); default: draw from --p-mean/--p-std")
    c.add_argument("--y", help="Q samples (CSV); default: draw from --q-mean/--q-std")
    c.add_argument("--p-mean", default="0,0")
    c.add_argument("--p-std", default="1")
    c.add_argument("--q-mean", default="4,0")
    c.add_argument("--q-std", default="0.5")
    c.add_argument("--n", type=int, default=128)
    c.add_argument("--kernel", help="kernel JSON; default Gaussian bw 1")
    c.add_argument("--lam", type=float, default=1.0)
    c.add_argument("--xs", default="-3:7:21")
    c.add_argument("--ys", default="-4:4:17")
    common(c)
    c.set_defaults(func=cmd_critic_field)

    t = sub.add_parser("train", help="toy 2D GAN training")
    t.add_argument("--config", help="TrainConfig JSON; flags below override it")
    t.add_argument("--loss", choices=dynamics.TRAIN_LOSSES)
    t.add_argument("--gen-steps", dest="gen_steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--critic-steps", dest="critic_steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--scale", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--spectral", action="store_true", default=None)
    t.add_argument("--seed", type=parse_seed, default=None)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.add_argument("--seed", type=parse_seed, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(json.dumps({"error": str(exc), "diagnostics": est._plain(exc.diagnostics)}),
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
