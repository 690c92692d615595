"""rqpsgd command line: train, account, bounds, table1, fig-tradeoff, fig-bounds.

Exit status: 0 on success, 1 on a usage or parameter-range error, 2 when
an input file is missing or malformed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import warnings

from . import __version__, experiments, privacy
from .bounds import UtilityParams, noise_error, quantization_error, utility_bound
from .data import DataError
from .model import save_model
from .quantizer import make_grid
from .train import ALGORITHMS, TrainConfig, TrainingDivergedError, train

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; 2 is reserved for data errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def fmt(v) -> str:
    """Stable text for CSV cells: repr for floats, 'nan'/'inf' spelled out."""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def tag(v: float) -> str:
    return f"{v:g}"


def write_csv(path, command: str, meta: dict, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# rqpsgd {__version__}\n# command: {command}\n")
    for k in sorted(meta):
        buf.write(f"# {k}: {fmt(meta[k])}\n")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def _output_dir(args) -> str:
    os.makedirs(args.output_dir, exist_ok=True)
    return args.output_dir


def _require_file(path, what: str):
    if path is None:
        raise UsageError(f"{what} path is required")
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _load(args, name: str):
    if name == "diagnostic":
        return experiments.prepare_wdbc(_require_file(args.wdbc, "--wdbc"), args.split_seed)
    if name == "mnist":
        _require_file(args.mnist_dir, "--mnist-dir")
        for f in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                  "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
            _require_file(os.path.join(args.mnist_dir, f), "MNIST file")
        return experiments.prepare_mnist(args.mnist_dir)
    raise UsageError(f"unknown dataset {name!r}")


def _privacy_from_args(args) -> privacy.PrivacyParams:
    if not args.q < 1.0:
        raise UsageError(f"--q must be < 1 (randomized projection needs q in (0, 1)), got {args.q}")
    try:
        return privacy.PrivacyParams(
            bits=args.bits, q=args.q, sigma=args.sigma, eta=args.eta, batch=args.batch,
            n=args.n, iters=args.iters, bound=args.bound, rho=args.rho,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


# --- commands ---------------------------------------------------------------

def cmd_account(args) -> int:
    p = _privacy_from_args(args)
    if args.solve == "q":
        try:
            p = p.with_(q=privacy.solve_q(args.epsilon, p))
        except privacy.UnattainableTargetError as e:
            raise UsageError(str(e)) from None
    elif args.solve == "sigma":
        try:
            p = p.with_(sigma=privacy.solve_sigma(args.epsilon, p))
        except privacy.UnattainableTargetError as e:
            raise UsageError(str(e)) from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        negative_c = privacy.warn_if_negative_c(p)
    if negative_c:
        print(f"warning: C = M - eta*rho = {p.bound - p.eta * p.rho:g} < 0; "
              "the sensitivity argument assumes C >= 0", file=sys.stderr)
    try:
        b = privacy.per_step_epsilon(p, args.convention)
    except privacy.UnboundedPrivacyError as e:
        raise UsageError(str(e)) from None
    total = privacy.total_epsilon(p, args.convention)
    print(f"epsilon_t = {b.epsilon_t:.6g}  total epsilon = {total:.6g}  "
          f"(q = {p.q:.6g}, sigma = {p.sigma:.6g}, sigma_l = {b.sigma_l:.6g}, T*m/n = {privacy.composition_factor(p):.6g})")
    header = ["bits", "q", "sigma", "epsilon_t", "sigma_l", "a1", "a2", "a3", "C", "total_epsilon"]
    row = [p.bits, p.q, p.sigma, b.epsilon_t, b.sigma_l, b.a1, b.a2, b.a3, b.C, total]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerow([fmt(float(v)) if not isinstance(v, int) else v for v in row])
    return 0


def cmd_bounds(args) -> int:
    try:
        u = UtilityParams(d=args.d, bound=args.bound, eta=args.eta, rho=args.rho, sigma=args.sigma,
                          iters=args.iters, bits=args.bits, q=args.q)
    except ValueError as e:
        raise UsageError(str(e)) from None
    eq, en, total = quantization_error(u), noise_error(u), utility_bound(u)
    print(f"bound = {total:.6g}  (E_Q = {eq:.6g}, E_N = {en:.6g})")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["d", "q", "sigma", "E_Q", "E_N", "bound"])
    w.writerow([u.d, fmt(u.q), fmt(u.sigma), fmt(eq), fmt(en), fmt(total)])
    return 0


def cmd_train(args) -> int:
    name = args.dataset
    train_set, test_set = _load(args, name)
    loss = "softmax" if train_set.classes > 2 else experiments.LOSS_NAMES[args.model]
    projected = args.algorithm in ("proj_dp_sgd", "rqp_sgd")
    try:
        grid = make_grid(args.bound, args.bits) if projected else None
        cfg = TrainConfig(
            algorithm=args.algorithm, eta=args.eta, batch=args.batch, iters=args.iters, rho=args.rho,
            loss=loss, sigma=args.sigma if args.algorithm != "sgd" else 0.0, grid=grid,
            q=args.q if args.algorithm == "rqp_sgd" else None,
            bound=args.box, seed=args.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    rec = train(cfg, train_set, test_set, delta=args.delta, accountant=args.baseline_accountant)
    out = _output_dir(args)
    stem = f"{name}_{args.model}_{args.algorithm}_seed{args.seed}"
    meta = dict(bits=grid.bits if grid else None, q=cfg.q, seed=args.seed)
    if args.report in ("final", "both"):
        save_model(os.path.join(out, f"{stem}.model"), rec.final_weights, **meta)
    if args.report in ("averaged", "both"):
        save_model(os.path.join(out, f"{stem}.avg.model"), rec.averaged_weights, **meta)
    metrics = {"dataset": name, "model": args.model, "report": args.report,
               **cfg.scalars(), **rec.scalars(), "version": __version__}
    with open(os.path.join(out, f"{stem}.jsonl"), "w") as f:
        f.write(json.dumps(metrics, sort_keys=True) + "\n")
    print(f"{args.algorithm} on {name}/{args.model}: test accuracy final {100 * rec.test_accuracy_final:.2f}%, "
          f"averaged {100 * rec.test_accuracy_averaged:.2f}%, epsilon {rec.realized_total_epsilon:.4g}")
    return 0


def _datasets(args) -> dict:
    names = [s.strip() for s in args.datasets.split(",") if s.strip()]
    for s in names:
        if s not in ("diagnostic", "mnist"):
            raise UsageError(f"unknown dataset {s!r}; choose from diagnostic, mnist")
    # load everything before the first run so a bad path fails fast
    return {s: _load(args, s) for s in names}


def _check_repeats(args):
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")


def cmd_table1(args) -> int:
    _check_repeats(args)
    if args.q is not None and args.sigma is not None:
        raise UsageError("give at most one of --q and --sigma; the other is solved for epsilon")
    if args.q is not None and not 0.0 < args.q < 1.0:
        raise UsageError(f"--q must lie in (0, 1), got {args.q}")
    data = _datasets(args)
    cells = experiments.table1(
        data, repeats=args.repeats, base_seed=args.base_seed, workers=args.workers,
        epsilon=args.epsilon, delta=args.delta, rqp_q=args.q, rqp_sigma=args.sigma,
        accountant=args.baseline_accountant,
    )
    meta = {
        "datasets": args.datasets, "repeats": args.repeats, "base_seed": args.base_seed,
        "epsilon": args.epsilon, "delta": args.delta, "baseline_accountant": args.baseline_accountant,
        "rqp_direction": "solve_q" if args.sigma is not None else "solve_sigma",
        "rqp_q": args.q if args.q is not None else experiments.DEFAULT_RQP_Q if args.sigma is None else None,
        "rqp_sigma": args.sigma, "split_seed": args.split_seed, "train_fraction": experiments.TRAIN_FRACTION,
        "diagnostic": experiments.DIAGNOSTIC, "mnist": experiments.MNIST,
        "metric": "final-iterate test accuracy (%)", "std": "population (ddof=0)",
        "sigma_units": "std of noise added to the clipped gradient sum",
    }
    rows = [(c.dataset, c.model, c.algorithm, c.median, c.std, c.epsilon, c.delta, c.q, c.sigma) for c in cells]
    path = os.path.join(_output_dir(args), "table1.csv")
    write_csv(path, "table1", meta,
              ["dataset", "model", "algorithm", "median_acc", "std_acc", "epsilon", "delta", "q", "sigma"], rows)
    for c in cells:
        print(f"{c.dataset:10s} {c.model:6s} {c.algorithm:12s} {c.median:6.2f}% ({c.std:.2f})")
    print(f"wrote {path}")
    return 0


def cmd_fig_tradeoff(args) -> int:
    _check_repeats(args)
    train_set, test_set = _load(args, "diagnostic")
    out = _output_dir(args)
    for bits in args.bits:
        for eps in args.epsilon:
            rows = experiments.tradeoff(
                train_set, test_set, epsilon=eps, bits=bits, sigma_grid=args.sigma_grid,
                model=args.model, repeats=args.repeats, base_seed=args.base_seed, workers=args.workers,
            )
            meta = {
                "epsilon": eps, "bits": bits, "model": args.model, "repeats": args.repeats,
                "base_seed": args.base_seed, "split_seed": args.split_seed,
                "sigma_grid": " ".join(fmt(r.sigma) for r in rows),
                "sigma_grid_rule": "user" if args.sigma_grid else
                f"geometric, {experiments.TRADEOFF_POINTS} points from {experiments.TRADEOFF_SIGMA_MIN} "
                f"to the sigma where solved q = {experiments.TRADEOFF_TOP_Q}",
                "setting": experiments.DIAGNOSTIC,
            }
            path = os.path.join(out, f"tradeoff_b{bits}_e{tag(eps)}.csv")
            write_csv(path, "fig-tradeoff", meta, ["sigma", "q", "median_acc", "std_acc", "attainable"],
                      [(r.sigma, r.q, r.median, r.std, r.attainable) for r in rows])
            print(f"wrote {path}")
    return 0


def cmd_fig_bounds(args) -> int:
    grid = args.epsilon_grid or list(experiments.CURVE_EPSILONS)
    out = _output_dir(args)
    for q in args.q:
        if not 0.0 < q < 1.0:
            raise UsageError(f"--q must lie in (0, 1), got {q}")
        pts = experiments.bound_curves(q, grid, delta=args.delta)
        meta = dict(experiments.CURVE_SETTING, q=q, delta=args.delta, epsilon_grid=" ".join(fmt(e) for e in grid),
                    proj_dp_noise="Gaussian mechanism at (eps/(T*m/n), delta) times rho")
        path = os.path.join(out, f"bounds_q{tag(q)}.csv")
        write_csv(path, "fig-bounds", meta, ["epsilon", "mode", "q", "sigma", "bound", "attainable"],
                  [(p.epsilon, p.mode, p.q, p.sigma, p.bound, p.attainable) for p in pts])
        print(f"wrote {path}")
    return 0


# --- parser -------------------------------------------------------------------

def _add_data(p):
    p.add_argument("--wdbc", default=os.environ.get("RQPSGD_WDBC"), help="path to wdbc.data")
    p.add_argument("--mnist-dir", default=os.environ.get("RQPSGD_MNIST_DIR"), help="directory with the four MNIST IDX files")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the 80/20 Diagnostic split")


def _add_repeat(p):
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--base-seed", type=int, default=42, help="run i uses base_seed + i")
    p.add_argument("--workers", type=int, default=1, help="threads for independent runs")
    p.add_argument("--output-dir", default=".")


def _add_common(p, d: experiments.Setting):
    p.add_argument("--bits", type=int, default=d.bits)
    p.add_argument("--bound", type=float, default=d.bound, help="grid half-width M")
    p.add_argument("--rho", type=float, default=d.rho, help="clipping norm")
    p.add_argument("--eta", type=float, default=d.eta)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--iters", "--iterations", dest="iters", type=int, default=d.iters)


def build_parser() -> argparse.ArgumentParser:
    ap = Parser(prog="rqpsgd", description="Randomized-quantization-projection DP-SGD experiments.")
    ap.add_argument("--version", action="version", version=f"rqpsgd {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="one training run")
    p.add_argument("--algorithm", choices=ALGORITHMS, required=True)
    p.add_argument("--dataset", choices=("diagnostic", "mnist"), default="diagnostic")
    p.add_argument("--model", choices=tuple(experiments.LOSS_NAMES), default="logreg")
    _add_common(p, experiments.DIAGNOSTIC)
    p.add_argument("--q", type=float, default=0.95)
    p.add_argument("--sigma", type=float, default=0.0, help="std of the noise on the clipped gradient sum")
    p.add_argument("--box", type=float, default=None, help="clip dp_sgd weights to [-box, box]")
    p.add_argument("--delta", type=float, default=experiments.DEFAULT_DELTA)
    p.add_argument("--baseline-accountant", choices=("rdp", "equal"), default="rdp")
    p.add_argument("--report", choices=("final", "averaged", "both"), default="final",
                   help="which iterate to save: <stem>.model is final, <stem>.avg.model averaged")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default=".")
    _add_data(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("account", help="per-step and total epsilon of RQP-SGD")
    _add_common(p, experiments.DIAGNOSTIC)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--n", type=int, default=455, help="training set size")
    p.add_argument("--epsilon", type=float, help="target total epsilon for --solve")
    p.add_argument("--solve", choices=("q", "sigma"), help="replace --q or --sigma by the value meeting --epsilon")
    p.add_argument("--convention", choices=("main", "appendix"), default="main",
                   help="sigma_l = eta*sigma/m (main) or eta*sigma (appendix)")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("bounds", help="excess empirical loss bound")
    _add_common(p, experiments.DIAGNOSTIC)
    p.add_argument("--d", type=int, required=True, help="model dimension")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("table1", help="median/std test accuracy of the four algorithms")
    p.add_argument("--datasets", default="diagnostic,mnist", help="comma list of diagnostic, mnist")
    p.add_argument("--epsilon", type=float, default=experiments.DEFAULT_EPSILON)
    p.add_argument("--delta", type=float, default=experiments.DEFAULT_DELTA, help="delta of the Gaussian baselines")
    p.add_argument("--q", type=float, default=None, help=f"RQP q (default {experiments.DEFAULT_RQP_Q}; sigma solved)")
    p.add_argument("--sigma", type=float, default=None, help="RQP sigma (q solved instead)")
    p.add_argument("--baseline-accountant", choices=("rdp", "equal"), default="rdp")
    _add_repeat(p)
    _add_data(p)
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("fig-tradeoff", help="solved q and accuracy along a sigma grid at fixed epsilon")
    p.add_argument("--epsilon", type=float, nargs="+", default=[0.5, 1.0])
    p.add_argument("--bits", type=int, nargs="+", default=[3, 4])
    p.add_argument("--model", choices=tuple(experiments.LOSS_NAMES), default="logreg")
    p.add_argument("--sigma-grid", type=float, nargs="+", default=None)
    _add_repeat(p)
    _add_data(p)
    p.set_defaults(func=cmd_fig_tradeoff)

    p = sub.add_parser("fig-bounds", help="utility bound against epsilon, RQP vs Proj-DP")
    p.add_argument("--q", type=float, nargs="+", default=[0.90, 0.95])
    p.add_argument("--epsilon-grid", type=float, nargs="+", default=None)
    p.add_argument("--delta", type=float, default=experiments.DEFAULT_DELTA)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=cmd_fig_bounds)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"rqpsgd {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"rqpsgd {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as e:
        print(f"rqpsgd {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
