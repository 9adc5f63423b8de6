"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import dataio
from .bench import run_bench
from .cp import CpOptions, factorize_dataset
from .errors import ArgumentError, DataError, NumericalError, RankError, ShapeError
from .kernels import KernelSpec, gram
from .modelsel import (
    FAST_REPEATS,
    GridConfig,
    KernelBank,
    accuracy,
    grid_search,
    repeated_holdout,
)
from .svm import TrainConfig, decision_values_models, train

log = logging.getLogger("dusk")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(eval_pow(t)) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from e


def eval_pow(tok: str) -> float:
    """Parse ``0.5``, ``2^-3`` or ``2**-3``."""
    tok = tok.strip().replace("**", "^")
    if "^" in tok:
        base, exp = tok.split("^", 1)
        return float(base) ** float(exp)
    return float(tok)


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from e


def _shape(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad shape {text!r} (expected e.g. 10x10x10)") from e


def _add_common(p, kernel=True, rank=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--normalize", action="store_true", help="rescale each instance to [0, 1]")
    p.add_argument("--max-iter", type=int, default=500, help="CP-ALS iteration cap")
    p.add_argument("--tol", type=float, default=1e-6, help="CP-ALS tolerance on fit change")
    p.add_argument("--line-search", action="store_true", help="CP-ALS extrapolation between sweeps")
    p.add_argument("--n-init", type=int, default=5, help="random CP-ALS starts screened per instance")
    p.add_argument("--cache-dir", default=None, help="directory for cached CP representations")
    if rank:
        p.add_argument("--rank", type=int, required=True)
    if kernel:
        p.add_argument("--kernel", choices=("linear", "rbf"), default="rbf")
        p.add_argument("--sigma", type=eval_pow, default=None)


def _add_grid(p):
    p.add_argument("--method", choices=("dusk", "vector"), default="dusk")
    p.add_argument("--kernel", choices=("linear", "rbf"), default="rbf")
    p.add_argument("--c-grid", type=_float_list, default=None)
    p.add_argument("--sigma-grid", type=_float_list, default=None)
    p.add_argument("--rank-grid", type=_int_list, default=None)
    p.add_argument("--folds", type=int, default=5, help="inner cross-validation folds")
    p.add_argument("--fast", action="store_true", help="coarse grids and 5 repeats")
    p.add_argument("--kkt-tol", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dusk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic low-rank two-class dataset")
    p.add_argument("--shape", type=_shape, required=True)
    p.add_argument("--rank", type=int, required=True, help="rank of each class signal")
    p.add_argument("--m", type=int, required=True, help="total instances (split evenly by class)")
    p.add_argument("--noise", type=float, default=0.1, help="noise norm relative to signal norm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--text", action="store_true", help="write the text format")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("factorize", help="CP-factorize every instance")
    p.add_argument("data")
    _add_common(p, kernel=False)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("gram", help="DuSK Gram matrix of a dataset")
    p.add_argument("data")
    _add_common(p)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("train", help="train an SVM with a fixed (R, C, sigma)")
    p.add_argument("data")
    _add_common(p)
    p.add_argument("--c", type=eval_pow, required=True)
    p.add_argument("--kkt-tol", type=float, default=1e-3)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("predict", help="score a dataset with a trained model")
    p.add_argument("model")
    p.add_argument("data")
    _add_common(p, kernel=False, rank=False)
    p.add_argument("-o", "--output", default=None, help="CSV of decision values and labels")

    p = sub.add_parser("evaluate", help="repeated stratified hold-out with inner grid search")
    p.add_argument("data")
    _add_common(p, kernel=False, rank=False)
    _add_grid(p)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("-o", "--output", default=None, help="per-repeat CSV")

    p = sub.add_parser("gridsearch", help="cross-validated grid search on a whole dataset")
    p.add_argument("data")
    _add_common(p, kernel=False, rank=False)
    _add_grid(p)
    p.add_argument("-o", "--output", default=None, help="score table CSV")

    p = sub.add_parser("bench", help="DuSK timing versus rank and mode length")
    p.add_argument("--ranks", type=_int_list, default=(16, 32, 64, 128))
    p.add_argument("--rank-shape", type=_shape, default=(256, 256, 256))
    p.add_argument("--dims", type=_int_list, default=(64, 128, 256, 512, 1024))
    p.add_argument("--size-rank", type=int, default=32)
    p.add_argument("--sigma", type=eval_pow, default=1.0)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-gram", action="store_true", help="skip the Gram comparison")
    p.add_argument("-o", "--output", default=None)
    return parser


def _cp_opts(args) -> CpOptions:
    return CpOptions(
        max_iter=args.max_iter, tol=args.tol, seed=args.seed, line_search=args.line_search, n_init=args.n_init
    )


def _kernel_spec(args) -> KernelSpec:
    if args.kernel == "rbf":
        if args.sigma is None:
            raise UsageError("--sigma is required with --kernel rbf")
        return KernelSpec.rbf(args.sigma)
    if args.sigma is not None:
        raise UsageError("--sigma only applies to --kernel rbf")
    return KernelSpec.linear()


def _load(args) -> dataio.TensorDataset:
    ds = dataio.load_dataset(args.data)
    return ds.rescaled() if args.normalize else ds


def _models(args, ds, rank):
    opts = _cp_opts(args)
    if args.cache_dir:
        return dataio.cache_load(ds, rank, opts, args.cache_dir, args.threads).models
    return factorize_dataset(list(ds.data), rank, opts, threads=args.threads)


def _grid(args) -> GridConfig:
    base = GridConfig.fast if args.fast else GridConfig
    kw = {"inner_folds": args.folds, "seed": args.seed}
    for name in ("c_grid", "sigma_grid", "rank_grid"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    return base(**kw)


def cmd_synth(args):
    if args.m < 2 or args.m % 2:
        raise UsageError("--m must be an even number >= 2")
    ds = dataio.synth_lowrank(args.shape, args.rank, args.m // 2, args.noise, args.seed)
    dataio.save_dataset(ds, args.output, "text" if args.text else "binary")
    print(f"wrote {ds.m} instances of shape {'x'.join(map(str, ds.shape))} to {args.output}")


def cmd_factorize(args):
    ds = _load(args)
    opts = _cp_opts(args)
    models, reports = factorize_dataset(list(ds.data), args.rank, opts, threads=args.threads, with_reports=True)
    cache = dataio.CpCache(ds.content_hash, args.rank, dataio.options_digest(opts), opts.seed, models)
    dataio.cache_store(cache, args.output)
    fits = np.array([r.final_fit for r in reports])
    dense = ds.m * int(np.prod(ds.shape))
    stored = sum(m.n_scalars for m in models)
    print(f"rank {args.rank}: mean fit {fits.mean():.6f} (min {fits.min():.6f})")
    print(f"stored scalars {stored} vs dense {dense}")


def cmd_gram(args):
    spec = _kernel_spec(args)
    ds = _load(args)
    g = gram(spec, _models(args, ds, args.rank), threads=args.threads, dataset_hash=ds.content_hash)
    dataio.save_gram(g, args.output)
    lo, hi = g.min_max_eig()
    print(f"{g.size}x{g.size} {spec} R={args.rank}: eigenvalues in [{lo:.4g}, {hi:.4g}]")


def cmd_train(args):
    spec = _kernel_spec(args)
    ds = _load(args)
    models = _models(args, ds, args.rank)
    g = gram(spec, models, threads=args.threads, dataset_hash=ds.content_hash)
    model = train(g, ds.labels, TrainConfig(C=args.c, kkt_tol=args.kkt_tol), models=models)
    dataio.save_svm(model, args.output)
    print(f"{len(model.support_indices)} support vectors of {ds.m}, bias {model.bias:.6g}")


def cmd_predict(args):
    model = dataio.load_svm(args.model)
    ds = _load(args)
    if model.rank is None:
        raise DataError("model has no CP rank")
    values = decision_values_models(model, _models(args, ds, model.rank), threads=args.threads)
    pred = np.where(values >= 0, 1, -1)
    if args.output:
        lines = ["index,decision,prediction,label"]
        lines += [f"{i},{v!r},{p},{y}" for i, (v, p, y) in enumerate(zip(values.tolist(), pred, ds.labels))]
        dataio.atomic_write(args.output, "\n".join(lines) + "\n")
    print(f"accuracy {accuracy(pred, ds.labels):.4f} on {ds.m} instances")


def cmd_evaluate(args):
    ds = _load(args)
    grid = _grid(args)
    repeats = args.repeats if args.repeats is not None else (FAST_REPEATS if args.fast else 50)
    bank = KernelBank(
        ds.data, args.kernel, args.method, _cp_opts(args), args.threads, args.cache_dir, ds
    )
    report = repeated_holdout(
        ds.data, ds.labels, grid, repeats=repeats, train_frac=args.train_frac,
        seed=args.seed, kind=args.kernel, method=args.method, threads=args.threads,
        kkt_tol=args.kkt_tol, bank=bank,
    )
    if args.output:
        dataio.atomic_write(args.output, report.to_csv())
    log.info("timings: %s", {k: round(v, 3) for k, v in report.timings.items()})
    print(report.summary())


def cmd_gridsearch(args):
    ds = _load(args)
    grid = _grid(args)
    bank = KernelBank(
        ds.data, args.kernel, args.method, _cp_opts(args), args.threads, args.cache_dir, ds
    )
    bank.prepare(grid.rank_grid)
    res = grid_search(bank, ds.labels, grid, kkt_tol=args.kkt_tol)
    if args.output:
        dataio.atomic_write(args.output, res.to_csv())
    r, c, s = res.best
    print(f"best R={r} C={c!r} sigma={s!r} over {len(res.table)} cells ({res.folds} folds)")
    if args.method == "dusk":
        print("rank,best_cv_accuracy")
        for rank, score in sorted(res.rank_curve().items()):
            print(f"{rank},{score!r}")


def cmd_bench(args):
    res = run_bench(
        ranks=args.ranks, rank_shape=args.rank_shape, dims=args.dims, size_rank=args.size_rank,
        order=len(args.rank_shape), spec=KernelSpec.rbf(args.sigma), repeats=args.repeats,
        seed=args.seed, compare_gram=not args.no_gram,
    )
    if args.output:
        dataio.atomic_write(args.output, res.to_csv())
    print(res.report())


COMMANDS = {
    "synth": cmd_synth,
    "factorize": cmd_factorize,
    "gram": cmd_gram,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "threads", 1) < 1:
        print("dusk: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args)
    except (UsageError, ArgumentError) as e:
        print(f"dusk: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, RankError, OSError) as e:
        print(f"dusk: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"dusk: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    return 0


def main():
    sys.exit(run())
