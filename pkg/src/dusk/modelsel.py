"""Grid search over (R, C, sigma) and repeated stratified hold-out evaluation."""
from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import cp as cp_mod
from .cp import CpOptions
from .errors import ArgumentError, NumericalError
from .kernels import GramMatrix, KernelSpec, dense_sqdist, kernel_from_tables, pair_tables
from .svm import TrainConfig, predict, train

log = logging.getLogger(__name__)

DEFAULT_C_GRID = tuple(2.0 ** e for e in range(-5, 10))
DEFAULT_SIGMA_GRID = tuple(2.0 ** e for e in range(-4, 10))
DEFAULT_RANK_GRID = tuple(range(1, 13))

FAST_C_GRID = tuple(2.0 ** e for e in (-5, -1, 3, 7))
FAST_SIGMA_GRID = tuple(2.0 ** e for e in (-4, -2, 0, 2))
FAST_RANK_GRID = (1, 2, 3, 4, 6, 8)
FAST_REPEATS = 5

# above this many table entries per rank, Grams are rebuilt per sigma
_TABLE_LIMIT = 20_000_000


@dataclass(frozen=True)
class GridConfig:
    c_grid: tuple = DEFAULT_C_GRID
    sigma_grid: tuple = DEFAULT_SIGMA_GRID
    rank_grid: tuple = DEFAULT_RANK_GRID
    inner_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("c_grid", "sigma_grid", "rank_grid"):
            values = tuple(getattr(self, name))
            if not values:
                raise ArgumentError(f"{name} is empty")
            if not all(np.isfinite(v) and v > 0 for v in values):
                raise ArgumentError(f"{name} must hold positive finite values")
            object.__setattr__(self, name, values)
        if not all(float(r).is_integer() for r in self.rank_grid):
            raise ArgumentError("rank_grid must hold integers")
        object.__setattr__(self, "rank_grid", tuple(int(r) for r in self.rank_grid))
        if self.inner_folds < 2:
            raise ArgumentError("inner_folds must be >= 2")

    @classmethod
    def fast(cls, **kw):
        kw.setdefault("c_grid", FAST_C_GRID)
        kw.setdefault("sigma_grid", FAST_SIGMA_GRID)
        kw.setdefault("rank_grid", FAST_RANK_GRID)
        return cls(**kw)

    @property
    def cardinality(self) -> int:
        return len(self.rank_grid) * len(self.c_grid) * len(self.sigma_grid)


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise ArgumentError("accuracy of an empty prediction list")
    if p.shape != y.shape:
        raise ArgumentError(f"{p.size} predictions for {y.size} labels")
    return float(np.mean(p == y))


def stratified_folds(labels, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Validation index sets of a stratified ``k``-fold partition.

    ``k`` shrinks to the smallest class count when needed.
    """
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ArgumentError("stratified folds need both classes")
    smallest = int(counts.min())
    if smallest < 2:
        raise ArgumentError(f"cannot stratify: a class has only {smallest} instance")
    if k > smallest:
        log.warning("reducing folds from %d to %d (smallest class size)", k, smallest)
        k = smallest
    folds = [[] for _ in range(k)]
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        for f, chunk in enumerate(np.array_split(idx, k)):
            folds[(f + offset) % k].extend(chunk.tolist())
        # rotate so remainders spread over folds
        offset += len(idx) % k
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def stratified_split(labels, train_frac: float, rng: np.random.Generator):
    """Stratified train/test index split."""
    if not 0 < train_frac < 1:
        raise ArgumentError("train_frac must lie in (0, 1)")
    y = np.asarray(labels)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n = len(idx)
        n_train = int(np.floor(train_frac * n + 0.5))
        n_train = min(max(n_train, 1), max(n - 1, 1))
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    if not test_idx:
        raise ArgumentError("split leaves no test instances")
    return np.sort(np.asarray(train_idx)), np.sort(np.asarray(test_idx))


class KernelBank:
    """Per-rank CP representations and component tables over a whole dataset.

    Factorizations use seeds derived from the instance index, so every
    instance has the same representation whatever split it lands in.
    ``method='vector'`` ignores ranks and works on flattened instances.
    """

    def __init__(
        self,
        data: np.ndarray,
        kind: str = "rbf",
        method: str = "dusk",
        cp_opts: CpOptions | None = None,
        threads: int = 1,
        cache_dir=None,
        dataset=None,
    ):
        if kind not in ("rbf", "linear"):
            raise ArgumentError(f"unknown kernel {kind!r}")
        if method not in ("dusk", "vector"):
            raise ArgumentError(f"unknown method {method!r}")
        self.data = np.asarray(data, dtype=np.float64)
        self.kind = kind
        self.method = method
        self.cp_opts = cp_opts or CpOptions()
        self.threads = threads
        self.cache_dir = cache_dir
        self.dataset = dataset
        self._models: dict = {}
        self._tables: dict = {}
        self._lock = threading.Lock()
        self.factorize_seconds = 0.0

    def models(self, rank: int) -> list:
        with self._lock:
            if rank not in self._models:
                t0 = time.perf_counter()
                if self.cache_dir is not None and self.dataset is not None:
                    from .dataio import cache_load

                    models = cache_load(self.dataset, rank, self.cp_opts, self.cache_dir, self.threads).models
                else:
                    models = cp_mod.factorize_dataset(
                        list(self.data), rank, self.cp_opts, threads=self.threads
                    )
                self._models[rank] = models
                self.factorize_seconds += time.perf_counter() - t0
            return self._models[rank]

    def _table(self, rank):
        key = None if self.method == "vector" else rank
        with self._lock:
            cached = self._tables.get(key)
        if cached is not None:
            return cached
        if self.method == "vector":
            flat = self.data.reshape(len(self.data), -1)
            table = dense_sqdist(flat) if self.kind == "rbf" else flat @ flat.T
        else:
            models = self.models(rank)
            m = len(models)
            if m * m * rank * rank > _TABLE_LIMIT:
                return None
            table = pair_tables(self.kind, models, threads=self.threads)
        with self._lock:
            self._tables.setdefault(key, table)
        return table

    def prepare(self, ranks: Sequence[int]) -> None:
        for r in ([None] if self.method == "vector" else ranks):
            self._table(r)

    def spec(self, sigma) -> KernelSpec:
        return KernelSpec.linear() if self.kind == "linear" else KernelSpec.rbf(sigma)

    def kernel(self, rank, sigma, rows, cols) -> np.ndarray:
        """Kernel block ``k(rows, cols)`` for one hyperparameter setting."""
        rows, cols = np.asarray(rows), np.asarray(cols)
        table = self._table(rank)
        if self.method == "vector":
            block = table[np.ix_(rows, cols)]
            return block if self.kind == "linear" else np.exp(-sigma * block)
        spec = self.spec(sigma)
        if table is None:
            from .kernels import gram_cross

            models = self.models(rank)
            return gram_cross(spec, [models[i] for i in cols], [models[i] for i in rows])
        return kernel_from_tables(spec, table[np.ix_(rows, cols)])

    def gram(self, rank, sigma, idx) -> GramMatrix:
        k = self.kernel(rank, sigma, idx, idx)
        # exact symmetry regardless of summation order
        k = np.triu(k) + np.triu(k, 1).T
        return GramMatrix(k, self.spec(sigma), rank if self.method == "dusk" else 0)


@dataclass
class GridResult:
    best: tuple
    table: list
    folds: int

    def rank_curve(self) -> dict:
        """Best cross-validated accuracy for each rank."""
        curve: dict = {}
        for r, _, _, score in self.table:
            if np.isfinite(score):
                curve[r] = max(curve.get(r, -np.inf), score)
        return curve

    def peak_rank(self):
        curve = self.rank_curve()
        best = max(curve.values())
        return min(r for r, s in curve.items() if s == best)

    def to_csv(self) -> str:
        lines = ["rank,c,sigma,cv_accuracy"]
        for r, c, s, score in self.table:
            lines.append(",".join(_fmt(v) for v in (r, c, s, score)))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _grid_axes(bank: KernelBank, grid: GridConfig):
    ranks = (None,) if bank.method == "vector" else grid.rank_grid
    sigmas = (None,) if bank.kind == "linear" else grid.sigma_grid
    return ranks, sigmas


def _cv_score(k_full, C, labels, folds, kkt_tol) -> float:
    correct = 0
    total = 0
    for va in folds:
        tr = np.setdiff1d(np.arange(len(labels)), va)
        model = train(k_full[np.ix_(tr, tr)], labels[tr], TrainConfig(C=C, kkt_tol=kkt_tol), check_psd=False)
        pred = predict(model, k_full[np.ix_(va, tr)])
        correct += int(np.sum(pred == labels[va]))
        total += len(va)
    return correct / total


def grid_search(
    bank: KernelBank,
    labels,
    grid: GridConfig,
    idx=None,
    fold_seed=None,
    kkt_tol: float = 1e-3,
) -> GridResult:
    """Pick ``(R, C, sigma)`` by stratified k-fold accuracy.

    Parameters
    ----------
    bank : KernelBank
        Representations of the full dataset.
    labels : array_like
        Labels of the instances in ``idx`` (in that order); nothing else is
        read.
    grid : GridConfig
    idx : array_like, optional
        Dataset indices the search may use; all instances by default.
    fold_seed : optional
        Seed for the fold assignment; defaults to ``grid.seed``.

    Ties go to the smaller R, then smaller C, then larger sigma.
    """
    idx = np.arange(len(bank.data)) if idx is None else np.asarray(idx)
    labels = np.asarray(labels)
    if len(labels) != len(idx):
        raise ArgumentError(f"{len(labels)} labels for {len(idx)} instances")
    rng = np.random.default_rng(grid.seed if fold_seed is None else fold_seed)
    folds = stratified_folds(labels, grid.inner_folds, rng)
    ranks, sigmas = _grid_axes(bank, grid)
    table = []
    for r in ranks:
        for s in sigmas:
            k_full = bank.gram(r, s, idx).entries
            for c in grid.c_grid:
                try:
                    score = _cv_score(k_full, c, labels, folds, kkt_tol)
                except NumericalError as e:
                    log.warning("grid cell R=%s C=%g sigma=%s failed: %s", r, c, s, e)
                    score = float("nan")
                table.append((r, c, s, score))
    table.sort(key=lambda row: (
        -1 if row[0] is None else row[0], row[1], 0.0 if row[2] is None else -row[2]
    ))
    valid = [row for row in table if np.isfinite(row[3])]
    if not valid:
        raise NumericalError("every grid cell failed to train")
    best_score = max(row[3] for row in valid)
    best = next(row for row in valid if row[3] == best_score)
    return GridResult(best=best[:3], table=table, folds=len(folds))


@dataclass
class EvalReport:
    accuracies: list
    chosen: list
    method: str = "dusk"
    kind: str = "rbf"
    timings: dict = field(default_factory=dict, compare=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def summary(self) -> str:
        return f"{self.mean:.2f} ({self.std:.2f})"

    def to_csv(self) -> str:
        lines = ["repeat,rank,c,sigma,accuracy"]
        for i, (acc, (r, c, s)) in enumerate(zip(self.accuracies, self.chosen)):
            lines.append(",".join([str(i), _fmt(r), _fmt(c), _fmt(s), _fmt(acc)]))
        return "\n".join(lines) + "\n"


def repeated_holdout(
    data,
    labels,
    grid: GridConfig,
    repeats: int = 50,
    train_frac: float = 0.8,
    seed: int = 0,
    kind: str = "rbf",
    method: str = "dusk",
    cp_opts: CpOptions | None = None,
    threads: int = 1,
    kkt_tol: float = 1e-3,
    bank: KernelBank | None = None,
) -> EvalReport:
    """Repeated stratified hold-out with an inner grid search per repeat.

    Each repeat draws a stratified split, runs :func:`grid_search` on the
    training part only, retrains on the whole training part with the chosen
    setting and scores the held-out part.
    """
    if repeats < 1:
        raise ArgumentError("repeats must be >= 1")
    labels = np.asarray(labels)
    if bank is None:
        bank = KernelBank(data, kind, method, cp_opts or CpOptions(seed=seed), threads)
    t0 = time.perf_counter()
    bank.prepare(grid.rank_grid)
    t_prep = time.perf_counter() - t0

    def one(rep):
        rng = np.random.default_rng([seed, rep])
        tr, te = stratified_split(labels, train_frac, rng)
        t1 = time.perf_counter()
        try:
            res = grid_search(bank, labels[tr], grid, idx=tr, fold_seed=[seed, rep, 1], kkt_tol=kkt_tol)
            r, s, c = res.best[0], res.best[2], res.best[1]
            t2 = time.perf_counter()
            model = train(bank.gram(r, s, tr), labels[tr], TrainConfig(C=c, kkt_tol=kkt_tol), check_psd=False)
            pred = predict(model, bank.kernel(r, s, te, tr))
        except Exception as e:
            e.args = (f"repeat {rep} (seed {seed}): {e.args[0] if e.args else e}",) + e.args[1:]
            raise
        t3 = time.perf_counter()
        return accuracy(pred, labels[te]), res.best, t2 - t1, t3 - t2

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(repeats)))
    else:
        results = [one(i) for i in range(repeats)]
    return EvalReport(
        accuracies=[r[0] for r in results],
        chosen=[r[1] for r in results],
        method=method,
        kind=kind,
        timings={
            "factorize": bank.factorize_seconds,
            "tables": t_prep - bank.factorize_seconds,
            "grid_search": sum(r[2] for r in results),
            "final_fit": sum(r[3] for r in results),
        },
    )
