"""CP factorization by alternating least squares."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Sequence

import numpy as np
from scipy.linalg.lapack import dposv

from .errors import ArgumentError, DegenerateInputError, DuskError, NonFiniteError, ShapeError
from .tensor import DenseTensor, as_array, unfold


@dataclass(frozen=True, eq=False)
class CpModel:
    """Sum of ``rank`` rank-one terms, no separate weights.

    ``factors[n]`` has shape ``(I_n, rank)``; column ``r`` is the mode-n
    vector of term ``r``.
    """

    factors: tuple

    def __post_init__(self):
        if len(self.factors) == 0:
            raise ArgumentError("CpModel needs at least one mode")
        mats = []
        rank = None
        for n, f in enumerate(self.factors):
            f = np.array(f, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
                raise ShapeError(f"factor {n} must be a non-empty matrix, got shape {f.shape}")
            if rank is None:
                rank = f.shape[1]
            elif f.shape[1] != rank:
                raise ShapeError(f"factor {n} has {f.shape[1]} columns, expected {rank}")
            if not np.all(np.isfinite(f)):
                raise NonFiniteError(f"factor {n} is not finite")
            f.setflags(write=False)
            mats.append(f)
        object.__setattr__(self, "factors", tuple(mats))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def n_scalars(self) -> int:
        return self.rank * sum(self.shape)

    def __eq__(self, other):
        if not isinstance(other, CpModel):
            return NotImplemented
        return len(self.factors) == len(other.factors) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.factors, other.factors)
        )

    def __repr__(self):
        return f"CpModel(shape={self.shape}, rank={self.rank})"


@dataclass(frozen=True)
class CpOptions:
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0
    line_search: bool = False
    # random starts screened for ``screen_iter`` sweeps; the best one continues
    n_init: int = 5
    screen_iter: int = 10

    def __post_init__(self):
        if self.max_iter < 1:
            raise ArgumentError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ArgumentError("tol must be > 0")
        if self.n_init < 1 or self.screen_iter < 1:
            raise ArgumentError("n_init and screen_iter must be >= 1")

    def digest_fields(self) -> tuple:
        return (self.max_iter, self.tol, self.seed, self.line_search, self.n_init, self.screen_iter)


@dataclass
class CpFitReport:
    iterations: int
    final_fit: float
    converged: bool
    fit_history: list = field(default_factory=list)


def khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product, last matrix's row index fastest."""
    rank = mats[0].shape[1]
    return reduce(lambda a, b: (a[:, None, :] * b[None, :, :]).reshape(-1, rank), mats)


def _full(factors: Sequence[np.ndarray]) -> np.ndarray:
    shape = tuple(f.shape[0] for f in factors)
    if len(factors) == 1:
        return factors[0].sum(axis=1)
    return (factors[0] @ khatri_rao(factors[1:]).T).reshape(shape)


def reconstruct(m: CpModel) -> DenseTensor:
    """Dense tensor represented by ``m``."""
    return DenseTensor(_full(m.factors))


def _lstsq_update(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """``rhs @ pinv(gram)`` for symmetric PSD ``gram``.

    Cholesky when the Gramian is comfortably positive definite, otherwise an
    eigen-decomposition pseudo-inverse with relative cutoff 1e-12.
    """
    chol, sol, info = dposv(gram, rhs.T, lower=0)
    if info == 0:
        d = np.abs(np.diag(chol))
        if d.min() ** 2 > 1e-10 * d.max() ** 2:
            return sol.T
    w, v = np.linalg.eigh(gram)
    keep = w > 1e-12 * max(w[-1], 0.0)
    if not keep.any():
        return np.zeros_like(rhs)
    vk = v[:, keep]
    return ((rhs @ vk) / w[keep]) @ vk.T


def _balance(factors: list) -> None:
    """Equalize column norms across modes and fix signs, in place.

    Each column ends up with norm ``lambda_r ** (1/N)``. For every mode but
    the last, the largest-magnitude entry of each column is made positive;
    the last mode absorbs the sign so the represented tensor is unchanged.
    """
    order = len(factors)
    rank = factors[0].shape[1]
    norms = np.sqrt(np.array([np.einsum("ij,ij->j", f, f) for f in factors]))
    lam = norms.prod(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(lam > 0, lam ** (1.0 / order) / norms, 0.0)
    cols = np.arange(rank)
    sign_total = np.ones(rank)
    for n, f in enumerate(factors):
        f *= scale[n]
        if n < order - 1:
            s = np.where(f[np.abs(f).argmax(axis=0), cols] < 0, -1.0, 1.0)
            f *= s
            sign_total *= s
    factors[-1] *= sign_total


def _fit(x: np.ndarray, factors, norm_x: float) -> float:
    r = (x - _full(factors)).reshape(-1)
    return 1.0 - float(np.sqrt(r @ r)) / norm_x


# below this relative error the expanded residual formula loses digits
_EXPLICIT_BELOW = 0.05


def _start_seed(seed: int, start: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(start)]).generate_state(1)[0])


class _Als:
    """State of one ALS run: factors, fit history and convergence flag."""

    def __init__(self, x, unfoldings, norm_x, factors, opts):
        self.x, self.unfoldings, self.norm_x = x, unfoldings, norm_x
        self.factors = factors
        self.opts = opts
        self.history: list[float] = []
        self.prev = None
        self.converged = False

    def sweep(self) -> None:
        x, factors, order = self.x, self.factors, self.x.ndim
        if order == 1:
            # a single mode is linear in its factor: any split of x works
            factors[0] = np.zeros((x.shape[0], factors[0].shape[1]))
            factors[0][:, 0] = x
            fit = 1.0
        else:
            grams = [f.T @ f for f in factors]
            for n in range(order):
                others = [factors[m] for m in range(order) if m != n]
                gram = reduce(np.multiply, [grams[m] for m in range(order) if m != n])
                mttkrp = self.unfoldings[n] @ khatri_rao(others)
                factors[n] = _lstsq_update(gram, mttkrp)
                grams[n] = factors[n].T @ factors[n]
            # ||x - xhat||^2 = ||x||^2 - 2 <x, xhat> + ||xhat||^2
            cross = float(np.einsum("ij,ij->", factors[-1], mttkrp))
            sq = self.norm_x ** 2 - 2.0 * cross + float(reduce(np.multiply, grams).sum())
            rel = np.sqrt(max(sq, 0.0)) / self.norm_x
            fit = 1.0 - rel if rel > _EXPLICIT_BELOW else _fit(x, factors, self.norm_x)
        _balance(factors)

        if self.opts.line_search and self.prev is not None:
            step = (len(self.history) + 1) ** (1.0 / 3.0)
            trial = [f + step * (f - p) for f, p in zip(factors, self.prev)]
            if all(np.all(np.isfinite(t)) for t in trial):
                _balance(trial)
                trial_fit = _fit(x, trial, self.norm_x)
                if trial_fit > fit:
                    self.factors, fit = trial, trial_fit
        self.prev = [f.copy() for f in self.factors]

        h = self.history
        h.append(fit)
        if (len(h) >= 2 and abs(h[-1] - h[-2]) < self.opts.tol) or fit >= 1.0 - 1e-15:
            self.converged = True

    def run(self, until: int) -> None:
        while not self.converged and len(self.history) < until:
            self.sweep()


def cp_als(x, rank: int, opts: CpOptions | None = None, init: CpModel | None = None):
    """Fit a rank-``rank`` CP model by alternating least squares.

    Parameters
    ----------
    x : DenseTensor or array_like
        Tensor to factorize; must not be all zeros.
    rank : int
        Number of rank-one terms.
    opts : CpOptions, optional
        Iteration cap, tolerance on the change in fit, seed, number of
        random normal starts and whether to try an extrapolation step after
        each sweep. Each start runs ``screen_iter`` sweeps; the one with the
        best fit (earliest on ties) continues to convergence.
    init : CpModel, optional
        Starting factors. Overrides the random initialization.

    Returns
    -------
    model : CpModel
    report : CpFitReport
        ``fit = 1 - ||x - model|| / ||x||`` after each sweep of the
        selected start.
    """
    opts = opts or CpOptions()
    if not isinstance(rank, (int, np.integer)) or rank < 1:
        raise ArgumentError(f"rank must be a positive integer, got {rank!r}")
    x = as_array(x)
    if x.ndim < 1 or not np.all(np.isfinite(x)):
        raise ArgumentError("x must be a finite tensor of order >= 1")
    norm_x = float(np.linalg.norm(x.reshape(-1)))
    if norm_x == 0.0:
        raise DegenerateInputError("cannot factorize the zero tensor (fit undefined)")

    unfoldings = [unfold(x, n) for n in range(x.ndim)]
    if init is not None:
        if init.shape != x.shape or init.rank != rank:
            raise ShapeError(f"init {init!r} does not match shape {x.shape} / rank {rank}")
        starts = [[np.array(f) for f in init.factors]]
    elif opts.n_init == 1:
        rng = np.random.default_rng(opts.seed)
        starts = [[rng.standard_normal((dim, rank)) for dim in x.shape]]
    else:
        starts = []
        for s in range(opts.n_init):
            rng = np.random.default_rng(_start_seed(opts.seed, s))
            starts.append([rng.standard_normal((dim, rank)) for dim in x.shape])

    runs = [_Als(x, unfoldings, norm_x, f, opts) for f in starts]
    if len(runs) > 1:
        for r in runs:
            r.run(min(opts.screen_iter, opts.max_iter))
    best = max(runs, key=lambda r: r.history[-1] if r.history else -np.inf)
    best.run(opts.max_iter)

    model = CpModel(tuple(best.factors))
    report = CpFitReport(
        iterations=len(best.history),
        final_fit=best.history[-1],
        converged=best.converged,
        fit_history=best.history,
    )
    return model, report


def instance_seed(seed: int, index: int) -> int:
    """Seed for instance ``index`` derived from a global seed."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def factorize_dataset(
    xs,
    rank: int,
    opts: CpOptions | None = None,
    seeds: Sequence[int] | None = None,
    threads: int = 1,
    with_reports: bool = False,
):
    """Factorize each instance independently.

    Instance ``i`` uses ``seeds[i]`` when given, otherwise a seed derived
    from ``(opts.seed, i)``; results do not depend on ``threads``.
    """
    opts = opts or CpOptions()
    xs = [as_array(x) for x in xs]
    if not xs:
        return ([], []) if with_reports else []
    shape = xs[0].shape
    for i, x in enumerate(xs):
        if x.shape != shape:
            raise ShapeError(f"instance {i} has shape {x.shape}, expected {shape}")
    if seeds is None:
        seeds = [instance_seed(opts.seed, i) for i in range(len(xs))]
    elif len(seeds) != len(xs):
        raise ArgumentError(f"{len(seeds)} seeds for {len(xs)} instances")

    def one(i):
        try:
            return cp_als(xs[i], rank, replace(opts, seed=int(seeds[i])))
        except DuskError as e:
            e.args = (f"instance {i}: {e.args[0] if e.args else e}",) + e.args[1:]
            e.index = i
            raise

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(len(xs))))
    else:
        results = [one(i) for i in range(len(xs))]
    models = [m for m, _ in results]
    if with_reports:
        return models, [r for _, r in results]
    return models
