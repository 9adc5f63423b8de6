"""Kernel SVM trained by sequential minimal optimization on a precomputed Gram."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .cp import CpModel
from .errors import ArgumentError, DegenerateInputError, NumericalError, ShapeError
from .kernels import GramMatrix, KernelSpec, gram_cross

_TAU = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    kkt_tol: float = 1e-3
    # consecutive passes (M updates each) without objective gain before
    # giving up; None means 10 * M
    max_passes: int | None = None

    def __post_init__(self):
        if not (np.isfinite(self.C) and self.C > 0):
            raise ArgumentError(f"C must be finite and > 0, got {self.C!r}")
        if not (np.isfinite(self.kkt_tol) and self.kkt_tol > 0):
            raise ArgumentError(f"kkt_tol must be finite and > 0, got {self.kkt_tol!r}")
        if self.max_passes is not None and self.max_passes < 1:
            raise ArgumentError("max_passes must be >= 1")


@dataclass(eq=False)
class SvmModel:
    alphas: np.ndarray
    labels: np.ndarray
    bias: float
    C: float
    spec: KernelSpec | None = None
    rank: int | None = None
    support_models: tuple = ()
    iterations: int = 0
    history: np.ndarray | None = field(default=None, repr=False)

    @property
    def support_indices(self) -> np.ndarray:
        return np.flatnonzero(self.alphas > 0)

    @property
    def coef(self) -> np.ndarray:
        """``alpha_i * y_i`` for every training instance."""
        return self.alphas * self.labels

    @property
    def support_coef(self) -> np.ndarray:
        return self.coef[self.support_indices]


def _as_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.all(np.isin(y, (-1, 1))):
        raise ArgumentError("labels must be a 1-D sequence of -1/+1")
    return y.astype(np.float64)


def dual_objective(gram, labels, alphas) -> float:
    """``sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij``."""
    k = gram.entries if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    ay = np.asarray(alphas, dtype=np.float64) * y
    return float(np.sum(alphas) - 0.5 * ay @ k @ ay)


def primal_objective(gram, labels, alphas, bias: float, C: float) -> float:
    """Hinge-loss primal value of the kernel expansion given by ``alphas``."""
    k = gram.entries if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    ay = np.asarray(alphas, dtype=np.float64) * y
    f = k @ ay + bias
    return float(0.5 * ay @ k @ ay + C * np.maximum(0.0, 1.0 - y * f).sum())


def kkt_violations(gram, labels, alphas, bias: float, C: float) -> np.ndarray:
    """Per-instance violation of the optimality conditions.

    Bound-at-zero needs ``y f >= 1``, bound-at-C needs ``y f <= 1`` and free
    multipliers need ``y f == 1``.
    """
    k = gram.entries if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    a = np.asarray(alphas, dtype=np.float64)
    margin = y * (k @ (a * y) + bias)
    viol = np.abs(margin - 1.0)
    at_zero, at_c = a <= 0, a >= C
    viol[at_zero] = np.maximum(0.0, 1.0 - margin[at_zero])
    viol[at_c] = np.maximum(0.0, margin[at_c] - 1.0)
    return viol


# hard cap on updates, in units of max_passes * M
_CAP_FACTOR = 1000


@njit(cache=True)
def _smo(k, y, C, tol, max_passes, cap, record):
    """Maximal-violating-pair SMO.

    Returns (alpha, grad, updates, status, trace) with status 0 converged,
    1 stalled for ``max_passes`` passes, 2 hit the update cap.
    ``trace[t]`` holds (dual objective, sum alpha*y, min alpha, max alpha)
    after update ``t`` when ``record`` is set.
    """
    m = y.shape[0]
    alpha = np.zeros(m)
    grad = -np.ones(m)
    trace = np.zeros((m if record else 0, 4))
    it = 0
    obj = 0.0
    pass_gain = 0.0
    stalled = 0
    while True:
        vmax = -np.inf
        vmin = np.inf
        i = -1
        j = -1
        for t in range(m):
            v = -y[t] * grad[t]
            if (alpha[t] < C and y[t] > 0) or (alpha[t] > 0 and y[t] < 0):
                if v > vmax:
                    vmax = v
                    i = t
            if (alpha[t] < C and y[t] < 0) or (alpha[t] > 0 and y[t] > 0):
                if v < vmin:
                    vmin = v
                    j = t
        if i < 0 or j < 0 or vmax - vmin <= tol:
            return alpha, grad, it, 0, trace[:it]
        if it >= cap:
            return alpha, grad, it, 2, trace[:it]
        if it > 0 and it % m == 0:
            if pass_gain <= 1e-12 * max(1.0, abs(obj)):
                stalled += 1
                if stalled >= max_passes:
                    return alpha, grad, it, 1, trace[:it]
            else:
                stalled = 0
            pass_gain = 0.0
        curv_true = k[i, i] + k[j, j] - 2.0 * k[i, j]
        curv = curv_true if curv_true > 0 else _TAU
        step = (vmax - vmin) / curv
        step = min(step, C - alpha[i] if y[i] > 0 else alpha[i])
        step = min(step, alpha[j] if y[j] > 0 else C - alpha[j])
        di = y[i] * step
        dj = -y[j] * step
        ai = alpha[i] + di
        aj = alpha[j] + dj
        # snap to the box so bound membership is exact
        alpha[i] = 0.0 if ai <= 0 else (C if ai >= C else ai)
        alpha[j] = 0.0 if aj <= 0 else (C if aj >= C else aj)
        gain = step * (vmax - vmin) - 0.5 * curv_true * step * step
        obj += gain
        pass_gain += gain
        for t in range(m):
            grad[t] += y[t] * (y[i] * k[t, i] * di + y[j] * k[t, j] * dj)
        if record:
            if it >= trace.shape[0]:
                grown = np.zeros((2 * trace.shape[0], 4))
                grown[:it] = trace
                trace = grown
            obj_check = 0.0
            bal = 0.0
            for t in range(m):
                obj_check += alpha[t] * (1.0 - grad[t])
                bal += alpha[t] * y[t]
            trace[it, 0] = 0.5 * obj_check
            trace[it, 1] = bal
            trace[it, 2] = alpha.min()
            trace[it, 3] = alpha.max()
        it += 1


def train(
    gram,
    labels: Sequence[int],
    cfg: TrainConfig | None = None,
    models: Sequence[CpModel] | None = None,
    check_psd: bool = True,
    record: bool = False,
) -> SvmModel:
    """Solve the SVM dual over a precomputed Gram matrix.

    Uses SMO with maximal-violating-pair selection; stops once the largest
    KKT violation gap drops below ``cfg.kkt_tol``.

    Parameters
    ----------
    gram : GramMatrix or array_like
        ``M x M`` kernel matrix.
    labels : sequence of {-1, +1}
    cfg : TrainConfig
    models : sequence of CpModel, optional
        Training representations; support vectors are retained on the model
        so it can score new instances on its own.
    check_psd : bool
        Refuse Gram matrices whose smallest eigenvalue is below
        ``-1e-8`` times the largest.
    record : bool
        Keep a per-update trace in ``model.history``: rows of
        (dual objective, sum alpha*y, min alpha, max alpha).

    Raises
    ------
    DegenerateInputError
        Only one class present.
    NumericalError
        Non-PSD Gram, ``max_passes`` consecutive passes without objective
        gain, or the hard update cap reached.
    """
    cfg = cfg or TrainConfig()
    if isinstance(gram, GramMatrix):
        spec, rank, k = gram.spec, gram.rank, gram.entries
    else:
        spec, rank, k = None, None, np.asarray(gram, dtype=np.float64)
    y = _as_labels(labels)
    m = len(y)
    if k.shape != (m, m):
        raise ShapeError(f"Gram shape {k.shape} does not match {m} labels")
    if models is not None and len(models) != m:
        raise ShapeError(f"{len(models)} models for {m} labels")
    if np.all(y > 0) or np.all(y < 0):
        raise DegenerateInputError("training labels contain a single class")
    if check_psd:
        w = np.linalg.eigvalsh(k)
        if w[0] < -1e-8 * max(w[-1], 0.0):
            raise NumericalError(f"Gram matrix is not PSD: min eig {w[0]:.3e}, max eig {w[-1]:.3e}")

    C = float(cfg.C)
    passes = cfg.max_passes if cfg.max_passes is not None else 10 * m
    cap = _CAP_FACTOR * passes * m
    alpha, grad, it, status, trace = _smo(
        np.ascontiguousarray(k), y, C, float(cfg.kkt_tol), passes, cap, record
    )
    if status == 1:
        raise NumericalError(
            f"SMO made no progress for {passes} passes (C={C:g}, tol={cfg.kkt_tol:g})"
        )
    if status == 2:
        raise NumericalError(f"SMO did not converge in {cap} updates (C={C:g}, tol={cfg.kkt_tol:g})")

    pos = y > 0
    v = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(v[free].mean())
    else:
        below_c, above_0 = alpha < C, alpha > 0
        up = (below_c & pos) | (above_0 & ~pos)
        low = (below_c & ~pos) | (above_0 & pos)
        lb = v[up].max() if up.any() else v[low].min()
        ub = v[low].min() if low.any() else v[up].max()
        bias = float(0.5 * (lb + ub))

    support = tuple(models[s] for s in np.flatnonzero(alpha > 0)) if models is not None else ()
    return SvmModel(
        alphas=alpha,
        labels=y.astype(np.int64),
        bias=bias,
        C=C,
        spec=spec,
        rank=rank,
        support_models=support,
        iterations=it,
        history=trace if record else None,
    )


def decision_values(model: SvmModel, cross) -> np.ndarray:
    """``sum_i alpha_i y_i cross[t, i] + b`` for each row ``t``."""
    cross = np.asarray(cross, dtype=np.float64)
    n = len(model.alphas)
    if cross.size == 0 and (cross.ndim < 2 or cross.shape[-1] in (0, n)):
        return np.zeros(0)
    if cross.ndim != 2 or cross.shape[1] != n:
        raise ShapeError(f"cross matrix {cross.shape} needs {n} columns")
    return cross @ model.coef + model.bias


def predict(model: SvmModel, cross) -> np.ndarray:
    """Class labels; a decision value of exactly 0 maps to +1."""
    return np.where(decision_values(model, cross) >= 0, 1, -1)


def decision_values_models(model: SvmModel, test: Sequence[CpModel], threads: int = 1) -> np.ndarray:
    """Score CP representations directly against the retained support vectors."""
    if model.spec is None or not model.support_models:
        raise ArgumentError("model carries no kernel spec or support representations")
    if len(test) == 0:
        return np.zeros(0)
    cross = gram_cross(model.spec, list(model.support_models), list(test), threads=threads)
    return cross @ model.support_coef + model.bias


def predict_models(model: SvmModel, test: Sequence[CpModel], threads: int = 1) -> np.ndarray:
    return np.where(decision_values_models(model, test, threads) >= 0, 1, -1)
