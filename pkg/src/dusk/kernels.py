"""Constituent vector kernels, the DuSK kernel over CP models, Gram assembly.

The Gaussian constituent is ``exp(-sigma * ||u - v||**2)``: ``sigma`` is a
precision-like width (larger means narrower), not the ``2 s**2`` denominator
of the other common convention.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cp import CpModel
from .errors import ArgumentError, NumericalError, RankError, ShapeError

# elements per temporary difference block
_BLOCK = 1 << 22


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    sigma: float | None = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ArgumentError(f"unknown constituent kernel {self.kind!r}")
        if self.kind == "rbf":
            if self.sigma is None or not np.isfinite(self.sigma) or self.sigma <= 0:
                raise ArgumentError(f"rbf kernel needs a finite sigma > 0, got {self.sigma!r}")
        else:
            object.__setattr__(self, "sigma", None)

    @classmethod
    def linear(cls):
        return cls("linear", None)

    @classmethod
    def rbf(cls, sigma: float):
        return cls("rbf", float(sigma))

    def __str__(self):
        return "linear" if self.kind == "linear" else f"rbf(sigma={self.sigma:g})"


@dataclass(eq=False)
class GramMatrix:
    entries: np.ndarray
    spec: KernelSpec
    rank: int
    dataset_hash: str | None = None

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def min_max_eig(self) -> tuple[float, float]:
        w = np.linalg.eigvalsh(self.entries)
        return float(w[0]), float(w[-1])

    def check_psd(self, rel_tol: float = 1e-8) -> None:
        lo, hi = self.min_max_eig()
        if lo < -rel_tol * max(hi, 0.0):
            raise NumericalError(f"Gram matrix is not PSD: min eig {lo:.3e}, max eig {hi:.3e}")


def vector_kernel(spec: KernelSpec, u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"vector length mismatch {u.size} vs {v.size}")
    if spec.kind == "linear":
        return float(np.dot(u, v))
    d = u - v
    return float(np.exp(-spec.sigma * np.dot(d, d)))


def _check_pair(x: CpModel, y: CpModel) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"CP model shapes differ: {x.shape} vs {y.shape}")
    if x.rank != y.rank:
        raise RankError(f"CP model ranks differ: {x.rank} vs {y.rank}")


def naive_rank_one_kernel(spec: KernelSpec, x: CpModel, y: CpModel) -> float:
    """Product over modes of the constituent kernel, for rank-one models."""
    if x.rank != 1 or y.rank != 1:
        raise RankError(f"naive kernel needs rank-1 models, got {x.rank} and {y.rank}")
    if x.shape != y.shape:
        raise ShapeError(f"CP model shapes differ: {x.shape} vs {y.shape}")
    out = 1.0
    for a, b in zip(x.factors, y.factors):
        out *= vector_kernel(spec, a[:, 0], b[:, 0])
    return out


def component_table(kind: str, x: CpModel, y: CpModel) -> np.ndarray:
    """``R x R`` table over component pairs ``(i, j)``.

    ``linear``: product over modes of ``<x_i, y_j>``.
    ``rbf``: sum over modes of ``||x_i - y_j||**2``.
    """
    _check_pair(x, y)
    if kind == "linear":
        out = np.ones((x.rank, y.rank))
        for a, b in zip(x.factors, y.factors):
            # reduce in a fixed order so swapping x and y gives the exact transpose
            out *= (a[:, :, None] * b[:, None, :]).sum(axis=0)
        return out
    out = np.zeros((x.rank, y.rank))
    for a, b in zip(x.factors, y.factors):
        d = a[:, :, None] - b[:, None, :]
        out += np.einsum("kij,kij->ij", d, d)
    return out


def dusk(spec: KernelSpec, x: CpModel, y: CpModel) -> float:
    """DuSK value between two CP models of equal shape and rank.

    Sum over all component pairs of the product of per-mode constituent
    kernels; for the Gaussian constituent the product is taken as a single
    exponential of the summed squared distances.
    """
    t = component_table(spec.kind, x, y)
    if spec.kind == "rbf":
        t = np.exp(-spec.sigma * t)
    # correctly rounded, hence symmetric in x and y
    return math.fsum(t.ravel().tolist())


def _stack(models: Sequence[CpModel]) -> list[np.ndarray]:
    """Per-mode stacks of shape ``(M, I_n, R)``."""
    return [np.stack([m.factors[n] for m in models]) for n in range(models[0].order)]


def _check_models(models: Sequence[CpModel], what: str) -> None:
    if len(models) == 0:
        raise ArgumentError(f"{what}: empty model list")
    first = models[0]
    for i, m in enumerate(models):
        if m.shape != first.shape:
            raise ShapeError(f"{what}: model {i} has shape {m.shape}, expected {first.shape}")
        if m.rank != first.rank:
            raise RankError(f"{what}: model {i} has rank {m.rank}, expected {first.rank}")


def _row_tables(kind: str, row: list[np.ndarray], cols: list[np.ndarray]) -> np.ndarray:
    """Component tables of one model against a stack; returns ``(m, R, R)``."""
    m = cols[0].shape[0]
    rank = row[0].shape[1]
    per_col = max(1, sum(c.shape[1] for c in cols) * rank * rank)
    step = max(1, _BLOCK // per_col)
    out = np.empty((m, rank, rank))
    for lo in range(0, m, step):
        hi = min(m, lo + step)
        if kind == "linear":
            acc = np.ones((hi - lo, rank, rank))
            for a, b in zip(row, cols):
                acc *= np.einsum("ki,bkj->bij", a, b[lo:hi])
        else:
            acc = np.zeros((hi - lo, rank, rank))
            for a, b in zip(row, cols):
                d = a[None, :, :, None] - b[lo:hi, :, None, :]
                acc += np.einsum("bkij,bkij->bij", d, d)
        out[lo:hi] = acc
    return out


def pair_tables(
    kind: str,
    models: Sequence[CpModel],
    others: Sequence[CpModel] | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Component tables for all pairs, shape ``(M_a, M_b, R, R)``.

    With ``others`` omitted the tables are computed for ``i <= j`` only and
    mirrored, so ``T[j, i] == T[i, j].T`` exactly.
    """
    _check_models(models, "pair_tables")
    sym = others is None
    if sym:
        others = models
    else:
        _check_models(others, "pair_tables")
        _check_pair(models[0], others[0])
    a_stack, b_stack = _stack(models), _stack(others)
    ma, mb, rank = len(models), len(others), models[0].rank
    out = np.empty((ma, mb, rank, rank))

    def row(i):
        lo = i if sym else 0
        out[i, lo:] = _row_tables(kind, [s[i] for s in a_stack], [s[lo:] for s in b_stack])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(row, range(ma)))
    else:
        for i in range(ma):
            row(i)
    if sym:
        iu, ju = np.triu_indices(ma, 1)
        out[ju, iu] = np.swapaxes(out[iu, ju], -1, -2)
    return out


def kernel_from_tables(spec: KernelSpec, tables: np.ndarray, symmetric: bool = False) -> np.ndarray:
    """Collapse component tables into kernel values."""
    if spec.kind == "linear":
        k = tables.sum(axis=(-2, -1))
    else:
        k = np.exp(-spec.sigma * tables).sum(axis=(-2, -1))
    if symmetric:
        k = np.triu(k) + np.triu(k, 1).T
    return k


def gram(
    spec: KernelSpec,
    models: Sequence[CpModel],
    threads: int = 1,
    dataset_hash: str | None = None,
) -> GramMatrix:
    """Symmetric DuSK Gram matrix over ``models``."""
    tables = pair_tables(spec.kind, models, threads=threads)
    return GramMatrix(
        kernel_from_tables(spec, tables, symmetric=True), spec, models[0].rank, dataset_hash
    )


def gram_cross(
    spec: KernelSpec, train: Sequence[CpModel], test: Sequence[CpModel], threads: int = 1
) -> np.ndarray:
    """``(len(test), len(train))`` matrix of DuSK values ``k(test[t], train[i])``."""
    if len(test) == 0:
        _check_models(train, "gram_cross")
        return np.zeros((0, len(train)))
    return kernel_from_tables(spec, pair_tables(spec.kind, test, train, threads=threads))


def dense_sqdist(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Pairwise squared Euclidean distances between flattened instances.

    Differences are formed explicitly, so ``y is None`` gives an exactly
    symmetric matrix with a zero diagonal.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    sym = y is None
    y = x if sym else np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature length mismatch {x.shape[1]} vs {y.shape[1]}")
    out = np.zeros((len(x), len(y)))
    step = max(1, _BLOCK // max(1, x.shape[1]))
    for i in range(len(x)):
        lo = i + 1 if sym else 0
        for s in range(lo, len(y), step):
            d = y[s:s + step] - x[i]
            out[i, s:s + step] = np.einsum("bk,bk->b", d, d)
    if sym:
        out = np.triu(out, 1) + np.triu(out, 1).T
    return out


def dense_rbf_gram(x, sigma: float, y=None) -> np.ndarray:
    """Gaussian RBF kernel on flattened tensors (the vectorized baseline)."""
    return np.exp(-float(sigma) * dense_sqdist(x, y))
