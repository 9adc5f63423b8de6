"""Timing of DuSK evaluations against rank and total mode length."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cp import CpModel
from .kernels import KernelSpec, dense_rbf_gram, dusk, gram


def _random_model(rng, shape, rank) -> CpModel:
    return CpModel(tuple(rng.standard_normal((d, rank)) / np.sqrt(d) for d in shape))


def time_dusk(shape, rank, spec: KernelSpec, repeats: int = 7, seed: int = 0) -> float:
    """Median wall time in seconds of one DuSK evaluation."""
    rng = np.random.default_rng(seed)
    x, y = _random_model(rng, shape, rank), _random_model(rng, shape, rank)
    dusk(spec, x, y)
    # batch calls so each timing is well above timer resolution
    t0 = time.perf_counter()
    dusk(spec, x, y)
    single = time.perf_counter() - t0
    inner = max(1, int(2e-3 / max(single, 1e-9)))
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            dusk(spec, x, y)
        samples.append((time.perf_counter() - t0) / inner)
    return float(np.median(samples))


def loglog_slope(xs, ts) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ts, float)), 1)[0])


@dataclass
class BenchResult:
    rank_rows: list
    size_rows: list
    rank_slope: float
    size_slope: float
    gram_rows: list

    def to_csv(self) -> str:
        lines = ["sweep,rank,sum_dims,seconds"]
        for r, s, t in self.rank_rows:
            lines.append(f"rank,{r},{s},{t:.6e}")
        for r, s, t in self.size_rows:
            lines.append(f"size,{r},{s},{t:.6e}")
        return "\n".join(lines) + "\n"

    def report(self) -> str:
        out = [self.to_csv().rstrip("\n")]
        out.append(f"slope time~R: {self.rank_slope:.2f}")
        out.append(f"slope time~sum(I_n): {self.size_slope:.2f}")
        for name, secs in self.gram_rows:
            out.append(f"gram {name}: {secs:.4f} s")
        return "\n".join(out)


def gram_comparison(shape=(20, 20, 20), rank=3, m=50, sigma=1.0, seed=0, repeats=3):
    """Wall time of a DuSK Gram and a vectorized RBF Gram on the same data size."""
    rng = np.random.default_rng(seed)
    models = [_random_model(rng, shape, rank) for _ in range(m)]
    dense = rng.standard_normal((m,) + tuple(shape))
    spec = KernelSpec.rbf(sigma)

    def best(fn):
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
        return min(ts)

    return [
        ("dusk", best(lambda: gram(spec, models))),
        ("vector-rbf", best(lambda: dense_rbf_gram(dense, sigma))),
    ]


def run_bench(
    ranks=(16, 32, 64, 128),
    rank_shape=(256, 256, 256),
    dims=(64, 128, 256, 512, 1024),
    size_rank=32,
    order=3,
    spec: KernelSpec | None = None,
    repeats: int = 7,
    seed: int = 0,
    compare_gram: bool = True,
) -> BenchResult:
    """Sweep rank at a fixed shape and mode length at a fixed rank."""
    spec = spec or KernelSpec.rbf(1.0)
    rank_rows = [
        (r, sum(rank_shape), time_dusk(rank_shape, r, spec, repeats, seed)) for r in ranks
    ]
    size_rows = []
    for d in dims:
        shape = (d,) * order
        size_rows.append((size_rank, sum(shape), time_dusk(shape, size_rank, spec, repeats, seed)))
    return BenchResult(
        rank_rows=rank_rows,
        size_rows=size_rows,
        rank_slope=loglog_slope([r for r, _, _ in rank_rows], [t for _, _, t in rank_rows]),
        size_slope=loglog_slope([s for _, s, _ in size_rows], [t for _, _, t in size_rows]),
        gram_rows=gram_comparison(seed=seed) if compare_gram else [],
    )
