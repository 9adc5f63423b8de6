"""Acceptance criteria, one test each.

Every test appends a ``criterion N: PASS|FAIL ...`` line that pytest prints
in its terminal summary. Run standalone with ``python3 tests/test_acceptance.py``.
"""
import functools
import struct
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from oracles import loop_inner, qp_dual  # noqa: E402

from dusk import cli, dataio  # noqa: E402
from dusk.bench import run_bench  # noqa: E402
from dusk.cp import CpModel, CpOptions, cp_als, reconstruct  # noqa: E402
from dusk.errors import (  # noqa: E402
    FormatError,
    LabelError,
    MagicError,
    NonFinitePayloadError,
    TruncationError,
    VersionError,
)
from dusk.kernels import KernelSpec, dusk, gram  # noqa: E402
from dusk.modelsel import GridConfig, KernelBank, grid_search, repeated_holdout  # noqa: E402
from dusk.svm import TrainConfig, dual_objective, kkt_violations, train  # noqa: E402
from dusk.tensor import inner_product  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def random_cp(rng, shape, rank):
    return CpModel(tuple(rng.standard_normal((d, rank)) for d in shape))


def test_c1_exact_cp_linear_identity():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        rank = int(rng.integers(1, 4))
        shape = tuple(int(d) for d in rng.integers(1, [9, 10, 11]))
        x, y = random_cp(rng, shape, rank), random_cp(rng, shape, rank)
        got = dusk(KernelSpec.linear(), x, y)
        want = loop_inner(reconstruct(x).array, reconstruct(y).array)
        worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-10 and secs < 5
    record(1, ok, f"max rel err {worst:.2e} (<= 1e-10), {secs:.2f} s (< 5 s)")
    assert ok


def test_c2_psd_gram():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = -np.inf
    for d in range(20):
        rank = d % 5 + 1
        shape = tuple(int(v) for v in rng.integers(3, 7, size=3))
        xs = rng.random((30,) + shape)
        models = [cp_als(x, rank, CpOptions(seed=d * 100 + i, max_iter=50))[0] for i, x in enumerate(xs)]
        for sigma in (0.25, 1.0, 4.0):
            lo, hi = gram(KernelSpec.rbf(sigma), models).min_max_eig()
            worst = max(worst, -lo / hi)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 30
    record(2, ok, f"max -min_eig/max_eig {worst:.2e} (<= 1e-8), {secs:.2f} s (< 30 s)")
    assert ok


def test_c3_vector_degeneration():
    rng = np.random.default_rng(3)
    worst = 0.0
    for sigma in (0.1, 1.0, 3.0):
        x = rng.standard_normal((25, 7))
        models = [CpModel((v[:, None],)) for v in x]
        k = gram(KernelSpec.rbf(sigma), models).entries
        for i in range(len(x)):
            for j in range(len(x)):
                want = np.exp(-sigma * sum((a - b) ** 2 for a, b in zip(x[i], x[j])))
                worst = max(worst, abs(k[i, j] - want) / want)
    ok = worst <= 1e-12
    record(3, ok, f"max rel err {worst:.2e} (<= 1e-12)")
    assert ok


def test_c4_smo_vs_qp_oracle():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    obj_gap = kkt = balance = 0.0
    for p in range(25):
        m = int(rng.integers(4, 13))
        y = np.where(rng.permutation(m) % 2 == 0, 1, -1)
        models = [random_cp(rng, (3, 4), 2) for _ in range(m)]
        spec = KernelSpec.linear() if p % 2 else KernelSpec.rbf(float(rng.choice([0.05, 0.2, 1.0])))
        k = gram(spec, models).entries
        C = float(2.0 ** rng.integers(-3, 8))
        model = train(k, y, TrainConfig(C=C))
        _, oracle = qp_dual(k, y, C)
        obj_gap = max(obj_gap, abs(dual_objective(k, y, model.alphas) - oracle))
        kkt = max(kkt, kkt_violations(k, y, model.alphas, model.bias, C).max())
        balance = max(balance, abs(float(model.alphas @ y)))
    secs = time.perf_counter() - t0
    ok = obj_gap <= 1e-4 and kkt <= 1e-3 and balance <= 1e-9 and secs < 20
    record(
        4, ok,
        f"dual gap {obj_gap:.2e} (<= 1e-4), max KKT {kkt:.2e} (<= 1e-3), "
        f"|sum a*y| {balance:.1e} (<= 1e-9), {secs:.2f} s (< 20 s)",
    )
    assert ok


def test_c5_rank_one_recovery():
    rng = np.random.default_rng(5)
    worst_fit, worst_iter, worst_drop = 1.0, 0, 0.0
    for s in range(20):
        order = int(rng.integers(2, 5)) if s % 2 else 3
        shape = tuple(int(d) for d in rng.integers(1, 21, size=order))
        vecs = [rng.standard_normal(d) for d in shape]
        x = functools.reduce(np.multiply.outer, vecs)
        _, rep = cp_als(x, 1, CpOptions(seed=s))
        hist = np.array(rep.fit_history)
        worst_fit = min(worst_fit, rep.final_fit)
        worst_iter = max(worst_iter, rep.iterations)
        if len(hist) > 1:
            worst_drop = max(worst_drop, float(np.max(hist[:-1] - hist[1:])))
    ok = worst_fit >= 1 - 1e-8 and worst_iter <= 50 and worst_drop <= 1e-10
    record(
        5, ok,
        f"min fit 1-{1 - worst_fit:.1e} (>= 1-1e-8), max iterations {worst_iter} (<= 50), "
        f"max fit decrease {worst_drop:.1e} (<= 1e-10)",
    )
    assert ok


SEEDS = range(20)
C6_REPEATS = 5


@functools.lru_cache(maxsize=None)
def _bank(seed):
    ds = dataio.synth_lowrank((10, 10, 10), 2, 20, 0.1, seed=seed)
    return ds, KernelBank(ds.data, "rbf", "dusk", CpOptions(seed=seed))


def test_c6_dusk_vs_vector_rbf():
    grid = GridConfig.fast()
    t0 = time.perf_counter()
    dusk_acc, vec_acc = [], []
    for seed in SEEDS:
        ds, bank = _bank(seed)
        rep = repeated_holdout(ds.data, ds.labels, grid, repeats=C6_REPEATS, seed=seed, bank=bank)
        dusk_acc.append(rep.mean)
        rep = repeated_holdout(ds.data, ds.labels, grid, repeats=C6_REPEATS, seed=seed, method="vector")
        vec_acc.append(rep.mean)
    secs = time.perf_counter() - t0
    d, v = float(np.mean(dusk_acc)), float(np.mean(vec_acc))
    ok = d >= v and secs < 600
    record(
        6, ok,
        f"DuSK-RBF mean {d:.4f} >= vector RBF mean {v:.4f} over {len(SEEDS)} seeds, {secs:.0f} s (< 600 s)",
    )
    assert ok


def test_c7_rank_curve_peak():
    grid = GridConfig.fast(rank_grid=tuple(range(1, 13)))
    peaks = []
    for seed in SEEDS:
        ds, bank = _bank(seed)
        bank.prepare(grid.rank_grid)
        peaks.append(grid_search(bank, ds.labels, grid).peak_rank())
    hits = sum(1 <= p <= 6 for p in peaks)
    ok = hits >= 15
    record(7, ok, f"curve peaks at R in 1..6 for {hits}/20 seeds (>= 15); peaks {peaks}")
    assert ok


def test_c8_complexity_trend():
    res = run_bench(compare_gram=True)
    ok = 1.5 <= res.rank_slope <= 2.5 and 0.5 <= res.size_slope <= 1.5
    grams = ", ".join(f"{n} {t:.4f} s" for n, t in res.gram_rows)
    record(
        8, ok,
        f"slope time~R {res.rank_slope:.2f} (in [1.5, 2.5]), time~sum(I_n) {res.size_slope:.2f} "
        f"(in [0.5, 1.5]); gram {grams}",
    )
    assert ok


def test_c9_evaluate_determinism(tmp_path, capsys):
    data = tmp_path / "d.dten"
    assert cli.run(["synth", "--shape", "10x10x10", "--rank", "2", "--m", "40", "--seed", "7", "-o", str(data)]) == 0
    capsys.readouterr()
    outs, stdouts = [], []
    for i, threads in enumerate((1, 1, 3)):
        out = tmp_path / f"e{i}.csv"
        code = cli.run(
            ["evaluate", str(data), "--fast", "--repeats", "5", "--seed", "7",
             "--threads", str(threads), "-o", str(out)]
        )
        assert code == 0
        outs.append(out.read_bytes())
        stdouts.append(capsys.readouterr().out)
    ok = outs[0] == outs[1] == outs[2] and stdouts[0] == stdouts[1] == stdouts[2]
    record(9, ok, "evaluate CSV and stdout byte-identical across runs and --threads 1/3")
    assert ok


MALFORMED = {
    "bad_magic.dten": MagicError,
    "bad_version.dten": VersionError,
    "truncated_header.dten": TruncationError,
    "truncated_payload.dten": TruncationError,
    "trailing_bytes.dten": FormatError,
    "label_zero.dten": LabelError,
    "nan_payload.dten": NonFinitePayloadError,
    "inf_payload.dten": NonFinitePayloadError,
    "zero_dim.dten": FormatError,
    "text_bad_label.txt": LabelError,
    "text_short.txt": TruncationError,
    "text_nan.txt": NonFinitePayloadError,
    "text_bad_version.txt": VersionError,
    "text_wrong_count.txt": FormatError,
}


def test_c10_io_roundtrip_and_fixtures(tmp_path):
    rng = np.random.default_rng(10)
    ds = dataio.TensorDataset(rng.standard_normal((100, 4, 5, 3)), np.where(rng.random(100) < 0.5, 1, -1))
    path = tmp_path / "rt.dten"
    dataio.save_dataset(ds, path)
    back = dataio.load_dataset(path)
    same_hash = back.content_hash == ds.content_hash and np.array_equal(back.data, ds.data)
    wrong = []
    for name, err in MALFORMED.items():
        try:
            dataio.load_dataset(FIXTURES / name)
            wrong.append(f"{name}: no error")
        except err:
            pass
        except Exception as e:  # noqa: BLE001
            wrong.append(f"{name}: {type(e).__name__}")
    ok = same_hash and not wrong
    record(
        10, ok,
        f"round-trip hash {'equal' if same_hash else 'DIFFERS'}; "
        f"{len(MALFORMED) - len(wrong)}/{len(MALFORMED)} malformed fixtures raise their error"
        + (f" ({'; '.join(wrong)})" if wrong else ""),
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
