import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loop_dusk

from dusk.cp import CpModel, reconstruct
from dusk.errors import ArgumentError, NumericalError, RankError, ShapeError
from dusk.kernels import (
    GramMatrix,
    KernelSpec,
    dense_rbf_gram,
    dense_sqdist,
    dusk,
    gram,
    gram_cross,
    naive_rank_one_kernel,
    pair_tables,
    vector_kernel,
)
from dusk.tensor import inner_product

RBF = KernelSpec.rbf(1.0)
LIN = KernelSpec.linear()


def random_cp(rng, shape, rank):
    return CpModel(tuple(rng.standard_normal((d, rank)) for d in shape))


def test_kernel_spec_validation():
    assert KernelSpec("linear", 3.0).sigma is None
    for bad in (0.0, -1.0, np.inf, None):
        with pytest.raises(ArgumentError):
            KernelSpec("rbf", bad)
    with pytest.raises(ArgumentError):
        KernelSpec("poly")


def test_vector_kernel_examples():
    assert vector_kernel(RBF, [1.0, 2.0], [1.0, 2.0]) == 1.0
    assert vector_kernel(LIN, [1.0, 0.0], [0.0, 3.0]) == 0.0
    assert vector_kernel(KernelSpec.rbf(0.5), [0.0], [2.0]) == pytest.approx(np.exp(-2.0), rel=1e-15)
    with pytest.raises(ShapeError):
        vector_kernel(LIN, [1.0], [1.0, 2.0])


def test_naive_rank_one_kernel(rng):
    e = CpModel(tuple(np.eye(d)[:, :1] for d in (2, 3)))
    assert naive_rank_one_kernel(LIN, e, e) == 1.0
    x, y = random_cp(rng, (3, 4, 2), 1), random_cp(rng, (3, 4, 2), 1)
    assert naive_rank_one_kernel(RBF, x, x) == 1.0
    want = inner_product(reconstruct(x), reconstruct(y))
    assert naive_rank_one_kernel(LIN, x, y) == pytest.approx(want, rel=1e-12)
    assert dusk(LIN, x, y) == pytest.approx(want, rel=1e-12)
    with pytest.raises(RankError):
        naive_rank_one_kernel(LIN, random_cp(rng, (3,), 2), random_cp(rng, (3,), 2))


def test_dusk_examples(rng):
    x = random_cp(rng, (3, 4), 1)
    assert dusk(RBF, x, x) == 1.0
    # one mode of length one: columns (1),(2) against (1),(3)
    a = CpModel((np.array([[1.0, 2.0]]),))
    b = CpModel((np.array([[1.0, 3.0]]),))
    want = np.exp(0) + np.exp(-4) + np.exp(-1) + np.exp(-1)
    assert dusk(RBF, a, b) == pytest.approx(want, rel=1e-15)


def test_dusk_matches_loop_oracle(rng):
    for kind, spec in (("linear", LIN), ("rbf", KernelSpec.rbf(0.3))):
        x, y = random_cp(rng, (3, 2, 4), 3), random_cp(rng, (3, 2, 4), 3)
        want = loop_dusk(kind, spec.sigma, x.factors, y.factors)
        assert dusk(spec, x, y) == pytest.approx(want, rel=1e-12)
        assert dusk(spec, x, y) == dusk(spec, y, x)


def test_dusk_errors(rng):
    with pytest.raises(ShapeError):
        dusk(RBF, random_cp(rng, (3, 4), 2), random_cp(rng, (4, 3), 2))
    with pytest.raises(RankError):
        dusk(RBF, random_cp(rng, (3, 4), 2), random_cp(rng, (3, 4), 1))


def test_gram_examples(rng):
    one = random_cp(rng, (3, 3), 4)
    g = gram(RBF, [one])
    assert g.entries.shape == (1, 1) and g.entries[0, 0] >= 4
    models = [random_cp(rng, (4, 3), 3) for _ in range(5)]
    models[3] = models[1]
    k = gram(RBF, models).entries
    np.testing.assert_array_equal(k[1], k[3])
    assert np.array_equal(k, k.T)
    assert np.all(np.diag(k) >= 3)
    big = [random_cp(rng, (5, 4, 3), 3) for _ in range(20)]
    lo, hi = gram(RBF, big).min_max_eig()
    assert lo >= -1e-8 * hi


def test_gram_errors(rng):
    with pytest.raises(ArgumentError):
        gram(RBF, [])
    with pytest.raises(ShapeError):
        gram(RBF, [random_cp(rng, (3, 3), 1), random_cp(rng, (3, 4), 1)])
    with pytest.raises(RankError):
        gram(RBF, [random_cp(rng, (3, 3), 1), random_cp(rng, (3, 3), 2)])


def test_gram_entries_pointwise(rng):
    models = [random_cp(rng, (3, 5), 2) for _ in range(6)]
    for spec in (LIN, KernelSpec.rbf(0.7)):
        k = gram(spec, models, threads=2).entries
        for i in range(6):
            for j in range(6):
                assert k[i, j] == pytest.approx(dusk(spec, models[i], models[j]), rel=1e-12)
        np.testing.assert_array_equal(k, gram(spec, models).entries)


def test_gram_cross_examples(rng):
    train = [random_cp(rng, (3, 4), 2) for _ in range(5)]
    test = [random_cp(rng, (3, 4), 2) for _ in range(3)]
    np.testing.assert_allclose(gram_cross(RBF, train, train), gram(RBF, train).entries, rtol=1e-14)
    assert gram_cross(RBF, train, [train[0]])[0, 0] >= 2
    cross = gram_cross(RBF, train, test)
    assert cross.shape == (3, 5)
    for t in range(3):
        for i in range(5):
            assert cross[t, i] == pytest.approx(dusk(RBF, test[t], train[i]), rel=1e-12)


def test_pair_tables_shape(rng):
    models = [random_cp(rng, (3, 2), 2) for _ in range(4)]
    assert pair_tables("rbf", models).shape == (4, 4, 2, 2)
    assert pair_tables("linear", models, models[:3]).shape == (4, 3, 2, 2)


def test_vector_degeneration(rng):
    x = rng.standard_normal((12, 6))
    models = [CpModel((v[:, None],)) for v in x]
    for sigma in (0.2, 2.0):
        k = gram(KernelSpec.rbf(sigma), models).entries
        np.testing.assert_allclose(k, dense_rbf_gram(x, sigma), rtol=1e-12)


def test_dense_helpers(rng):
    x = rng.standard_normal((5, 2, 3))
    d = dense_sqdist(x)
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)
    assert d[1, 2] == pytest.approx(((x[1] - x[2]) ** 2).sum(), rel=1e-14)
    y = rng.standard_normal((2, 2, 3))
    assert dense_rbf_gram(x, 0.5, y).shape == (5, 2)


def test_gram_matrix_psd_check():
    g = GramMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]), RBF, 1)
    with pytest.raises(NumericalError):
        g.check_psd()
    GramMatrix(np.eye(2), RBF, 1).check_psd()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.floats(0.05, 5.0), st.integers(0, 2**31))
def test_rbf_gram_always_psd(rank, order, sigma, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(d) for d in rng.integers(1, 5, size=order))
    models = [random_cp(rng, shape, rank) for _ in range(8)]
    g = gram(KernelSpec.rbf(sigma), models)
    lo, hi = g.min_max_eig()
    assert lo >= -1e-8 * hi
    assert np.all(np.diag(g.entries) >= rank - 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31))
def test_exact_cp_linear_identity(rank, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(d) for d in rng.integers(1, 6, size=3))
    x, y = random_cp(rng, shape, rank), random_cp(rng, shape, rank)
    want = inner_product(reconstruct(x), reconstruct(y))
    bound = sum(
        np.prod([np.abs(a[:, i]) @ np.abs(b[:, j]) for a, b in zip(x.factors, y.factors)])
        for i in range(rank) for j in range(rank)
    )
    assert abs(dusk(LIN, x, y) - want) <= 1e-10 * bound
