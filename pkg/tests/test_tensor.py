import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from oracles import loop_inner, loop_outer

from dusk.errors import ArgumentError, NonFiniteError, ShapeError
from dusk.tensor import (
    DenseTensor,
    FactorVector,
    inner_product,
    norm,
    rank_one_inner,
    refold,
    tensor_product,
    unfold,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_dense_tensor_invariants():
    t = DenseTensor(np.arange(6.0), shape=(2, 3))
    assert t.shape == (2, 3) and t.order == 2
    assert t.values.tolist() == list(range(6))
    with pytest.raises(ValueError):
        t.array[0, 0] = 1.0
    with pytest.raises(NonFiniteError):
        DenseTensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        DenseTensor([np.inf])
    assert DenseTensor(np.ones((2, 2))) == DenseTensor(np.ones((2, 2)))
    assert hash(DenseTensor(np.ones(3))) == hash(DenseTensor(np.ones(3)))


def test_factor_vector_rejects_empty_and_nan():
    with pytest.raises(ArgumentError):
        FactorVector(0, [])
    with pytest.raises(NonFiniteError):
        FactorVector(0, [np.nan])


def test_inner_product_examples(rng):
    ones = np.ones((2, 2, 2))
    assert inner_product(ones, ones) == 8.0
    a = rng.standard_normal((3, 4, 2))
    assert inner_product(a, np.zeros_like(a)) == 0.0
    b = rng.standard_normal((3, 4, 2))
    assert inner_product(a, b) == pytest.approx(loop_inner(a, b), rel=1e-12)
    assert inner_product(a, b) == inner_product(b, a)
    with pytest.raises(ShapeError):
        inner_product(a, b[:2])


def test_norm_examples(rng):
    assert norm(np.zeros((2, 3))) == 0.0
    assert norm(np.ones((2, 2, 2))) == pytest.approx(np.sqrt(8))
    a = rng.standard_normal((3, 2, 5))
    assert norm(a) == pytest.approx(np.sqrt(loop_inner(a, a)), rel=1e-12)


def test_tensor_product_examples(rng):
    assert tensor_product([[1, 2], [3, 4]]).array.tolist() == [[3, 4], [6, 8]]
    e1 = [1.0, 0.0]
    t = tensor_product([e1, e1, e1]).array
    assert t[0, 0, 0] == 1.0 and t.sum() == 1.0
    vecs = [rng.standard_normal(d) for d in (3, 4, 2)]
    np.testing.assert_allclose(tensor_product(vecs).array, loop_outer(vecs), rtol=1e-14)
    fv = [FactorVector(n, v) for n, v in enumerate(vecs)]
    np.testing.assert_array_equal(tensor_product(fv).array, tensor_product(vecs).array)
    with pytest.raises(ArgumentError):
        tensor_product([])


def test_rank_one_inner_examples(rng):
    units = [np.eye(d)[0] for d in (3, 4, 5)]
    assert rank_one_inner(units, units) == 1.0
    other = [units[0], np.eye(4)[1], units[2]]
    assert rank_one_inner(units, other) == 0.0
    x = [rng.standard_normal(d) for d in (3, 4, 5)]
    y = [rng.standard_normal(d) for d in (3, 4, 5)]
    want = inner_product(tensor_product(x), tensor_product(y))
    assert rank_one_inner(x, y) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ShapeError):
        rank_one_inner(x, y[:2])
    with pytest.raises(ShapeError):
        rank_one_inner(x, [y[0], y[1], y[2][:3]])


def test_unfold_examples():
    m = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(unfold(m, 0), m)
    a = np.arange(24.0).reshape(2, 3, 4)
    assert unfold(a, 1).shape == (3, 8)
    # columns follow row-major order of the remaining modes
    assert unfold(a, 1)[:, 1].tolist() == a[0, :, 1].tolist()
    assert unfold(a, 1)[:, 4].tolist() == a[1, :, 0].tolist()
    with pytest.raises(ArgumentError):
        unfold(a, 3)
    with pytest.raises(ArgumentError):
        unfold(a, -1)
    with pytest.raises(ShapeError):
        refold(np.zeros((3, 7)), 1, (2, 3, 4))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=5, max_side=4), elements=finite))
def test_unfold_refold_round_trip(a):
    for n in range(a.ndim):
        back = refold(unfold(a, n), n, a.shape)
        assert back.shape == a.shape
        assert np.array_equal(back, a)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_bilinearity_and_cauchy_schwarz(data):
    shape = data.draw(array_shapes(min_dims=1, max_dims=4, max_side=4))
    a, b, c = (data.draw(arrays(np.float64, shape, elements=finite)) for _ in range(3))
    alpha, beta = data.draw(finite), data.draw(finite)
    lhs = inner_product(alpha * a + beta * b, c)
    rhs = alpha * inner_product(a, c) + beta * inner_product(b, c)
    scale = (abs(alpha) * norm(a) + abs(beta) * norm(b)) * norm(c)
    assert abs(lhs - rhs) <= 1e-10 * max(scale, 1e-300)
    assert abs(inner_product(a, b)) <= norm(a) * norm(b) * (1 + 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_rank_one_identity(data):
    dims = data.draw(st.lists(st.integers(1, 5), min_size=1, max_size=4))
    x = [data.draw(arrays(np.float64, d, elements=st.floats(-10, 10))) for d in dims]
    y = [data.draw(arrays(np.float64, d, elements=st.floats(-10, 10))) for d in dims]
    want = inner_product(tensor_product(x), tensor_product(y))
    got = rank_one_inner(x, y)
    # l1 norms bound every partial sum and cannot underflow by squaring
    bound = np.prod([np.abs(u).sum() * np.abs(v).sum() for u, v in zip(x, y)])
    assert abs(got - want) <= 1e-10 * bound + 1e-300
