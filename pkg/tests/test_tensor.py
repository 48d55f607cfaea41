import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssvae import tensor as T
from ssvae.tensor import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    checked,
    detach,
    finite_difference_check,
    precision,
)
from ssvae.verify import _primitive_cases


def grad_of(f, *xs):
    leaves = [Tensor(x, requires_grad=True, dtype=np.float64) for x in xs]
    with Tape() as tape:
        out = f(*leaves)
    g = tape.backward(out)
    return out, [g.array(t) for t in leaves]


def test_square_gradient():
    _, (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == pytest.approx(6.0)


def test_softplus_gradient_at_zero():
    _, (g,) = grad_of(T.softplus, 0.0)
    assert g == pytest.approx(0.5)


def test_detach_blocks_gradient():
    _, (g,) = grad_of(lambda x: detach(x) * x, 2.0)
    assert g == pytest.approx(2.0)


def test_detach_shares_values():
    x = Tensor(np.arange(4.0), requires_grad=True)
    d = detach(x)
    assert d.data is x.data
    assert d.node is None and not d.requires_grad


def test_fd_polynomial_is_exact():
    res = finite_difference_check(lambda x: x * x, Tensor(3.0), eps=1e-5)
    assert res.max_error < 1e-6


def test_composite_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))

    def f(x, w):
        h = T.tanh(x @ w)
        return T.sum_(T.log_softmax(h * T.sigmoid(x @ w) + T.exp(h)))

    assert finite_difference_check(f, [Tensor(a), Tensor(b)]).max_error < 1e-4


@pytest.mark.parametrize("kind", list(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients_at_ten_points(kind):
    worst = 0.0
    for seed in range(10):
        fn, point = _primitive_cases(np.random.default_rng(seed))[kind]
        res = finite_difference_check(fn, [Tensor(p, dtype=np.float64) for p in point])
        assert not res.nonfinite
        worst = max(worst, res.max_error)
    assert worst < 1e-4


def test_every_listed_primitive_is_covered():
    covered = set(_primitive_cases(np.random.default_rng(0)))
    assert set(T.PRIMITIVES) == covered


def test_wrong_vjp_is_caught():
    saved = T.PRIMITIVES["tanh"]
    T.PRIMITIVES["tanh"] = T.Primitive(saved.forward, lambda g, ctx, needs: (g * (1.0 - ctx),))
    try:
        fn, point = _primitive_cases(np.random.default_rng(0))["tanh"]
        res = finite_difference_check(fn, [Tensor(p) for p in point])
    finally:
        T.PRIMITIVES["tanh"] = saved
    assert res.max_error > 1e-2


def test_backward_twice_is_an_error():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_grad_tensor_never_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    with Tape() as tape:
        y = T.sum_(x * c)
    g = tape.backward(y)
    assert c not in g
    with pytest.raises(KeyError):
        g.array(c)


def test_no_record_without_grad():
    with Tape() as tape:
        Tensor(np.ones(2)) * 3.0
    assert len(tape) == 0


@pytest.mark.parametrize("sa,sb", [((3, 4), (3,)), ((2, 3), (3, 2)), ((4,), (2, 4, 1))])
def test_broadcasting_restricted(sa, sb):
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(sa)), Tensor(np.ones(sb)))


def test_leading_batch_broadcast_allowed():
    out = T.add(Tensor(np.ones((2, 3, 4))), Tensor(np.arange(4.0)))
    assert out.shape == (2, 3, 4)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_unknown_primitive():
    with pytest.raises(ValueError):
        T.apply_primitive("relu", (Tensor(1.0),))


def test_checked_mode_flags_nonfinite():
    with checked():
        with pytest.raises(NumericError):
            T.log(Tensor(np.array([0.0, 1.0])))
    T.log(Tensor(np.array([0.0, 1.0])))  # unchecked: allowed


def test_precision_modes():
    assert Tensor(1.0).dtype == np.float32
    with precision("float64"):
        assert Tensor(1.0).dtype == np.float64
    assert T.get_dtype() == np.float32


def test_gather_rows_accumulates_duplicates_and_skips_padding():
    table = np.arange(12.0).reshape(4, 3)
    ids = np.array([[1, 1, 0], [2, 1, 0]])
    out, (g,) = grad_of(lambda t: T.sum_(T.gather_rows(t, ids, padding_idx=0)), table)
    assert np.all(out.data == table[ids].sum() - 2 * table[0].sum())
    np.testing.assert_array_equal(g[:, 0], [0.0, 3.0, 1.0, 0.0])


def test_masked_padding_contributes_zero_gradient():
    x = np.array([[1.0, 2.0, 5.0], [3.0, 0.0, 0.0]])
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    _, (g,) = grad_of(lambda t: T.sum_(T.tanh(t) * mask), x)
    assert np.all(g[mask == 0] == 0.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(5, 7)))
    w = Tensor(rng.normal(size=(7, 3)))
    r1 = T.softmax(T.tanh(a @ w)).data
    r2 = T.softmax(T.tanh(a @ w)).data
    assert r1.tobytes() == r2.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_is_linear(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))

    def f1(x):
        return T.sum_(T.tanh(x @ w))

    def f2(x):
        return T.sum_(T.softplus(x) * a)

    _, (g1,) = grad_of(f1, a)
    _, (g2,) = grad_of(f2, a)
    _, (g12,) = grad_of(lambda x: f1(x) + f2(x), a)
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(values):
    with precision("float64"):
        s = T.softmax(Tensor(np.array(values))).data
        ls = T.log_softmax(Tensor(np.array(values))).data
    assert s.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(np.exp(ls), s, rtol=1e-10, atol=1e-300)


def test_fd_reports_nonfinite_coordinates():
    res = finite_difference_check(lambda x: T.sum_(T.log(x)), Tensor(np.array([1e-6, 1.0])), eps=1e-4, order=2)
    assert res.nonfinite == [(0, 0)]


def test_tensor_sizes_match_data():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.size == int(np.prod(t.shape)) == t.data.size
