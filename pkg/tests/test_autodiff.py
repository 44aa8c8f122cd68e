import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from npg import autodiff as ad
from npg.autodiff import Tensor, backward, finite_diff_check
from npg.coarse_losses import build_neighbor_graph, rigidity_loss


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_constant_matmul_records_nothing():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 1)))
    c = a @ b
    assert c.shape == (2, 1)
    assert c.is_leaf and not c.requires_grad
    np.testing.assert_array_equal(c.data, [[3.0], [3.0]])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_stable():
    out = ad.softmax(Tensor(np.array([1000.0, 0.0, -1000.0]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-300)


def test_leaky_relu_slope():
    assert ad.leaky_relu(Tensor(np.array(-2.0)), 0.01).item() == pytest.approx(-0.02)


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0])
    g = backward((x * x).sum(), [x])
    np.testing.assert_array_equal(g[x], [2.0, 4.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_disconnected_leaf_gets_zero():
    x, y = leaf([1.0, 2.0]), leaf([3.0])
    g = backward((x * x).sum(), [x, y])
    np.testing.assert_array_equal(g[y], [0.0])


def test_non_scalar_root_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        backward(x * 2.0)


def test_shape_mismatch_names_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_tape_is_topological_and_visits_once():
    x = leaf([1.0, 2.0])
    y = x * x
    z = (y + y).sum()
    tape = ad.Tape(z)
    pos = {id(t): i for i, t in enumerate(tape.records)}
    for t in tape.records:
        for p in t.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]
    assert len(pos) == len(tape.records)
    g = backward(z, [x])
    np.testing.assert_allclose(g[x], 4 * x.data)


def test_softmax_dot_pipeline_fd():
    rng = np.random.default_rng(0)
    v = rng.normal(size=6)
    rep = finite_diff_check(lambda x: (ad.softmax(x) * v).sum(), rng.normal(size=6), tolerance=1e-6)
    assert rep.passed, rep.message


def test_l2_norm_gradient_closed_form():
    x = np.random.default_rng(1).normal(size=10)
    t = leaf(x)
    g = backward(ad.norm(t, axis=0), [t])[t]
    np.testing.assert_allclose(g, x / np.linalg.norm(x), rtol=1e-12)
    assert finite_diff_check(lambda z: ad.norm(z, axis=0), x, tolerance=1e-5).passed


def test_kink_is_skipped():
    # |x| at a tie point x = 0 is not differentiable.
    rep = finite_diff_check(lambda z: ad.abs_(z).sum(), np.array([0.0, 1.0]))
    assert 0 in rep.skipped
    assert rep.passed


def test_non_finite_is_oracle_failure():
    rep = finite_diff_check(lambda z: ad.log(z).sum(), np.array([-1.0, 1.0]))
    assert rep.oracle_failure and not rep.passed


def test_rigidity_fd():
    rng = np.random.default_rng(2)
    ref = rng.normal(size=(12, 3))
    graph = build_neighbor_graph(ref, 0.3)
    pt = ref + 0.1 * rng.normal(size=ref.shape)
    rep = finite_diff_check(lambda p: rigidity_loss(p, ref, graph), pt, tolerance=1e-4)
    assert rep.passed, rep.message


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(5, 4))

    def grad():
        x = leaf(data)
        y = ad.softmax(x @ x.T, axis=1)
        return backward((y * y).sum(), [x])[x]

    assert np.array_equal(grad(), grad())


def test_zero_grad_keeps_values():
    x = leaf([1.0, 2.0])
    backward((x * x).sum())
    ad.zero_grad([x])
    assert x.grad is None
    np.testing.assert_array_equal(x.data, [1.0, 2.0])


def test_retain_intermediate():
    x = leaf([1.0, 2.0])
    y = x * 3.0
    g = backward((y * y).sum(), [x], retain=[y])
    np.testing.assert_allclose(g[y], 2 * y.data)
    assert y.grad is None


def _unary_cases():
    rng = np.random.default_rng(10)
    pos = lambda n: rng.uniform(0.5, 2.0, size=n)  # noqa: E731
    any_ = lambda n: rng.normal(size=n)  # noqa: E731
    return [
        ("exp", lambda x: ad.exp(x).sum(), any_),
        ("log", lambda x: ad.log(x).sum(), pos),
        ("sqrt", lambda x: ad.sqrt(x).sum(), pos),
        ("power", lambda x: ad.power(x, 2.5).sum(), pos),
        ("sigmoid", lambda x: ad.sigmoid(x).sum(), any_),
        ("leaky_relu", lambda x: (ad.leaky_relu(x) * x).sum(), any_),
        ("softmax", lambda x: (ad.softmax(x.reshape(2, 3), axis=1) * np.arange(6).reshape(2, 3)).sum(),
         any_),
        ("normalize", lambda x: (ad.normalize(x.reshape(2, 3)) * np.arange(6).reshape(2, 3)).sum(), any_),
        ("cross", lambda x: (ad.cross(x[:3], x[3:]) * np.array([1.0, -2.0, 0.5])).sum(), any_),
        ("matmul", lambda x: (x.reshape(2, 3) @ x.reshape(3, 2)).sum(), any_),
        ("gather", lambda x: (ad.gather(x, np.array([0, 2, 2, 5])) ** 2).sum(), any_),
        ("concatenate", lambda x: (ad.concatenate([x, x * x]) * np.arange(12)).sum(), any_),
        ("div", lambda x: (x[:3] / (x[3:] * x[3:] + 1.0)).sum(), any_),
        ("huber", lambda x: ad.huber(x * 0.01, 0.01).sum(), any_),
    ]


@pytest.mark.parametrize("name,f,gen", _unary_cases(), ids=[c[0] for c in _unary_cases()])
def test_primitive_fd_100_cases(name, f, gen):
    worst = 0.0
    for _ in range(100):
        rep = finite_diff_check(f, gen(6), tolerance=1e-5)
        assert not rep.oracle_failure
        worst = max(worst, rep.max_rel_error if rep.n_checked else 0.0)
    assert worst < 1e-5, f"{name}: {worst}"


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_broadcast_add_mul_gradient_shapes(a):
    x = leaf(a)
    b = leaf(np.arange(4.0))
    out = ((x + b) * b).sum()
    g = backward(out, [x, b])
    assert g[x].shape == x.shape and g[b].shape == b.shape
    np.testing.assert_allclose(g[x], np.broadcast_to(np.arange(4.0), (3, 4)))
    np.testing.assert_allclose(g[b], (a + 2 * np.arange(4.0)).sum(0))
