import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpsinkhorn import losses, ot
from dpsinkhorn.exceptions import SkipStep

from oracles import biased_reference


def _settings(**kw):
    base = dict(lam=0.5, m_mix=1.0, alpha_c=15.0, n_classes=3, tol=1e-10, max_iters=100_000)
    base.update(kw)
    return losses.SinkhornSettings(**base)


def _problem(seed, n=6, p=0.5, m=7, d=2, L=3):
    rng = np.random.default_rng(seed)
    k = n + losses.n_debias(n, p)
    X = rng.uniform(-1, 1, (k, d))
    xl = rng.integers(0, L, k)
    Y = rng.uniform(-1, 1, (m, d))
    yl = rng.integers(0, L, m)
    return losses.SplitBatch.from_fraction(X, xl, n, p), Y, yl


def test_n_debias():
    assert losses.n_debias(50, 0.4) == 20
    assert losses.n_debias(7, 0.5) == 3
    assert losses.n_debias(5, 0.0) == 0
    assert losses.n_debias(5, 1.0) == 5
    with pytest.raises(ValueError):
        losses.n_debias(5, 1.5)


def test_split_batch_views_overlap():
    X = np.arange(16.0).reshape(8, 2)
    b = losses.SplitBatch.from_fraction(X[:7], np.zeros(7, int), 5, 0.4)
    assert b.n_prime == 2
    np.testing.assert_array_equal(b.cross, X[:5])
    np.testing.assert_array_equal(b.self_view, X[2:7])
    with pytest.raises(ValueError):
        losses.SplitBatch(X, 5, 2, np.zeros(8, int))
    with pytest.raises(ValueError):
        losses.SplitBatch(X[:0], 0, 0, np.zeros(0, int))


def test_conditional_augment_examples():
    np.testing.assert_array_equal(losses.conditional_augment([[0.5]], [1], 15.0, 2), [[0.5, 0.0, 15.0]])
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    A = losses.conditional_augment(X, rng.integers(0, 3, 4), 0.0, 3)
    B = losses.conditional_augment(Y, rng.integers(0, 3, 5), 0.0, 3)
    np.testing.assert_allclose(ot.cost_matrix(A, B, 1.0).values, ot.cost_matrix(X, Y, 1.0).values)
    x = np.array([[0.2, -0.1]])
    same = ot.cost_matrix(losses.conditional_augment(x, [1], 15, 3),
                          losses.conditional_augment(x, [1], 15, 3), 0).values[0, 0]
    diff = ot.cost_matrix(losses.conditional_augment(x, [1], 15, 3),
                          losses.conditional_augment(x, [2], 15, 3), 0).values[0, 0]
    assert diff - same == pytest.approx(450.0)


def test_conditional_augment_label_range():
    with pytest.raises(ValueError):
        losses.conditional_augment([[0.0]], [2], 1.0, 2)
    with pytest.raises(ValueError):
        losses.conditional_augment([[0.0]], [0], -1.0, 2)


def test_single_pair_value():
    x, y = np.array([[0.3, -0.2]]), np.array([[-0.5, 0.4]])
    s = _settings(m_mix=0.0, alpha_c=0.0, n_classes=1)
    batch = losses.SplitBatch(x, 1, 0, np.zeros(1, int))
    out = losses.semi_debiased_loss(batch, y, np.zeros(1, int), s)
    assert out.value == pytest.approx(2 * ot.elementwise_cost(x[0], y[0], 0.0), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_p_zero_equals_biased_loss_bitwise(seed):
    batch, Y, yl = _problem(seed, p=0.0)
    s = _settings()
    out = losses.semi_debiased_loss(batch, Y, yl, s)
    ref_value, ref_grad = biased_reference(batch.samples, batch.labels, Y, yl, s)
    assert out.value == ref_value
    np.testing.assert_array_equal(out.grad, ref_grad)
    assert losses.biased_loss(batch.samples, batch.labels, Y, yl, s).value == ref_value


def test_p_one_pairs_cross_with_fresh_rows():
    batch, Y, yl = _problem(4, n=5, p=1.0)
    s = _settings()
    out = losses.semi_debiased_loss(batch, Y, yl, s)
    A = losses.conditional_augment(batch.samples[:5], batch.labels[:5], s.alpha_c, s.n_classes)
    B = losses.conditional_augment(batch.samples[5:], batch.labels[5:], s.alpha_c, s.n_classes)
    w_self = ot.entropic_ot(A, B, s.lam, s.m_mix, max_iters=s.max_iters, tol=s.tol)[0]
    assert out.self_value == w_self
    fresh = losses.debiased_loss(batch.samples[:5], batch.labels[:5], batch.samples[5:],
                                 batch.labels[5:], Y, yl, s)
    assert fresh.value == out.value


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), p=st.sampled_from([0.2, 0.5, 1.0]), shift=st.floats(-2, 2))
def test_cross_term_ignores_debias_rows(seed, p, shift):
    batch, Y, yl = _problem(seed, n=5, p=p)
    s = _settings()
    out = losses.semi_debiased_loss(batch, Y, yl, s)
    moved = batch.samples.copy()
    moved[batch.n:] += shift
    out2 = losses.semi_debiased_loss(losses.SplitBatch(moved, batch.n, batch.n_prime, batch.labels),
                                     Y, yl, s)
    assert out2.cross_value == out.cross_value


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), p=st.sampled_from([0.2, 0.6, 1.0]))
def test_debias_rows_see_no_real_data(seed, p):
    batch, Y, yl = _problem(seed, n=5, p=p)
    s = _settings()
    g1 = losses.semi_debiased_loss(batch, Y, yl, s).grad_debias
    Y2 = np.random.default_rng(seed + 1).uniform(-1, 1, (9, Y.shape[1]))
    g2 = losses.semi_debiased_loss(batch, Y2, np.zeros(9, int), s).grad_debias
    np.testing.assert_array_equal(g1, g2)


def test_empty_real_batch_skips():
    batch, _, _ = _problem(0)
    with pytest.raises(SkipStep):
        losses.semi_debiased_loss(batch, np.zeros((0, 2)), np.zeros(0, int), _settings())


def test_gradient_drops_onehot_block():
    batch, Y, yl = _problem(1)
    out = losses.semi_debiased_loss(batch, Y, yl, _settings())
    assert out.grad.shape == batch.samples.shape
    assert out.grad_cross.shape == (batch.n, 2)
    assert out.grad_debias.shape == (batch.n_prime, 2)


def test_gradient_matches_dual_finite_differences():
    # each fixed-plan gradient is the exact derivative of the matching dual values
    batch, Y, yl = _problem(2, n=4, p=0.5, m=5)
    s = _settings(lam=0.7, m_mix=0.0)
    out = losses.semi_debiased_loss(batch, Y, yl, s)

    def dual_loss(X):
        A = losses.conditional_augment(X[:batch.n], batch.labels[:batch.n], s.alpha_c, s.n_classes)
        B = losses.conditional_augment(X[batch.n_prime:batch.n + batch.n_prime],
                                       batch.labels[batch.n_prime:batch.n + batch.n_prime],
                                       s.alpha_c, s.n_classes)
        R = losses.conditional_augment(Y, yl, s.alpha_c, s.n_classes)
        w = [ot.dual_value(ot.sinkhorn_potentials(ot.cost_matrix(U, V, 0.0), lam=s.lam,
                                                  tol=1e-13, max_iters=100_000))
             for U, V in ((A, R), (A, B))]
        return 2 * w[0] - w[1]

    X = batch.samples
    fd = np.zeros_like(X)
    h = 1e-6
    for idx in np.ndindex(*X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        fd[idx] = (dual_loss(Xp) - dual_loss(Xm)) / (2 * h)
    np.testing.assert_allclose(out.grad, fd, rtol=1e-5, atol=1e-7)
