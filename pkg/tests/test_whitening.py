import numpy as np
import pytest

from drank import linalg, whitening
from drank.whitening import GramStats, Whitener, build_group_whitener, build_whitener, scale, unscale_basis


def stats(rng, d, tokens=None, role="Q", layer=0):
    X = rng.standard_normal((tokens or 4 * d, d))
    return X, GramStats(role=role, layer=layer, G=X.T @ X, samples=X.shape[0])


def test_identity_gram_gives_identity_whitener():
    w = build_whitener(GramStats("Q", 0, np.eye(5), samples=10))
    np.testing.assert_array_equal(w.S, np.eye(5))
    assert w.ridge_used == 0.0


def test_orthogonal_input_reduces_to_plain_svd(rng):
    # Gram of an orthogonal activation matrix is the identity, so the whitened
    # SVD must coincide with the plain SVD of W
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    g = GramStats("Q", 0, Q.T @ Q, samples=8)
    w = build_whitener(g)
    W = rng.standard_normal((8, 6))
    sw = linalg.svd(scale(W, w))
    plain = linalg.svd(W)
    np.testing.assert_allclose(sw.singular_values, plain.singular_values, rtol=0, atol=1e-10)


def test_whitening_loss_identity(rng):
    X = rng.standard_normal((200, 16))
    g = GramStats("Q", 0, X.T @ X, samples=200)
    w = build_whitener(g)
    W = rng.standard_normal((16, 12))
    k = 5
    s = linalg.svd(scale(W, w))
    top = linalg.truncate(s, k)
    W_hat = unscale_basis(top.U, top.singular_values, w) @ top.Vt
    lhs = np.linalg.norm(X @ (W - W_hat)) ** 2
    rhs = s.tail_energy(k)
    assert lhs == pytest.approx(rhs, rel=1e-6)


def test_whitened_loss_identity_many_instances(rng):
    for _ in range(25):
        tokens = int(rng.integers(50, 200))
        d1 = int(rng.integers(4, 20))
        d2 = int(rng.integers(2, 16))
        X = rng.standard_normal((tokens, d1))
        w = build_whitener(GramStats("Q", 0, X.T @ X, samples=tokens))
        W = rng.standard_normal((d1, d2))
        k = int(rng.integers(1, min(d1, d2) + 1))
        s = linalg.svd(scale(W, w))
        top = linalg.truncate(s, k)
        W_hat = unscale_basis(top.U, top.singular_values, w) @ top.Vt
        lhs = np.linalg.norm(X @ (W - W_hat)) ** 2
        rhs = s.tail_energy(k)
        assert abs(lhs - rhs) <= 1e-6 * max(rhs, 1e-12)


def test_scale_identity_and_scalar(rng):
    W = rng.standard_normal((4, 3))
    w_id = Whitener(S=np.eye(4), ridge_used=0.0)
    np.testing.assert_array_equal(scale(W, w_id), W)
    w_two = Whitener(S=2.0 * np.eye(4), ridge_used=0.0)
    np.testing.assert_allclose(scale(W, w_two), 2.0 * W)


def test_scale_matches_plain_matmul(rng):
    X, g = stats(rng, 6)
    w = build_whitener(g)
    W = rng.standard_normal((6, 5))
    np.testing.assert_allclose(scale(W, w), w.S @ W, rtol=1e-12)


def test_scale_dimension_mismatch(rng):
    _, g = stats(rng, 6)
    with pytest.raises(ValueError, match="whitener dim"):
        scale(np.zeros((5, 2)), build_whitener(g))


def test_unscale_basis_identity(rng):
    U = rng.standard_normal((4, 2))
    sig = np.array([3.0, 1.0])
    w = Whitener(S=np.eye(4), ridge_used=0.0)
    np.testing.assert_allclose(unscale_basis(U, sig, w), U * sig)


def test_unscale_basis_residual(rng):
    X, g = stats(rng, 8)
    w = build_whitener(g)
    W = rng.standard_normal((8, 6))
    s = linalg.svd(scale(W, w))
    B = unscale_basis(s.U, s.singular_values, w)
    assert np.linalg.norm(w.S @ B - s.U * s.singular_values) <= 1e-8 * np.linalg.norm(s.U * s.singular_values)
    # full rank: the factorization reproduces W
    assert np.linalg.norm(B @ s.Vt - W) <= 1e-8 * np.linalg.norm(W)


def test_ridge_retry_on_singular_gram():
    # rank-deficient Gram: plain Cholesky fails, the automatic ridge retry succeeds
    G = np.zeros((3, 3))
    G[0, 0] = 1.0
    w = build_whitener(GramStats("Q", 0, G, samples=5))
    assert w.ridge_used == whitening.DEFAULT_RETRY_RIDGE
    target = G + w.ridge_used * np.mean(np.diag(G)) * np.eye(3)
    assert np.linalg.norm(w.S.T @ w.S - target) <= 1e-8


def test_explicit_ridge_failure_is_not_retried():
    G = np.zeros((2, 2))
    with pytest.raises(linalg.CholeskyError):
        build_whitener(GramStats("Q", 0, G, samples=5), ridge=1e-6)


def test_zero_gram_fails_even_after_retry():
    # mean diagonal is 0, so the relative ridge cannot rescue an all-zero Gram
    with pytest.raises(linalg.CholeskyError):
        build_whitener(GramStats("Q", 0, np.zeros((3, 3)), samples=5))


def test_group_whitener_equals_sum_of_grams(rng):
    X1, g1 = stats(rng, 5, layer=0)
    X2, g2 = stats(rng, 5, layer=1)
    w = build_group_whitener([g1, g2])
    assert np.linalg.norm(w.S.T @ w.S - (g1.G + g2.G)) <= 1e-9 * np.linalg.norm(g1.G + g2.G)
    # equivalent to concatenating the calibration activations
    Xcat = np.vstack([X1, X2])
    np.testing.assert_allclose(w.S.T @ w.S, Xcat.T @ Xcat, rtol=1e-12)


def test_lower_variant_orientation(rng):
    _, g = stats(rng, 6)
    w = build_whitener(g, lower=True)
    assert np.allclose(np.triu(w.S, 1), 0)
    assert np.linalg.norm(w.S @ w.S.T - g.G) <= 1e-9 * np.linalg.norm(g.G)
    # round trip through the lower solve
    M = np.random.default_rng(1).standard_normal((6, 3))
    np.testing.assert_allclose(unscale_basis(w.S @ M, np.ones(3), w), M, rtol=1e-9, atol=1e-12)


def test_gram_stats_validation():
    with pytest.raises(ValueError, match="symmetric"):
        GramStats("Q", 0, np.array([[1.0, 5.0], [0.0, 1.0]]), samples=1)
    with pytest.raises(ValueError, match="square"):
        GramStats("Q", 0, np.zeros((2, 3)), samples=1)
    with pytest.raises(ValueError, match="samples"):
        build_whitener(GramStats("Q", 0, np.eye(2), samples=0))
