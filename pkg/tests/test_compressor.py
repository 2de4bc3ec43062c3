import numpy as np
import pytest

from drank import linalg, whitening
from drank.compressor import (
    FactoredGroup,
    LayerGroup,
    compress_group,
    compression_report,
    concat_group,
    reconstruct,
)
from drank.whitening import GramStats, Whitener, build_group_whitener


def make_group(rng, n=2, d1=8, d2=5, role="Q"):
    W_list = [rng.standard_normal((d1, d2)) for _ in range(n)]
    stats = []
    for layer in range(n):
        X = rng.standard_normal((4 * d1, d1))
        stats.append(GramStats(role=role, layer=layer, G=X.T @ X, samples=4 * d1))
    g = LayerGroup(
        role=role,
        members=tuple(range(n)),
        W_list=tuple(W_list),
        whitener=build_group_whitener(stats),
    )
    return g, stats


def test_concat_single_is_identity(rng):
    W = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(concat_group([W]), W)


def test_concat_two_blocks():
    A = np.arange(4.0).reshape(2, 2)
    B = A + 10.0
    out = concat_group([A, B])
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out[:, :2], A)
    np.testing.assert_array_equal(out[:, 2:], B)


def test_concat_indexing_law(rng):
    blocks = [rng.standard_normal((4, 3)) for _ in range(3)]
    out = concat_group(blocks)
    for i, blk in enumerate(blocks):
        for j in range(3):
            np.testing.assert_array_equal(out[:, i * 3 + j], blk[:, j])


def test_concat_shape_mismatch(rng):
    with pytest.raises(ValueError, match="share a shape"):
        concat_group([rng.standard_normal((2, 2)), rng.standard_normal((3, 2))])


def test_full_rank_compression_is_exact(rng):
    g, _ = make_group(rng, n=2, d1=8, d2=5)
    f = compress_group(g, k=8)  # min(d1, n*d2) = 8
    for i in range(2):
        W = g.W_list[i]
        assert np.linalg.norm(reconstruct(f, i) - W) <= 1e-7 * np.linalg.norm(W)


def test_single_member_identity_whitener_reduces_to_truncated_svd(rng):
    W = rng.standard_normal((8, 6))
    g = LayerGroup(
        role="Q", members=(0,), W_list=(W,), whitener=Whitener(S=np.eye(8), ridge_used=0.0)
    )
    f = compress_group(g, k=3)
    top = linalg.truncate(linalg.svd(W), 3)
    np.testing.assert_allclose(reconstruct(f, 0), top.reconstruct(), atol=1e-12)


def test_whitened_error_matches_tail_energy(rng):
    g, _ = make_group(rng, n=2, d1=8, d2=5)
    k = 3
    f = compress_group(g, k)
    scaled = whitening.scale(concat_group(g.W_list), g.whitener)
    s = linalg.svd(scaled)
    err2 = sum(
        np.linalg.norm(g.whitener.S @ (g.W_list[i] - reconstruct(f, i))) ** 2 for i in range(2)
    )
    assert err2 == pytest.approx(s.tail_energy(k), rel=1e-6)


def test_k_out_of_range(rng):
    g, _ = make_group(rng, n=2, d1=8, d2=5)
    for k in (0, 9):
        with pytest.raises(ValueError, match="out of range"):
            compress_group(g, k)


def test_parameter_count_accounting(rng):
    g, _ = make_group(rng, n=3, d1=10, d2=4)
    f = compress_group(g, k=5)
    assert f.param_count == 5 * (10 + 3 * 4)
    assert f.B.shape == (10, 5)
    assert all(C.shape == (5, 4) for C in f.C_list)


def test_reconstruct_identity_factors():
    B = np.eye(3)
    C = np.arange(6.0).reshape(3, 2)
    f = FactoredGroup(B=B, C_list=(C,), k=3)
    np.testing.assert_array_equal(reconstruct(f, 0), C)


def test_reconstruct_zero_coefficients():
    f = FactoredGroup(B=np.ones((4, 2)), C_list=(np.zeros((2, 3)),), k=2)
    np.testing.assert_array_equal(reconstruct(f, 0), np.zeros((4, 3)))


def test_reconstruct_matches_matmul(rng):
    B = rng.standard_normal((6, 3))
    C = rng.standard_normal((3, 4))
    f = FactoredGroup(B=B, C_list=(C,), k=3)
    np.testing.assert_allclose(reconstruct(f, 0), B @ C, rtol=1e-14)


def test_reconstruct_index_range(rng):
    g, _ = make_group(rng)
    f = compress_group(g, 2)
    with pytest.raises(ValueError, match="member index"):
        reconstruct(f, 2)


def test_report_zero_for_exact_reconstruction(rng):
    g, stats = make_group(rng, n=2, d1=6, d2=3)
    f = compress_group(g, k=6)
    rep = compression_report(g.W_list, f, stats)
    for entry in rep:
        assert entry["frob_err"] <= 1e-9
        assert entry["rel_frob_err"] <= 1e-9
        assert entry["activation_weighted_err"] <= 1e-8


def test_report_rank_one_group(rng):
    u = rng.standard_normal((6, 1))
    v = rng.standard_normal((1, 4))
    W = u @ v
    X = rng.standard_normal((30, 6))
    stats = [GramStats("Q", 0, X.T @ X, samples=30)]
    g = LayerGroup(role="Q", members=(0,), W_list=(W,), whitener=whitening.build_whitener(stats[0]))
    rep = compression_report((W,), compress_group(g, 1), stats)
    assert rep[0]["frob_err"] <= 1e-9 * np.linalg.norm(W)


def test_report_matches_norm_oracle(rng):
    g, stats = make_group(rng, n=2, d1=8, d2=5)
    f = compress_group(g, k=3)
    rep = compression_report(g.W_list, f, stats)
    for i, entry in enumerate(rep):
        E = g.W_list[i] - f.B @ f.C_list[i]
        assert entry["frob_err"] == pytest.approx(np.linalg.norm(E), rel=1e-12)
        assert entry["rel_frob_err"] == pytest.approx(
            np.linalg.norm(E) / np.linalg.norm(g.W_list[i]), rel=1e-12
        )
        S_i = whitening.build_whitener(stats[i]).S
        assert entry["activation_weighted_err"] == pytest.approx(
            np.linalg.norm(S_i @ E), rel=1e-12
        )


def test_upper_whitener_never_loses_to_lower_variant(rng):
    # truncating the upper-whitened matrix is the activation-loss optimum over
    # all rank-k factorizations, so the lower-factor A/B variant cannot beat it
    from drank.whitening import build_whitener

    for _ in range(20):
        d1 = int(rng.integers(6, 16))
        d2 = int(rng.integers(4, 12))
        X = rng.standard_normal((5 * d1, d1))
        W = rng.standard_normal((d1, d2))
        stats = GramStats("Q", 0, X.T @ X, samples=5 * d1)
        k = int(rng.integers(1, min(d1, d2)))
        losses = {}
        for lower in (False, True):
            g = LayerGroup(
                role="Q",
                members=(0,),
                W_list=(W,),
                whitener=build_whitener(stats, lower=lower),
            )
            f = compress_group(g, k)
            losses[lower] = np.linalg.norm(X @ (W - reconstruct(f, 0))) ** 2
        assert losses[False] <= losses[True] * (1 + 1e-9)


def test_group_size_monotone_error_on_slim_stacks(rng):
    # slim matrices with heterogeneous per-layer structure: larger groups
    # cannot beat smaller ones on mean per-matrix whitened error
    from conftest import slim_stack_errors

    trials = 10
    wins = 0
    for _ in range(trials):
        errs = slim_stack_errors(rng)
        if errs[1] <= errs[2] <= errs[4]:
            wins += 1
    assert wins == trials
