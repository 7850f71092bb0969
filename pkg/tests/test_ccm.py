import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectrascope.blocks import CrossClassArray, WeightScheme, weighted_decompose
from spectrascope.ccm import (
    CCMConfig,
    PARAM_GRID,
    arrow_eigs,
    circulant_eigs,
    expected_fim,
    logreg_fim,
    misclassification_ratio_report,
    monte_carlo_fim,
    sample_ccm,
    symmetric_probs,
    theorem_spectrum,
)


def test_grid_has_48_points():
    assert len(PARAM_GRID) == 48


def test_closed_form_frozen_values():
    # D=5, C=3, alpha=0.3, s=4: k = 0.15, base = 2 - 0.45 = 1.55
    groups = theorem_spectrum(5, 3, 0.3, 4.0).groups
    assert groups[0] == (pytest.approx(0.6525, abs=1e-15), 3)
    assert groups[1] == (pytest.approx(0.4325, abs=1e-15), 3)
    assert groups[2] == (pytest.approx(0.2325, abs=1e-15), 4)
    assert groups[3] == (0.0, 5)


@pytest.mark.parametrize("D,C,alpha,s", PARAM_GRID)
def test_closed_form_matches_dense(D, C, alpha, s):
    spec = theorem_spectrum(D, C, alpha, s)
    assert spec.dim == D * C
    dense = np.linalg.eigvalsh(expected_fim(D, C, alpha, s))
    assert np.abs(spec.values() - dense).max() < 1e-10
    assert np.abs(dense[:D]).max() < 1e-10


def test_zero_signal_collapses_groups():
    top, mini, bulk, _ = (v for v, _ in theorem_spectrum(6, 3, 0.4, 0.0).groups)
    assert top == pytest.approx(bulk) and mini == pytest.approx(bulk)


def test_alpha_zero_gives_zero_matrix():
    assert not expected_fim(4, 2, 0.0, 3.0).any()
    assert np.all(theorem_spectrum(4, 2, 0.0, 3.0).values() == 0)


def test_zero_signal_is_kron_identity():
    G = expected_fim(3, 3, 0.3, 0.0)
    sub = G[:3, :3]
    np.testing.assert_allclose(G, np.kron(np.eye(3), sub))


def test_expected_fim_errors():
    with pytest.raises(ValueError):
        expected_fim(2, 3, 0.1, 1.0)
    with pytest.raises(ValueError):
        symmetric_probs(1.5, 3)


def test_logreg_hand_case():
    # D=1, C=2, x=1 for both classes, p=(1/2, 1/2): diag(p) - p p^T = [[1,-1],[-1,1]] / 4
    X = np.ones((1, 2, 1))
    P = np.full((1, 2, 2), 0.5)
    np.testing.assert_allclose(logreg_fim(X, P), 0.25 * np.array([[1, -1], [-1, 1]]))
    with pytest.raises(ValueError):
        logreg_fim(np.ones((1, 1, 1)), np.full((1, 1, 2), 0.5))


def test_logreg_one_hot_gives_zero():
    X = np.random.default_rng(0).standard_normal((3, 2, 4))
    P = np.broadcast_to(np.eye(2), (3, 2, 2))
    assert np.abs(logreg_fim(X, P)).max() == 0


def test_logreg_rejects_unnormalized():
    X = np.ones((1, 2, 2))
    with pytest.raises(ValueError):
        logreg_fim(X, np.full((1, 2, 2), 0.6))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 4), st.integers(2, 5))
def test_logreg_equals_extended_gradient_moment(seed, N, C, D):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, C, D))
    logits = rng.standard_normal((N, C, C))
    P = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
    err = P[:, :, None, :] - np.eye(C)[None, None]  # (N, C, C', C)
    g = np.einsum("ncd,ncka->nckda", X, err).reshape(N, C, C, D * C)
    total = weighted_decompose(CrossClassArray(g), WeightScheme.from_probs(P)).total
    assert np.abs(total - logreg_fim(X, P)).max() < 1e-10


def test_sample_ccm_means():
    far = sample_ccm(CCMConfig(D=6, C=3, N=50, t=100.0, seed=1))
    means = far.data.mean(axis=0)
    np.testing.assert_allclose(means, 100 * np.eye(3, 6), atol=1.0)
    near = sample_ccm(CCMConfig(D=6, C=3, N=400, t=0.0, seed=2))
    assert np.linalg.norm(near.data.mean(axis=0), axis=1).max() < 4 * np.sqrt(6 / 400)
    again = sample_ccm(CCMConfig(D=6, C=3, N=400, t=0.0, seed=2))
    assert np.array_equal(near.data, again.data)
    with pytest.raises(ValueError):
        CCMConfig(D=2, C=3, N=1, t=1.0)


def test_monte_carlo_close_to_expectation():
    D, C, a, s = 5, 3, 0.3, 4.0
    exact = expected_fim(D, C, a, s)
    est = monte_carlo_fim(D, C, a, s, 200_000, seed=0)
    big = np.abs(exact) > 0.05
    assert np.max(np.abs(est[big] - exact[big]) / np.abs(exact[big])) < 0.02


def test_monte_carlo_thread_independent():
    runs = [monte_carlo_fim(4, 2, 0.2, 1.0, 1000, seed=3, threads=t) for t in (1, 3)]
    assert np.array_equal(*runs)


def test_circulant():
    np.testing.assert_allclose(circulant_eigs(2.0, 1.0, 3), [1.0, 1.0, 4.0])
    np.testing.assert_allclose(circulant_eigs(2.5, 0.0, 4), [2.5] * 4)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 6))
def test_circulant_vs_dense(a, b, C):
    M = np.full((C, C), b)
    np.fill_diagonal(M, a)
    np.testing.assert_allclose(circulant_eigs(a, b, C), np.linalg.eigvalsh(M), atol=1e-10)


def _arrow(a, b, d, e, C):
    M = np.full((C, C), e)
    np.fill_diagonal(M, d)
    M[0, :] = b
    M[:, 0] = b
    M[0, 0] = a
    return M


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.integers(2, 6))
def test_arrow_vs_dense(a, b, d, e, C):
    np.testing.assert_allclose(arrow_eigs(a, b, d, e, C), np.linalg.eigvalsh(_arrow(a, b, d, e, C)), atol=1e-10)


def test_arrow_decouples_when_b_is_zero():
    vals = arrow_eigs(7.0, 0.0, 2.0, 0.5, 4)
    want = np.sort(np.concatenate([[7.0], circulant_eigs(2.0, 0.5, 3)]))
    np.testing.assert_allclose(vals, want, atol=1e-12)


def test_ratios():
    reports = [misclassification_ratio_report(6, 3, 0.3, s) for s in (0, 1, 4, 16)]
    assert reports[0]["top/mini"] == pytest.approx(1.0)
    for key in ("top/bulk", "top/mini", "mini/bulk"):
        seq = [r[key] for r in reports]
        assert all(x <= y for x, y in zip(seq, seq[1:]))
    with pytest.raises(ZeroDivisionError):
        misclassification_ratio_report(6, 3, 0.0, 1.0)
    with pytest.raises(ZeroDivisionError):
        # bulk value vanishes at alpha = 2 (C - 1) / C, which is 1 for C = 2
        misclassification_ratio_report(6, 2, 1.0, 1.0)


def test_small_alpha_limit():
    # as alpha -> 0 the ratios tend to (s + 2) / 2, (s + 2) / (s / C + 2), (s / C + 2) / 2
    s, C = 4.0, 3
    r = misclassification_ratio_report(5, C, 1e-9, s)
    assert r["top/bulk"] == pytest.approx((s + 2) / 2, rel=1e-6)
    assert r["top/mini"] == pytest.approx((s + 2) / (s / C + 2), rel=1e-6)
    assert r["mini/bulk"] == pytest.approx((s / C + 2) / 2, rel=1e-6)
