import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from defed.topology import (
    DegreeTooLargeError,
    DegreeTooSmallError,
    MixingMatrix,
    OddDegreeError,
    TooFewClientsError,
    TopologyParseError,
    TopologyValidationError,
    build_complete_graph,
    build_regular_graph,
    load_matrix,
    save_matrix,
    spectral_norm,
    validate,
)


def circulant_lambda(K, l):
    # eigenvalues of a symmetric circulant: sum of weights times cos(2 pi j d / K)
    offsets = range(-(l // 2), l // 2 + 1)
    eig = [sum(np.cos(2 * np.pi * j * d / K) for d in offsets) / (l + 1) for j in range(1, K)]
    return max(abs(e) for e in eig)


def brute_lambda(W):
    K = W.shape[0]
    return np.max(np.abs(np.linalg.eigvals(W - np.full((K, K), 1.0 / K))))


# ---- regular graphs ------------------------------------------------------


def test_ring_k10_l2_row0_support():
    W = build_regular_graph(10, 2).weights
    assert set(np.flatnonzero(W[0])) == {9, 0, 1}
    assert np.allclose(W[0, [9, 0, 1]], 1 / 3)


def test_ring_k10_l8_row0_support():
    W = build_regular_graph(10, 8).weights
    expected = {d % 10 for d in range(-4, 5)}
    assert set(np.flatnonzero(W[0])) == expected
    assert np.allclose(W[0][sorted(expected)], 1 / 9)


def test_ring_k4_rows_are_rotations():
    W = build_regular_graph(4, 2).weights
    base = np.array([1 / 3, 1 / 3, 0, 1 / 3])
    for i in range(4):
        assert np.array_equal(W[i], np.roll(base, i))


@pytest.mark.parametrize(
    "K,l,err",
    [(10, 9, OddDegreeError), (10, 0, DegreeTooSmallError), (6, 6, DegreeTooLargeError), (2, 2, TooFewClientsError)],
)
def test_regular_graph_parameter_errors(K, l, err):
    with pytest.raises(err):
        build_regular_graph(K, l)


def test_parameter_errors_are_distinct():
    kinds = {OddDegreeError, DegreeTooSmallError, DegreeTooLargeError, TooFewClientsError}
    assert len(kinds) == 4


@pytest.mark.parametrize("K,l", [(3, 2), (7, 2), (7, 6), (10, 4), (11, 10), (20, 6)])
def test_regular_graph_rows(K, l):
    W = build_regular_graph(K, l).weights
    assert np.all((W > 0).sum(axis=1) == l + 1)
    assert np.allclose(np.diag(W), 1 / (l + 1))
    assert np.array_equal(W, W.T)


@pytest.mark.parametrize("K", [3, 5, 7, 9])
def test_full_degree_ring_equals_complete_graph(K):
    assert np.array_equal(build_regular_graph(K, K - 1).weights, build_complete_graph(K).weights)


def test_lambda_nonincreasing_in_degree():
    lams = [build_regular_graph(10, l).spectral_norm for l in (2, 4, 6, 8)]
    assert all(a >= b - 1e-15 for a, b in zip(lams, lams[1:]))


# ---- complete graphs -----------------------------------------------------


def test_complete_graph_k2():
    assert np.array_equal(build_complete_graph(2).weights, [[0.5, 0.5], [0.5, 0.5]])
    assert build_complete_graph(2).spectral_norm == pytest.approx(0.0, abs=1e-15)


def test_complete_graph_k10():
    W = build_complete_graph(10)
    assert np.allclose(W.weights, 0.1)
    assert W.spectral_norm == pytest.approx(0.0, abs=1e-14)


def test_complete_graph_k1_rejected():
    with pytest.raises(TooFewClientsError):
        build_complete_graph(1)


# ---- spectral norm -------------------------------------------------------


@pytest.mark.parametrize("l", [2, 4, 6, 8])
def test_spectral_norm_matches_circulant_formula(l):
    lam = build_regular_graph(10, l).spectral_norm
    assert lam == pytest.approx(circulant_lambda(10, l), abs=1e-12)
    assert lam == pytest.approx(brute_lambda(build_regular_graph(10, l).weights), abs=1e-10)


def test_ring_lambda_value():
    expected = 1 / 3 + (2 / 3) * np.cos(2 * np.pi / 10)
    assert build_regular_graph(10, 2).spectral_norm == pytest.approx(expected, abs=1e-12)
    assert round(expected, 4) == 0.8727


def test_spectral_norm_on_raw_array():
    assert spectral_norm(build_complete_graph(4).weights) == pytest.approx(0.0, abs=1e-14)


def test_spectral_norm_rejects_invalid():
    with pytest.raises(TopologyValidationError):
        spectral_norm(np.eye(3))


def test_spectral_norm_cache_is_thread_safe():
    W = build_regular_graph(30, 4)
    out = []
    threads = [threading.Thread(target=lambda: out.append(W.spectral_norm)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(out)) == 1


# ---- validation ----------------------------------------------------------


def test_validate_complete():
    r = validate(build_complete_graph(10).weights)
    assert r.ok and r.lam == pytest.approx(0.0, abs=1e-14)


def test_validate_identity_disconnected():
    r = validate(np.eye(3))
    assert not r.connected and r.lam is None and not r.ok


def test_validate_ring_lambda():
    r = validate(build_regular_graph(10, 2).weights)
    assert r.ok and r.lam == pytest.approx(0.8726780, abs=1e-7)


def test_validate_reports_asymmetry_and_bad_rows():
    W = np.array([[0.5, 0.5, 0.0], [0.2, 0.5, 0.3], [0.0, 0.3, 0.6]])
    r = validate(W)
    assert not r.symmetric and not r.row_stochastic
    assert r.lam is None
    assert r.problems()


def test_validate_negative_entries():
    W = np.array([[1.5, -0.5], [-0.5, 1.5]])
    r = validate(W)
    assert not r.nonnegative and r.lam is None


def test_validate_never_raises_on_garbage():
    r = validate(np.array([[np.nan, 1.0], [1.0, 0.0]]))
    assert not r.ok


def test_mixing_matrix_is_immutable():
    W = build_regular_graph(5, 2)
    with pytest.raises(ValueError):
        W.weights[0, 0] = 1.0


# ---- file round trips ----------------------------------------------------


def test_load_complete_graph_csv(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("0.5,0.5\n0.5,0.5\n")
    assert load_matrix(p) == build_complete_graph(2)


def test_save_load_roundtrip(tmp_path):
    W = build_regular_graph(10, 4)
    save_matrix(W, tmp_path / "w.csv")
    assert np.array_equal(load_matrix(tmp_path / "w.csv").weights, W.weights)


def test_load_row_sum_error(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("0.45,0.45\n0.45,0.55\n")
    with pytest.raises(TopologyValidationError) as info:
        load_matrix(p)
    assert not info.value.report.row_stochastic


def test_load_disconnected_blocks(tmp_path):
    ring = build_regular_graph(4, 2).weights
    W = np.zeros((8, 8))
    W[:4, :4] = ring
    W[4:, 4:] = ring
    p = tmp_path / "w.csv"
    np.savetxt(p, W, delimiter=",")
    with pytest.raises(TopologyValidationError) as info:
        load_matrix(p)
    assert info.value.report.connected is False


@pytest.mark.parametrize("text", ["", "0.5,0.5\n0.5\n", "a,b\nc,d\n", "0.5,0.5\n0.5,0.5\n0.5,0.5\n"])
def test_load_parse_errors(tmp_path, text):
    p = tmp_path / "w.csv"
    p.write_text(text)
    with pytest.raises((TopologyParseError, TopologyValidationError)):
        load_matrix(p)


# ---- properties ----------------------------------------------------------

graphs = st.integers(3, 16).flatmap(lambda K: st.tuples(st.just(K), st.sampled_from([l for l in range(2, K) if l % 2 == 0])))


@given(graphs, st.integers(0, 2**31))
def test_contraction_property(Kl, seed):
    K, l = Kl
    W = build_regular_graph(K, l)
    v = np.random.default_rng(seed).standard_normal((K, 3))
    dev = v - v.mean(axis=0)
    mixed = W.weights @ v
    lhs = np.linalg.norm(mixed - mixed.mean(axis=0))
    assert lhs <= W.spectral_norm * np.linalg.norm(dev) + 1e-9


@given(graphs)
def test_doubly_stochastic_and_lambda_range(Kl):
    K, l = Kl
    W = build_regular_graph(K, l)
    assert np.allclose(np.ones(K) @ W.weights, 1.0, atol=1e-12)
    assert 0.0 <= W.spectral_norm < 1.0
    assert validate(W.weights).ok


@given(st.integers(2, 12), st.integers(0, 2**31))
def test_random_symmetric_stochastic_matrices(K, seed):
    # Metropolis weights on a random connected graph are symmetric doubly stochastic
    rng = np.random.default_rng(seed)
    A = np.zeros((K, K), dtype=bool)
    for i in range(1, K):
        j = rng.integers(0, i)
        A[i, j] = A[j, i] = True
    extra = rng.random((K, K)) < 0.2
    A |= extra | extra.T
    np.fill_diagonal(A, False)
    deg = A.sum(axis=1)
    W = np.where(A, 1.0 / (1 + np.maximum.outer(deg, deg)), 0.0)
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    M = MixingMatrix(W, tol=1e-12)
    assert M.spectral_norm == pytest.approx(brute_lambda(W), abs=1e-10)
