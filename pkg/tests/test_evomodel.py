"""Substitution models: rate matrices, transition probabilities, gradients."""

import numpy as np
import pytest
from scipy.linalg import expm

from phylosmc.evomodel import (build_gtr, build_jc69, load_params, save_params,
                               transition_grads, transition_probs)


def jc69_closed_form(b):
    """P(b) for Jukes-Cantor at unit expected rate."""
    off = 0.25 - 0.25 * np.exp(-4.0 * b / 3.0)
    P = np.full((4, 4), off)
    np.fill_diagonal(P, 0.25 + 0.75 * np.exp(-4.0 * b / 3.0))
    return P


def random_models(n, seed=0):
    rng = np.random.default_rng(seed)
    out = [build_jc69()]
    for _ in range(n - 1):
        out.append(build_gtr(rng.normal(scale=1.0, size=10)))
    return out


def test_jc69_structure():
    m = build_jc69()
    assert m.kind == "JC69"
    assert m.n_theta == 0
    assert np.allclose(m.eta, 0.25)
    assert np.allclose(m.Q.sum(axis=1), 0.0, atol=1e-14)
    # unit expected rate: -sum_i eta_i Q_ii = 1
    assert abs(-np.dot(m.eta, np.diag(m.Q)) - 1.0) < 1e-14


def test_jc69_transition_closed_form():
    m = build_jc69()
    for b in (0.0, 0.01, 0.1, 0.5, 1.3, 2.0):
        assert np.allclose(transition_probs(m, b), jc69_closed_form(b),
                           atol=1e-12)


def test_gtr_zero_theta_reproduces_jc69():
    g = build_gtr(np.zeros(10))
    j = build_jc69()
    assert np.allclose(g.Q, j.Q, atol=1e-12)
    assert np.allclose(g.eta, j.eta, atol=1e-15)


def test_gtr_structure_random():
    rng = np.random.default_rng(3)
    for _ in range(25):
        m = build_gtr(rng.normal(scale=1.5, size=10))
        assert np.allclose(m.Q.sum(axis=1), 0.0, atol=1e-12)
        assert np.all(m.eta > 0) and abs(m.eta.sum() - 1.0) < 1e-12
        assert abs(-np.dot(m.eta, np.diag(m.Q)) - 1.0) < 1e-12
        # detailed balance: eta_i Q_ij = eta_j Q_ji
        F = m.eta[:, None] * m.Q
        assert np.allclose(F, F.T, atol=1e-12)
        off = m.Q[~np.eye(4, dtype=bool)]
        assert np.all(off > 0)


def test_gtr_rejects_bad_theta():
    with pytest.raises(ValueError):
        build_gtr(np.zeros(9))
    with pytest.raises(ValueError):
        build_gtr(np.r_[np.zeros(9), np.inf])


def test_transition_probs_against_expm():
    for m in random_models(6, seed=1):
        for b in (0.0, 0.05, 0.3, 1.0, 2.0):
            assert np.allclose(transition_probs(m, b), expm(b * m.Q),
                               atol=1e-10)


def test_transition_probs_rows_are_distributions():
    for m in random_models(4, seed=2):
        for b in (0.0, 0.2, 1.7):
            P = transition_probs(m, b)
            assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(P >= 0.0)


def test_transition_probs_chapman_kolmogorov():
    for m in random_models(4, seed=4):
        P1 = transition_probs(m, 0.4)
        P2 = transition_probs(m, 0.7)
        P3 = transition_probs(m, 1.1)
        assert np.allclose(P1 @ P2, P3, atol=1e-11)


def test_transition_probs_stationarity():
    for m in random_models(4, seed=5):
        assert np.allclose(m.eta @ transition_probs(m, 0.9), m.eta,
                           atol=1e-12)


def test_transition_probs_rejects_bad_branch():
    m = build_jc69()
    for b in (-0.1, np.nan, np.inf):
        with pytest.raises(ValueError):
            transition_probs(m, b)


def test_transition_grads_db_matches_fd():
    for m in random_models(4, seed=6):
        for b in (0.1, 0.8):
            dP_db, _ = transition_grads(m, b)
            h = 1e-6
            fd = (transition_probs(m, b + h) - transition_probs(m, b - h)) / (2 * h)
            assert np.max(np.abs(dP_db - fd)) < 1e-8


def test_transition_grads_dtheta_matches_fd():
    rng = np.random.default_rng(7)
    for trial in range(4):
        theta = rng.normal(scale=1.0, size=10)
        m = build_gtr(theta)
        b = float(rng.uniform(0.05, 1.2))
        _, dP_dtheta = transition_grads(m, b)
        h = 1e-6
        for k in range(10):
            e = np.zeros(10)
            e[k] = h
            fd = (transition_probs(build_gtr(theta + e), b)
                  - transition_probs(build_gtr(theta - e), b)) / (2 * h)
            assert np.max(np.abs(dP_dtheta[k] - fd)) < 1e-6


def test_transition_grads_jc69_theta_block_empty():
    dP_db, dP_dtheta = transition_grads(build_jc69(), 0.5)
    assert dP_dtheta.shape == (0, 4, 4)
    assert dP_db.shape == (4, 4)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    for m in (build_jc69(), build_gtr(rng.normal(size=10))):
        path = str(tmp_path / f"{m.kind}.json")
        save_params(m, path)
        back = load_params(path)
        assert back.kind == m.kind
        assert np.array_equal(back.theta, m.theta)
        assert np.allclose(back.Q, m.Q, atol=1e-15)


def test_load_rejects_tampered_matrix(tmp_path):
    m = build_jc69()
    path = str(tmp_path / "p.json")
    save_params(m, path)
    text = open(path).read().replace("0.25", "0.26", 1)
    open(path, "w").write(text)
    with pytest.raises(ValueError):
        load_params(path)


def test_model_arrays_read_only():
    m = build_jc69()
    with pytest.raises(ValueError):
        m.Q[0, 0] = 1.0
    with pytest.raises(ValueError):
        m.eta[0] = 1.0
