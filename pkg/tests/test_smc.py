"""Sampler mechanics: weights, resampling, proposals, full sweeps.

The two enumeration tests at the bottom prove the marginal-likelihood
estimator exact in expectation at K = 1 and K = 2 (including the
multinomial resampling step) by summing over every possible outcome
path, with no Monte Carlo error.
"""

import math

import numpy as np
import pytest

from phylosmc import rng as rngmod
from phylosmc.evomodel import build_jc69
from phylosmc.oracle import GridSpec, exact_Z_grid
from phylosmc.simulate import random_tree, simulate_alignment
from phylosmc.smc import (EvalCounter, ProposalParams, csmc_weight,
                          default_params, ess, ess_log,
                          log_prior_new_branches, propose, propose_detail,
                          resample, resample_with_gumbels, run_csmc,
                          state_log_target)
from phylosmc.trees import initial_state, merge


def grid_setup(n=3, n_sites=6, data_seed=2, values=(0.1, 0.3), lam=10.0):
    model = build_jc69()
    tree = random_tree(n, seed=1, rate=20.0)
    aln = simulate_alignment(tree, model, n_sites, seed=data_seed)
    atoms = np.exp(-lam * np.asarray(values))
    grid = GridSpec(values=values, probs=tuple(atoms / atoms.sum()))
    params = default_params(lambda_bl=lam, grid=grid)
    return aln, model, params


def cont_setup(n=4, n_sites=8, seed=0):
    model = build_jc69()
    tree = random_tree(n, seed=seed, rate=8.0)
    aln = simulate_alignment(tree, model, n_sites, seed=seed + 1)
    return aln, model, default_params(lambda_bl=10.0)


def test_proposal_params_validation():
    with pytest.raises(ValueError):
        ProposalParams(psi=0.0, lambda_bl=0.0)
    with pytest.raises(ValueError):
        ProposalParams(psi=0.0, lambda_bl=np.inf)
    with pytest.raises(ValueError):
        ProposalParams(psi=0.0, loglik_scale=0.0)


def test_psi_scalar_and_per_rank():
    p = ProposalParams(psi=1.5)
    assert not p.per_rank_psi
    assert p.psi_at(1) == p.psi_at(7) == 1.5
    q = ProposalParams(psi=(0.1, 0.2, 0.3))
    assert q.per_rank_psi
    assert q.psi_at(1) == 0.1 and q.psi_at(3) == 0.3


def test_default_params_rate_matches_prior():
    p = default_params(lambda_bl=7.0)
    assert abs(math.exp(p.psi_at(1)) - 7.0) < 1e-12


def test_log_prior_continuous_hand_value():
    p = default_params(lambda_bl=2.0)
    # two Exp(2) branches of total length 0.9
    expect = 2 * math.log(2.0) - 2.0 * 0.9
    assert abs(log_prior_new_branches(p, 0.9, 2) - expect) < 1e-12


def test_log_prior_grid_hand_value():
    aln, model, params = grid_setup(values=(0.1, 0.3), lam=10.0)
    norm = math.log(math.exp(-1.0) + math.exp(-3.0))
    expect = -10.0 * 0.4 - 2 * norm
    assert abs(log_prior_new_branches(params, 0.4, 2) - expect) < 1e-12


def test_csmc_weight_equals_target_ratio_minus_proposal():
    for setup in (cont_setup, grid_setup):
        aln, model, params = setup()
        state = initial_state(aln, model)
        rng = rngmod.substream(0, rngmod.PROPOSE, 1, 0)
        res = propose_detail(state, params, rng, aln=aln)
        w = csmc_weight(state, res.state, res.log_q, params)
        ratio = (state_log_target(res.state, params)
                 - state_log_target(state, params))
        assert abs(w - (ratio - res.log_q)) < 1e-10


def test_csmc_weight_identical_one_site_sequences():
    # two identical single-site leaves, one merge, proposal equal to the
    # prior: weight = lik(merged) / (lik(a) lik(b)) = P_same / (1/16)
    model = build_jc69()
    from phylosmc.seqio import make_alignment
    aln = make_alignment(["a", "b"], ["A", "A"])
    params = default_params(lambda_bl=10.0)
    state = initial_state(aln, model)
    b = 0.25
    nxt = merge(state, 0, 1, b, b, aln=aln)
    # log_q with the pair factor (only one pair) and prior-matching rate
    log_q = log_prior_new_branches(params, 2 * b, 2)
    w = csmc_weight(state, nxt, log_q, params)
    from phylosmc.evomodel import transition_probs
    P = transition_probs(model, b)[:, 0]
    lik = float(model.eta @ (P * P))
    assert abs(w - math.log(lik / (0.25 * 0.25))) < 1e-12


def test_csmc_weight_requires_adjacent_ranks():
    aln, model, params = cont_setup()
    state = initial_state(aln, model)
    s1 = merge(state, 0, 1, 0.1, 0.1, aln=aln)
    s2 = merge(s1, 0, 1, 0.1, 0.1, aln=aln)
    with pytest.raises(ValueError):
        csmc_weight(state, s2, 0.0, params)


def test_resample_frequencies_match_weights():
    rng = np.random.default_rng(0)
    lw = np.log(np.array([0.1, 0.4, 0.2, 0.3]))
    counts = np.zeros(4)
    for _ in range(400):
        counts += np.bincount(resample(lw, rng), minlength=4)
    freq = counts / counts.sum()
    assert np.max(np.abs(freq - np.exp(lw))) < 0.02


def test_resample_shift_invariant_in_log_weights():
    lw = np.array([-1.0, -2.0, -0.5])
    a1 = resample(lw, rngmod.substream(3, rngmod.RESAMPLE, 2))
    a2 = resample(lw + 100.0, rngmod.substream(3, rngmod.RESAMPLE, 2))
    assert np.array_equal(a1, a2)


def test_resample_with_gumbels_returns_noise_matrix():
    lw = np.zeros(5)
    anc, g = resample_with_gumbels(lw, np.random.default_rng(1))
    assert anc.shape == (5,) and g.shape == (5, 5)
    assert np.array_equal(anc, np.argmax(lw[None, :] + g, axis=1))


def test_resample_rejects_all_zero_weights():
    with pytest.raises(ValueError):
        resample(np.full(3, -np.inf), np.random.default_rng(0))


def test_ess_bounds_and_examples():
    assert abs(ess(np.ones(8)) - 8.0) < 1e-12
    assert abs(ess(np.array([0.0, 0.0, 5.0])) - 1.0) < 1e-12
    w = np.array([1.0, 1.0, 2.0])
    assert abs(ess(w) - (w.sum() ** 2) / (w ** 2).sum()) < 1e-12
    assert abs(ess(w) - ess_log(np.log(w))) < 1e-12
    with pytest.raises(ValueError):
        ess(np.array([1.0, -0.1]))
    with pytest.raises(ValueError):
        ess_log(np.full(3, -np.inf))


def test_propose_pair_uniform_over_forest():
    aln, model, params = cont_setup(n=5)
    state = initial_state(aln, model)
    counts = {}
    for k in range(4000):
        res = propose_detail(state, params,
                             rngmod.substream(9, rngmod.PROPOSE, 1, k),
                             aln=aln)
        counts[(res.i, res.j)] = counts.get((res.i, res.j), 0) + 1
        assert res.n_pairs == 10
    freq = np.array([counts.get(p, 0) for p in
                     [(i, j) for i in range(5) for j in range(i + 1, 5)]])
    freq = freq / freq.sum()
    assert np.max(np.abs(freq - 0.1)) < 0.02


def test_propose_log_q_decomposition():
    aln, model, params = cont_setup(n=4)
    state = initial_state(aln, model)
    res = propose_detail(state, params,
                         rngmod.substream(5, rngmod.PROPOSE, 1, 0), aln=aln)
    assert abs(res.log_q - (-math.log(6) + res.log_q_branch)) < 1e-12


def test_propose_branch_distribution_continuous():
    aln, model, _ = cont_setup(n=3)
    params = default_params(lambda_bl=4.0)  # proposal rate = prior = 4
    state = initial_state(aln, model)
    draws = []
    for k in range(3000):
        res = propose_detail(state, params,
                             rngmod.substream(11, rngmod.PROPOSE, 1, k),
                             aln=aln)
        draws += [res.b_left, res.b_right]
    draws = np.array(draws)
    assert abs(draws.mean() - 0.25) < 0.01      # Exp(4) mean
    assert abs(np.median(draws) - math.log(2) / 4.0) < 0.01


def test_propose_branch_distribution_grid():
    aln, model, params = grid_setup()
    probs = np.asarray(params.grid.probs)
    state = initial_state(aln, model)
    vals = []
    for k in range(3000):
        res = propose_detail(state, params,
                             rngmod.substream(13, rngmod.PROPOSE, 1, k),
                             aln=aln)
        vals += [res.b_left, res.b_right]
    vals = np.array(vals)
    for v, p in zip(params.grid.values, probs):
        assert abs(np.mean(vals == v) - p) < 0.02


def test_propose_draw_count_independent_of_params():
    # common-random-number alignment: the same stream produces the same
    # next draw after a proposal regardless of the rate parameter
    aln, model, _ = cont_setup(n=4)
    state = initial_state(aln, model)
    after = []
    for psi in (0.5, 2.0):
        rng = rngmod.substream(21, rngmod.PROPOSE, 1, 0)
        propose(state, ProposalParams(psi=psi), rng, aln=aln)
        after.append(rng.random())
    assert after[0] == after[1]


def test_run_csmc_deterministic_and_thread_invariant():
    aln, model, params = cont_setup(n=5, n_sites=12)
    s1, z1 = run_csmc(aln, model, params, K=8, seed=42)
    s2, z2 = run_csmc(aln, model, params, K=8, seed=42)
    s4, z4 = run_csmc(aln, model, params, K=8, seed=42, threads=4)
    assert z1 == z2 == z4
    assert np.array_equal(s1.log_weights, s4.log_weights)
    assert np.array_equal(s1.ancestors, s4.ancestors)
    assert np.array_equal(s1.ess_by_rank, s4.ess_by_rank)
    _, z_other = run_csmc(aln, model, params, K=8, seed=43)
    assert z_other != z1


def test_run_csmc_bookkeeping():
    aln, model, params = cont_setup(n=5, n_sites=10)
    counter = EvalCounter()
    system, log_z = run_csmc(aln, model, params, K=6, seed=7,
                             counter=counter)
    R = 4
    assert system.ancestors.shape == (R - 1, 6)
    assert system.per_rank_log_avg.shape == (R,)
    assert abs(log_z - system.per_rank_log_avg.sum()) < 1e-12
    assert np.all(system.ess_by_rank >= 1.0 - 1e-9)
    assert np.all(system.ess_by_rank <= 6.0 + 1e-9)
    # exactly K likelihood evaluations per rank
    assert system.lik_evals_by_rank == [6, 6, 6, 6]
    for p in system.particles:
        assert p.n_trees == 1 and p.rank == R
    assert system.best_tree().n_leaves == 5


def test_run_csmc_rejects_bad_k():
    aln, model, params = cont_setup()
    with pytest.raises(ValueError):
        run_csmc(aln, model, params, K=0, seed=0)


def grid_outcomes(state, params):
    """Every (pair, atom, atom) extension of state with its proposal
    probability, merged state, and incremental log weight."""
    from itertools import combinations
    pairs = list(combinations(range(state.n_trees), 2))
    probs = np.asarray(params.grid.probs)
    out = []
    for (i, j) in pairs:
        for a, pa in enumerate(probs):
            for b, pb in enumerate(probs):
                log_q = (-math.log(len(pairs)) + math.log(pa) + math.log(pb))
                nxt = merge(state, i, j, params.grid.values[a],
                            params.grid.values[b], aln=None)
                w = csmc_weight(state, nxt, log_q, params)
                out.append((pa * pb / len(pairs), nxt, w))
    return out


def test_estimator_exact_in_expectation_k1():
    # n = 3: sum Zhat over all (rank-1 outcome) x (rank-2 outcome) paths,
    # weighted by proposal probabilities; no resampling randomness at K=1
    aln, model, params = grid_setup(n_sites=5, data_seed=4)
    exact = exact_Z_grid(aln, model, params.grid, params.lambda_bl)
    state0 = initial_state(aln, model)
    total = 0.0
    for p1, s1, w1 in grid_outcomes(state0, params):
        for p2, s2, w2 in grid_outcomes(s1, params):
            total += p1 * p2 * math.exp(w1) * math.exp(w2)
    assert abs(math.log(total) - exact) < 1e-10


def test_estimator_exact_in_expectation_k2_with_resampling():
    # n = 3, K = 2: enumerate both particles' rank-1 outcomes; for the
    # resampling step use the exact conditional mean of the next weight
    # average given each ancestor (linearity over the two iid slots)
    aln, model, params = grid_setup(n_sites=5, data_seed=4)
    exact = exact_Z_grid(aln, model, params.grid, params.lambda_bl)
    state0 = initial_state(aln, model)
    outcomes1 = grid_outcomes(state0, params)
    # T[o] = E[next-rank weight | ancestor ended at outcome o]
    T = []
    for _, s1, _ in outcomes1:
        T.append(sum(p2 * math.exp(w2)
                     for p2, _, w2 in grid_outcomes(s1, params)))
    total = 0.0
    for x, (px, _, wx) in enumerate(outcomes1):
        for y, (py, _, wy) in enumerate(outcomes1):
            w = np.array([math.exp(wx), math.exp(wy)])
            wbar1 = w.mean()
            W = w / w.sum()
            total += px * py * wbar1 * (W[0] * T[x] + W[1] * T[y])
    assert abs(math.log(total) - exact) < 1e-10
