"""Nested sampler: lookahead tables, cell selection, weights, sweeps."""

import math

import numpy as np
import pytest
from scipy.special import logsumexp

from phylosmc import rng as rngmod
from phylosmc.evomodel import build_jc69
from phylosmc.ncsmc import (build_lookahead, ncsmc_weight,
                            proper_weighting_check, run_ncsmc,
                            select_extension, select_extension_detail)
from phylosmc.oracle import GridSpec
from phylosmc.simulate import random_tree, simulate_alignment
from phylosmc.smc import (EvalCounter, csmc_weight, default_params,
                          run_csmc)
from phylosmc.trees import initial_state, merge


def setup(n=4, n_sites=8, seed=0, grid=None, lam=10.0):
    model = build_jc69()
    tree = random_tree(n, seed=seed, rate=10.0)
    aln = simulate_alignment(tree, model, n_sites, seed=seed + 1)
    params = default_params(lambda_bl=lam, grid=grid)
    return aln, model, params


def grid_of(values=(0.1, 0.3), lam=10.0):
    atoms = np.exp(-lam * np.asarray(values))
    return GridSpec(values=values, probs=tuple(atoms / atoms.sum()))


def test_lookahead_shapes_and_contents():
    aln, model, params = setup(n=5)
    state = initial_state(aln, model)
    table = build_lookahead(state, params, M=3,
                            rng=rngmod.substream(1, rngmod.PROPOSE, 1, 0),
                            aln=aln)
    assert table.L == 10 and table.M == 3
    assert table.log_potentials.shape == (10, 3)
    assert len(table.states) == 10 and len(table.states[0]) == 3
    assert table.prev_state is state
    for p, (i, j) in enumerate(table.pairs):
        for m in range(3):
            cand = table.states[p][m]
            assert cand.rank == 1
            # potential = one-merge weight (branch part only) + log L
            w = csmc_weight(state, cand, table.log_q_branch[p, m], params)
            assert abs(table.log_potentials[p, m] - (w + math.log(10))) < 1e-12


def test_lookahead_validation():
    aln, model, params = setup(n=3)
    state = initial_state(aln, model)
    rng = rngmod.substream(1, rngmod.PROPOSE, 1, 0)
    with pytest.raises(ValueError):
        build_lookahead(state, params, M=0, rng=rng, aln=aln)
    done = merge(merge(state, 0, 1, 0.1, 0.1, aln=aln), 0, 1, 0.1, 0.1,
                 aln=aln)
    with pytest.raises(ValueError):
        build_lookahead(done, params, M=1, rng=rng, aln=aln)


def test_ncsmc_weight_is_log_mean_potential():
    aln, model, params = setup(n=4)
    state = initial_state(aln, model)
    table = build_lookahead(state, params, M=2,
                            rng=rngmod.substream(2, rngmod.PROPOSE, 1, 0),
                            aln=aln)
    expect = logsumexp(table.log_potentials) - math.log(table.L * table.M)
    assert abs(ncsmc_weight(table) - expect) < 1e-12


def test_selection_frequencies_proportional_to_potentials():
    aln, model, params = setup(n=3, n_sites=4)
    state = initial_state(aln, model)
    table = build_lookahead(state, params, M=2,
                            rng=rngmod.substream(3, rngmod.PROPOSE, 1, 0),
                            aln=aln)
    probs = np.exp(table.log_potentials.ravel()
                   - logsumexp(table.log_potentials))
    counts = np.zeros(table.L * table.M)
    for k in range(4000):
        p, m, _ = select_extension_detail(
            table, rngmod.substream(4, rngmod.SELECT, 1, k))
        counts[p * table.M + m] += 1
    freq = counts / counts.sum()
    assert np.max(np.abs(freq - probs)) < 0.025


def test_select_extension_returns_table_state():
    aln, model, params = setup(n=4)
    state = initial_state(aln, model)
    table = build_lookahead(state, params, M=2,
                            rng=rngmod.substream(5, rngmod.PROPOSE, 1, 0),
                            aln=aln)
    i, j, nxt = select_extension(table,
                                 rngmod.substream(6, rngmod.SELECT, 1, 0))
    assert (i, j) in table.pairs
    assert any(nxt is s for row in table.states for s in row)


def test_run_ncsmc_deterministic_and_thread_invariant():
    aln, model, params = setup(n=5, n_sites=10)
    s1, z1 = run_ncsmc(aln, model, params, K=6, M=2, seed=11)
    s2, z2 = run_ncsmc(aln, model, params, K=6, M=2, seed=11)
    s4, z4 = run_ncsmc(aln, model, params, K=6, M=2, seed=11, threads=4)
    assert z1 == z2 == z4
    assert np.array_equal(s1.log_weights, s4.log_weights)
    assert np.array_equal(s1.ancestors, s4.ancestors)
    assert np.array_equal(s1.max_log_potential_by_rank,
                          s4.max_log_potential_by_rank)


def test_run_ncsmc_eval_counts_exact():
    # K particles each score C(f, 2) pairs with M draws at every rank
    aln, model, params = setup(n=5, n_sites=6)
    counter = EvalCounter()
    K, M = 4, 3
    system, _ = run_ncsmc(aln, model, params, K=K, M=M, seed=1,
                          counter=counter)
    expect = [K * (f * (f - 1) // 2) * M for f in (5, 4, 3, 2)]
    assert system.lik_evals_by_rank == expect


def test_run_ncsmc_m1_weight_structure():
    # with M = 1 and L = 1 (two trees left), the nested weight reduces to
    # the plain weight of the single candidate
    aln, model, params = setup(n=3, n_sites=5)
    state = initial_state(aln, model)
    table = build_lookahead(merge(state, 0, 1, 0.2, 0.2, aln=aln), params,
                            M=1, rng=rngmod.substream(7, rngmod.PROPOSE, 2, 0),
                            aln=aln)
    assert table.L == 1
    w = csmc_weight(table.prev_state, table.states[0][0],
                    table.log_q_branch[0, 0], params)
    assert abs(ncsmc_weight(table) - w) < 1e-12


def test_ncsmc_estimator_exact_in_expectation_k1_m1_grid():
    # same telescoping as the plain sampler: enumerate all outcome paths
    # of the K = 1, M = 1 nested sweep on a 3-taxon grid problem
    from phylosmc.oracle import exact_Z_grid
    grid = grid_of()
    aln, model, params = setup(n=3, n_sites=5, grid=grid)
    exact = exact_Z_grid(aln, model, grid, params.lambda_bl)
    state0 = initial_state(aln, model)
    probs = np.asarray(params.grid.probs)

    def outcomes(state):
        """(prob, selected_state, ncsmc_weight) per table realization.

        With M = 1 a table realization assigns one (a, b) atom pair per
        pair row; selection then picks a row with prob proportional to
        its potential."""
        from itertools import combinations, product as iproduct
        pairs = list(combinations(range(state.n_trees), 2))
        L = len(pairs)
        out = []
        for assign in iproduct(range(len(probs)), repeat=2 * L):
            p_table = 1.0
            pots = np.zeros(L)
            cands = []
            for row, (i, j) in enumerate(pairs):
                a, b = assign[2 * row], assign[2 * row + 1]
                p_table *= probs[a] * probs[b]
                lqb = math.log(probs[a]) + math.log(probs[b])
                cand = merge(state, i, j, params.grid.values[a],
                             params.grid.values[b])
                pots[row] = csmc_weight(state, cand, lqb, params) \
                    + math.log(L)
                cands.append(cand)
            w = math.exp(logsumexp(pots) - math.log(L))
            sel = np.exp(pots - logsumexp(pots))
            for row in range(L):
                out.append((p_table * sel[row], cands[row], w))
        return out

    total = 0.0
    for p1, s1, w1 in outcomes(state0):
        for p2, _, w2 in outcomes(s1):
            total += p1 * p2 * w1 * w2
    assert abs(math.log(total) - exact) < 1e-10


def test_proper_weighting_check_constant_h():
    grid = grid_of()
    aln, model, params = setup(n=4, n_sites=6, grid=grid)
    state = initial_state(aln, model)
    est, exact, z = proper_weighting_check(state, params, lambda s: 1.0,
                                           reps=20000, seed=3, M=2, aln=aln)
    assert abs(z) < 4.0
    assert abs(est - exact) / exact < 0.05


def test_proper_weighting_check_statistic_h():
    grid = grid_of()
    aln, model, params = setup(n=4, n_sites=6, grid=grid)
    state = initial_state(aln, model)
    est, exact, z = proper_weighting_check(
        state, params, lambda s: s.sum_branch / s.n_edges,
        reps=20000, seed=5, M=1, aln=aln)
    assert abs(z) < 4.0


def test_proper_weighting_check_requires_grid():
    aln, model, params = setup(n=3)
    state = initial_state(aln, model)
    with pytest.raises(ValueError):
        proper_weighting_check(state, params, lambda s: 1.0, reps=10,
                               aln=aln)
    grid = grid_of()
    _, _, gp = setup(n=3, grid=grid)
    with pytest.raises(ValueError):
        proper_weighting_check(state, gp, lambda s: 1.0, reps=1, aln=aln)


def test_ncsmc_matches_csmc_law_at_m1_same_exactness():
    # both samplers are unbiased for the same normalizer; on a tiny grid
    # problem their Monte Carlo means should agree within joint error
    from phylosmc.oracle import exact_Z_grid
    grid = grid_of()
    aln, model, params = setup(n=3, n_sites=4, grid=grid)
    exact = exact_Z_grid(aln, model, grid, params.lambda_bl)
    reps = 400
    rc = np.array([math.exp(run_csmc(aln, model, params, K=4, seed=s)[1]
                            - exact) for s in range(reps)])
    rn = np.array([math.exp(run_ncsmc(aln, model, params, K=4, M=1,
                                      seed=s)[1] - exact)
                   for s in range(reps)])
    for r in (rc, rn):
        se = r.std(ddof=1) / math.sqrt(reps)
        assert abs(r.mean() - 1.0) < 4 * se
