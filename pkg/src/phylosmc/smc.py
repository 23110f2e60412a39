"""Combinatorial SMC over phylogenetic forests.

One sweep runs ranks 1..R = N-1. Each rank resamples ancestors from the
previous incremental weights (skipped at rank 1, where weights start
uniform), proposes a uniformly chosen pair merge with two exponential
branch lengths, and weights the move by the target ratio under the
natural forest extension divided by the proposal density. The marginal
likelihood estimate is the product over ranks of the weight averages,
accumulated in log space.

The target of a state is its forest log-likelihood (each tree pruned
independently) plus the exponential branch-length prior; the uniform
topology prior is constant per rank and absorbed by normalization. The
backward correction density nu is the constant 1: particle paths are
read as ordered jump chains, and the oracle enumerates the same ordered
sequences, so unbiasedness comparisons are exact under this convention.

Reproducibility: every draw comes from a counter-based stream keyed by
(seed, purpose, rank, particle), and cross-particle reductions run in a
fixed order, so results are identical for any --threads setting. All
weighted categorical draws (resampling here, cell selection in the
nested sampler) use the Gumbel-argmax form, which lets the relaxed
training estimators reuse the same noise and hit the same hard choices.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .evomodel import RateModel
from .oracle import GridSpec
from .seqio import Alignment
from .trees import PartialState, initial_state, merge


class EvalCounter:
    """Thread-safe per-rank tally of candidate likelihood evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rank = 0
        self.counts = {}

    def set_rank(self, rank: int):
        self._rank = rank
        self.counts.setdefault(rank, 0)

    def add(self, n: int = 1):
        with self._lock:
            self.counts[self._rank] = self.counts.get(self._rank, 0) + n

    def by_rank(self) -> list:
        return [self.counts[r] for r in sorted(self.counts)]


@dataclass(frozen=True)
class ProposalParams:
    """Proposal and prior parameters shared by both samplers.

    psi is the log of the exponential branch-proposal rate, a scalar or
    a per-rank tuple. phi (discrete-proposal parameters) is reserved:
    pairs are uniform in this version. grid, when set, replaces the
    continuous branch proposal by the finite GridSpec so the oracle's
    exact normalizer applies. loglik_scale rescales the likelihood part
    of the target (site-minibatch compensation); the branch prior is
    never scaled because it does not factor over sites.
    """

    psi: object
    lambda_bl: float = 10.0
    phi: object = None
    grid: Optional[GridSpec] = None
    loglik_scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda_bl) and self.lambda_bl > 0):
            raise ValueError("lambda_bl must be positive and finite")
        if self.loglik_scale <= 0:
            raise ValueError("loglik_scale must be positive")

    def psi_at(self, rank: int) -> float:
        if np.ndim(self.psi) == 0:
            return float(self.psi)
        return float(self.psi[rank - 1])

    @property
    def per_rank_psi(self) -> bool:
        return np.ndim(self.psi) != 0


def default_params(lambda_bl: float = 10.0, **kw) -> ProposalParams:
    """Proposal rate initialized at the prior rate, so the branch prior
    and proposal densities cancel in the initial weights."""
    return ProposalParams(psi=math.log(lambda_bl), lambda_bl=lambda_bl, **kw)


@lru_cache(maxsize=64)
def _grid_tables(values: tuple, probs: tuple, lambda_bl: float):
    """(atom log-normalizer, cumulative probs, log probs) for one grid.

    Cached because the samplers hit this once per merge and the arrays
    never change for a given grid; the arrays are frozen read-only."""
    lognorm = float(logsumexp(-lambda_bl * np.asarray(values)))
    cum = np.cumsum(np.asarray(probs))
    cum.setflags(write=False)
    logp = np.log(np.asarray(probs))
    logp.setflags(write=False)
    return lognorm, cum, logp


def _atom_lognorm(params: ProposalParams) -> float:
    return _grid_tables(params.grid.values, params.grid.probs,
                        params.lambda_bl)[0]


def log_prior_new_branches(params: ProposalParams, total_b: float,
                           n_new: int) -> float:
    """Log prior mass of n_new branches with total length total_b."""
    if params.grid is None:
        return n_new * math.log(params.lambda_bl) - params.lambda_bl * total_b
    return -params.lambda_bl * total_b - n_new * _atom_lognorm(params)


def state_log_target(state: PartialState, params: ProposalParams) -> float:
    """Log of the unnormalized target: scaled forest log-likelihood plus
    the branch prior over every edge in the forest."""
    return params.loglik_scale * state.total_loglik \
        + log_prior_new_branches(params, state.sum_branch, state.n_edges)


def csmc_weight(prev: PartialState, next_state: PartialState, log_q: float,
                params: ProposalParams) -> float:
    """Log incremental weight of one merge.

    log w = [log pi(next) - log pi(prev)] + log nu(prev) - log_q with
    nu identically 1. Computed from the cached per-state totals: the
    likelihoods of untouched trees and the priors of old branches cancel
    in the ratio, leaving the merged-tree likelihood difference and the
    two new branch priors.
    """
    if next_state.rank != prev.rank + 1:
        raise ValueError("states are not one merge apart")
    d_lik = next_state.total_loglik - prev.total_loglik
    d_b = next_state.sum_branch - prev.sum_branch
    n_new = next_state.n_edges - prev.n_edges
    return params.loglik_scale * d_lik \
        + log_prior_new_branches(params, d_b, n_new) - log_q


def resample_with_gumbels(log_weights: np.ndarray, rng: np.random.Generator):
    """K categorical ancestor draws by Gumbel-argmax; returns the noise
    matrix too so relaxed estimators can reuse it."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if not np.any(np.isfinite(lw)):
        raise ValueError("all resampling weights are zero")
    g = rngmod.gumbel(rng, (lw.shape[0], lw.shape[0]))
    anc = np.argmax(lw[None, :] + g, axis=1)
    return anc, g


def resample(log_weights, rng: np.random.Generator) -> np.ndarray:
    """K i.i.d. multinomial ancestor indices from normalized weights."""
    anc, _ = resample_with_gumbels(log_weights, rng)
    return anc


def ess_log(log_weights) -> float:
    """Effective sample size (sum w)^2 / sum w^2 from log-weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if not np.any(np.isfinite(lw)):
        raise ValueError("all weights are zero")
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def ess(weights) -> float:
    """Same as ess_log but takes plain nonnegative weights."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    with np.errstate(divide="ignore"):
        return ess_log(np.log(w))


@lru_cache(maxsize=None)
def _pairs(f: int) -> tuple:
    """All (i, j), i < j, over a forest of f trees, lexicographic."""
    return tuple(combinations(range(f), 2))


@dataclass
class ProposeResult:
    state: PartialState
    log_q: float
    i: int
    j: int
    b_left: float
    b_right: float
    log_q_branch: float
    n_pairs: int


def _draw_branches(params: ProposalParams, rank: int,
                   rng: np.random.Generator):
    """Two branch lengths and their proposal log-density.

    Continuous mode inverts the exponential CDF on two uniforms, so the
    lengths are reparameterizable with db/dpsi = -b. Grid mode draws two
    atoms by inverse CDF on the grid probabilities. The number of
    uniforms consumed never depends on parameter values.
    """
    u = rng.random(2)
    if params.grid is None:
        rate = math.exp(params.psi_at(rank))
        b = -np.log1p(-u) / rate
        b = np.maximum(b, 1e-300)
        log_q_branch = float(2.0 * params.psi_at(rank) - rate * b.sum())
        return float(b[0]), float(b[1]), log_q_branch
    _, cum, logp = _grid_tables(params.grid.values, params.grid.probs,
                                params.lambda_bl)
    idx = np.minimum(np.searchsorted(cum, u, side="right"), cum.size - 1)
    b_l = params.grid.values[idx[0]]
    b_r = params.grid.values[idx[1]]
    return float(b_l), float(b_r), float(logp[idx[0]] + logp[idx[1]])


def propose_detail(state: PartialState, params: ProposalParams,
                   rng: np.random.Generator, aln: Alignment = None,
                   counter: EvalCounter = None,
                   want_grad: bool = False) -> ProposeResult:
    f = state.n_trees
    if f < 2:
        raise ValueError("state is complete; nothing to merge")
    pairs = _pairs(f)
    pair_idx = int(rng.integers(len(pairs)))
    i, j = pairs[pair_idx]
    b_l, b_r, log_q_branch = _draw_branches(params, state.rank + 1, rng)
    new_state = merge(state, i, j, b_l, b_r, aln=aln, counter=counter,
                      want_grad=want_grad)
    log_q = -math.log(len(pairs)) + log_q_branch
    return ProposeResult(state=new_state, log_q=log_q, i=i, j=j,
                         b_left=b_l, b_right=b_r,
                         log_q_branch=log_q_branch, n_pairs=len(pairs))


def propose(state: PartialState, params: ProposalParams,
            rng: np.random.Generator, aln: Alignment = None):
    """One proposal move: uniform pair, two branch lengths.

    Returns (new_state, log_q_density) where the density covers both the
    pair choice and the branch lengths.
    """
    res = propose_detail(state, params, rng, aln=aln)
    return res.state, res.log_q


@dataclass
class ParticleSystem:
    """Final-rank particles with the sweep's bookkeeping."""

    particles: list
    log_weights: np.ndarray
    ancestors: np.ndarray          # (R-1, K), 0-based indices
    per_rank_log_avg: np.ndarray   # (R,)
    rng_seed: int
    ess_by_rank: np.ndarray        # (R,)
    lik_evals_by_rank: Optional[list] = None

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.log_weights))

    def best_tree(self):
        return self.particles[self.best_index].trees[0]


def _map_particles(worker, K: int, pool: Optional[ThreadPoolExecutor]):
    if pool is None:
        return [worker(k) for k in range(K)]
    return list(pool.map(worker, range(K)))


def run_csmc(aln: Alignment, model: RateModel, params: ProposalParams,
             K: int, seed: int, threads: int = 1,
             counter: EvalCounter = None, tape=None):
    """One CSMC sweep; returns (ParticleSystem, log Zhat).

    seed keys the counter-based streams (see module docstring). tape,
    when given, receives one record per rank with every intermediate the
    variational estimators need; tape.want_grad turns on the per-merge
    gradient caches.
    """
    if K < 1:
        raise ValueError("need at least one particle")
    R = aln.n_taxa - 1
    want_grad = bool(tape is not None and getattr(tape, "want_grad", False))
    state0 = initial_state(aln, model, want_grad=want_grad)
    states = [state0] * K
    lw = None
    ancestors = np.zeros((max(R - 1, 0), K), dtype=np.int64)
    per_rank_log_avg = np.zeros(R)
    ess_by_rank = np.zeros(R)
    log_z = 0.0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(1, R + 1):
            if counter is not None:
                counter.set_rank(r)
            if r == 1:
                anc = np.arange(K)
                gum = None
            else:
                anc, gum = resample_with_gumbels(
                    lw, rngmod.substream(seed, rngmod.RESAMPLE, r))
                ancestors[r - 2] = anc
            prev_states = states

            def work(k):
                stream = rngmod.substream(seed, rngmod.PROPOSE, r, k)
                res = propose_detail(prev_states[anc[k]], params, stream,
                                     aln=aln, counter=counter,
                                     want_grad=want_grad)
                return res, csmc_weight(prev_states[anc[k]], res.state,
                                        res.log_q, params)

            results = _map_particles(work, K, pool)
            states = [res.state for res, _ in results]
            lw = np.array([w for _, w in results])
            per_rank_log_avg[r - 1] = logsumexp(lw) - math.log(K)
            ess_by_rank[r - 1] = ess_log(lw)
            log_z += per_rank_log_avg[r - 1]
            if tape is not None:
                tape.record_rank(rank=r, prev_states=prev_states,
                                 states=states, anc=anc, gumbels=gum, lw=lw,
                                 details=[res for res, _ in results])
    finally:
        if pool is not None:
            pool.shutdown()
    system = ParticleSystem(
        particles=states, log_weights=lw, ancestors=ancestors,
        per_rank_log_avg=per_rank_log_avg, rng_seed=seed,
        ess_by_rank=ess_by_rank,
        lik_evals_by_rank=counter.by_rank() if counter is not None else None)
    return system, float(log_z)
