"""Variational objectives and training over the SMC samplers.

The objective is the log marginal likelihood estimate of a sweep, an
evidence lower bound in expectation by Jensen, maximized over the
branch-proposal rate psi and, optionally, the substitution parameters
theta. Gradients are assembled from per-merge quantities the sweep
caches as it runs: the derivative of each merged tree's log-likelihood
with respect to theta, and with respect to its branch lengths bucketed
by the rank that created them, which becomes a psi derivative through
the reparameterization b = -log(1-u) * exp(-psi), so db/dpsi = -b.

Two discrete-choice treatments are available. drop_discrete
differentiates only the density terms along the realized sweep,
treating resampling and selection outcomes as constants. gumbel_softmax
reuses the exact Gumbel noise that made each hard choice to build a
tempered softmax relaxation: plain sweeps relax the resampling mixture
(the previous-state target value in each weight becomes a softmax
average, with the cross-rank chain handled by a reverse accumulation
over ranks), and nested sweeps relax the table-cell selection (each
weight gains the gap between the chosen cell's target value and the
tempered table average; choices themselves stay hard). As the
temperature drops to zero both relaxations collapse onto the
drop_discrete estimator exactly, softmax saturation making the match
bitwise at temperatures near 1e-3.

Site minibatching rescales only the likelihood term of the target by
total/batch sites; the branch prior does not factor over sites and is
left alone. One epoch is ceil(1/batch_fraction) optimizer steps, each
on a fresh without-replacement site draw.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from types import SimpleNamespace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .evomodel import RateModel, build_gtr, build_jc69
from .ncsmc import build_lookahead, ncsmc_weight, run_ncsmc, select_extension_detail
from .seqio import Alignment
from .smc import (ProposalParams, ess_log, propose_detail, run_csmc,
                  state_log_target)
from .trees import PartialState, initial_state

OBJECTIVES = ("vcsmc", "vncsmc")
ESTIMATORS = ("drop_discrete", "gumbel_softmax")


@dataclass
class TrainConfig:
    """Knobs for train(); defaults give plain VCSMC with learned psi."""

    objective: str = "vcsmc"
    estimator: str = "drop_discrete"
    K: int = 16
    M: int = 1
    epochs: int = 100
    learning_rate: float = 0.01
    batch_fraction: float = 1.0
    gumbel_temperature: float = 0.5
    seed: int = 0
    lambda_bl: float = 10.0
    learn_branch_rate: bool = True
    learn_model: bool = False
    model_kind: str = "jc69"
    theta_init: Optional[tuple] = None
    psi_init: Optional[float] = None
    per_rank_psi: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError("objective must be one of %s" % (OBJECTIVES,))
        if self.estimator not in ESTIMATORS:
            raise ValueError("estimator must be one of %s" % (ESTIMATORS,))
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be positive")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must be in (0, 1]")
        if self.learning_rate <= 0 or self.gumbel_temperature <= 0:
            raise ValueError("learning_rate and gumbel_temperature must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.model_kind not in ("jc69", "gtr"):
            raise ValueError("model_kind must be jc69 or gtr")
        if self.learn_model and self.model_kind == "jc69":
            raise ValueError("jc69 has no free parameters to learn")


@dataclass
class ElboTrace:
    """Per-epoch training records; field names match the metrics output."""

    records: list = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=np.float64)

    def moving_average(self, key: str, window: int = 5) -> np.ndarray:
        col = self.column(key)
        out = np.empty_like(col)
        for i in range(col.size):
            lo = max(0, i - window + 1)
            out[i] = col[lo:i + 1].mean()
        return out


@dataclass
class TrainResult:
    trace: ElboTrace
    model: RateModel
    params: ProposalParams
    best_tree: object
    final_log_zhat: float
    final_system: object


class SweepTape:
    """Per-rank record sink passed to the samplers; want_grad switches on
    the per-merge derivative caches inside the tree states."""

    def __init__(self, want_grad: bool = True):
        self.want_grad = want_grad
        self.ranks = []

    def record_rank(self, **kw):
        self.ranks.append(SimpleNamespace(**kw))


def _check_grad_supported(params: ProposalParams):
    if params.grid is not None:
        raise ValueError("gradients need the continuous branch proposal")


def _pi_dot(state: PartialState, params: ProposalParams, n_theta: int,
            memo: dict) -> np.ndarray:
    """d log target / d(psi_1..psi_R, theta) as one flat vector.

    The psi block is per-rank regardless of how psi is tied; callers
    collapse it by summing when psi is a scalar.
    """
    key = id(state)
    hit = memo.get(key)
    if hit is not None:
        return hit
    n_ranks = state.n_ranks
    psi_vec = np.zeros(n_ranks)
    th = np.zeros(n_theta)
    for cache in state.caches:
        psi_vec += cache.g_psi
        if n_theta:
            th += cache.g_theta
    psi_vec *= params.loglik_scale
    psi_vec += params.lambda_bl * np.asarray(state.sum_branch_by_rank)
    out = np.concatenate([psi_vec, params.loglik_scale * th])
    memo[key] = out
    return out


def _q_dot(rank: int, n_ranks: int, n_theta: int) -> np.ndarray:
    """d log q / d(psi, theta) for one merge proposed at the given rank.

    Along the reparameterized path each branch density contributes
    psi + log u, hence derivative 1 per branch, 2 per merge.
    """
    out = np.zeros(n_ranks + n_theta)
    out[rank - 1] = 2.0
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def _collapse(vec: np.ndarray, params: ProposalParams, n_ranks: int):
    psi_block = vec[:n_ranks]
    theta_block = vec[n_ranks:]
    psi_grad = psi_block.copy() if params.per_rank_psi else float(psi_block.sum())
    return {"psi": psi_grad,
            "theta": theta_block.copy() if theta_block.size else None}


# ---------------------------------------------------------------------------
# plain sweeps

def _csmc_grad(tape: SweepTape, params: ProposalParams, n_theta: int,
               relaxed: bool, tau: float) -> np.ndarray:
    recs = tape.ranks
    R = len(recs)
    n_ranks = recs[0].states[0].n_ranks
    memo = {}
    pi_memo = {}

    def pi_of(s):
        v = pi_memo.get(id(s))
        if v is None:
            v = state_log_target(s, params)
            pi_memo[id(s)] = v
        return v

    omegas = [_softmax(rec.lw) for rec in recs]
    # alphas[r][k]: mixture over the rank-r record's previous particles.
    alphas = []
    for rec in recs:
        K = len(rec.states)
        a = np.zeros((K, len(rec.prev_states)))
        if relaxed and rec.gumbels is not None:
            prev_lw = recs[rec.rank - 2].lw
            for k in range(K):
                a[k] = _softmax((prev_lw + rec.gumbels[k]) / tau)
        else:
            a[np.arange(K), rec.anc] = 1.0
        alphas.append(a)

    # Reverse accumulation of d logZhat / d lw_r through the relaxed
    # resampling mixtures; hard rows contribute nothing across ranks.
    lams = [None] * R
    lams[R - 1] = omegas[R - 1]
    for r in range(R - 1, 0, -1):
        rec = recs[r]
        back = np.zeros(len(recs[r - 1].states))
        if relaxed and rec.gumbels is not None:
            pi_prev = np.array([pi_of(s) for s in rec.prev_states])
            a = alphas[r]
            m = a @ pi_prev
            back = -(1.0 / tau) * ((lams[r] * a.T).T * (pi_prev[None, :] - m[:, None])).sum(axis=0)
        lams[r - 1] = omegas[r - 1] + back

    grad = np.zeros(n_ranks + n_theta)
    for r, rec in enumerate(recs):
        qd = _q_dot(rec.rank, n_ranks, n_theta)
        prev_dots = None
        for k, s in enumerate(rec.states):
            term = _pi_dot(s, params, n_theta, memo) - qd
            a = alphas[r][k]
            if relaxed and rec.gumbels is not None:
                if prev_dots is None:
                    prev_dots = np.stack([_pi_dot(p, params, n_theta, memo)
                                          for p in rec.prev_states])
                term = term - a @ prev_dots
            else:
                term = term - _pi_dot(rec.prev_states[rec.anc[k]], params,
                                      n_theta, memo)
            grad += lams[r][k] * term
    return grad


def _csmc_sweep_relaxed(aln: Alignment, model: RateModel,
                        params: ProposalParams, K: int, seed: int,
                        tau: float, tape: SweepTape):
    """Forward pass of the tempered-resampling estimator.

    Identical stream consumption to run_csmc; only the weight formula
    replaces the realized previous target value by the softmax mixture.
    """
    R = aln.n_taxa - 1
    state0 = initial_state(aln, model, want_grad=tape.want_grad)
    states = [state0] * K
    pis = np.full(K, state_log_target(state0, params))
    lw = None
    log_z = 0.0
    per_rank_log_avg = np.zeros(R)
    ess_by_rank = np.zeros(R)
    for r in range(1, R + 1):
        if r == 1:
            anc = np.arange(K)
            gum = None
            mix = pis
        else:
            g_rng = rngmod.substream(seed, rngmod.RESAMPLE, r)
            gum = rngmod.gumbel(g_rng, (K, K))
            anc = np.argmax(lw[None, :] + gum, axis=1)
            alpha = np.stack([_softmax((lw + gum[k]) / tau) for k in range(K)])
            mix = alpha @ pis
        prev_states = states
        new_states = []
        new_lw = np.zeros(K)
        new_pis = np.zeros(K)
        details = []
        for k in range(K):
            stream = rngmod.substream(seed, rngmod.PROPOSE, r, k)
            res = propose_detail(prev_states[anc[k]], params, stream, aln=aln,
                                 want_grad=tape.want_grad)
            new_pis[k] = state_log_target(res.state, params)
            new_lw[k] = new_pis[k] - mix[k] - res.log_q
            new_states.append(res.state)
            details.append(res)
        tape.record_rank(rank=r, prev_states=prev_states, states=new_states,
                         anc=anc, gumbels=gum, lw=new_lw, details=details)
        states, lw, pis = new_states, new_lw, new_pis
        per_rank_log_avg[r - 1] = logsumexp(lw) - math.log(K)
        ess_by_rank[r - 1] = ess_log(lw)
        log_z += per_rank_log_avg[r - 1]
    system = SimpleNamespace(particles=states, log_weights=lw,
                             per_rank_log_avg=per_rank_log_avg,
                             ess_by_rank=ess_by_rank, rng_seed=seed)
    return system, float(log_z)


# ---------------------------------------------------------------------------
# nested sweeps

def _ncsmc_grad(tape: SweepTape, params: ProposalParams, n_theta: int,
                relaxed: bool, tau: float) -> np.ndarray:
    recs = tape.ranks
    n_ranks = recs[0].states[0].n_ranks
    memo = {}

    def cell_dots(rec, k):
        tab = rec.tables[k]
        flat = [s for row in tab.states for s in row]
        return np.stack([_pi_dot(s, params, n_theta, memo) for s in flat])

    def mdot_prev(r, a):
        """Gradient of the value standing in for the previous target:
        either the hard selected state or the tempered table average."""
        if r == 0:
            rec0 = recs[0]
            return _pi_dot(rec0.prev_states[0], params, n_theta, memo)
        rec = recs[r - 1]
        if not relaxed:
            return _pi_dot(rec.states[a], params, n_theta, memo)
        tab = rec.tables[a]
        pots = tab.log_potentials.ravel()
        beta = _softmax((pots + rec.cell_gumbels[a]) / tau)
        dots = cell_dots(rec, a)
        qd = _q_dot(rec.rank, n_ranks, n_theta)
        dpots = dots - qd[None, :]
        pis = np.array([state_log_target(s, params)
                        for row in tab.states for s in row])
        mix = float(beta @ pis)
        mean_dpot = beta @ dpots
        cross = (1.0 / tau) * ((beta * (pis - mix)) @ (dpots - mean_dpot[None, :]))
        return beta @ dots + cross

    grad = np.zeros(n_ranks + n_theta)
    for r, rec in enumerate(recs):
        omega = _softmax(rec.lw)
        qd = _q_dot(rec.rank, n_ranks, n_theta)
        for k in range(len(rec.states)):
            sigma = _softmax(rec.tables[k].log_potentials.ravel())
            dots = cell_dots(rec, k)
            direct = sigma @ (dots - qd[None, :])
            grad += omega[k] * (direct - mdot_prev(r, rec.anc[k]))
    return grad


def _ncsmc_sweep_relaxed(aln: Alignment, model: RateModel,
                         params: ProposalParams, K: int, M: int, seed: int,
                         tau: float, tape: SweepTape):
    """Forward pass of the tempered-selection nested estimator.

    Branch draws, cell choices and resampling all stay hard; each
    particle's weight carries the gap between its ancestor's selected
    cell target value and that table's tempered average, which vanishes
    as tau drops to zero.
    """
    R = aln.n_taxa - 1
    state0 = initial_state(aln, model, want_grad=tape.want_grad)
    states = [state0] * K
    deltas = np.zeros(K)
    lw = None
    log_z = 0.0
    per_rank_log_avg = np.zeros(R)
    ess_by_rank = np.zeros(R)
    for r in range(1, R + 1):
        if r == 1:
            anc = np.arange(K)
            gum = None
        else:
            g_rng = rngmod.substream(seed, rngmod.RESAMPLE, r)
            gum = rngmod.gumbel(g_rng, (K, K))
            anc = np.argmax(lw[None, :] + gum, axis=1)
        prev_states = states
        tables, cells, cgums = [], [], []
        new_states = []
        new_lw = np.zeros(K)
        new_deltas = np.zeros(K)
        for k in range(K):
            table = build_lookahead(
                prev_states[anc[k]], params, M,
                rngmod.substream(seed, rngmod.PROPOSE, r, k), aln=aln,
                want_grad=tape.want_grad)
            p, m, h = select_extension_detail(
                table, rngmod.substream(seed, rngmod.SELECT, r, k))
            pots = table.log_potentials.ravel()
            beta = _softmax((pots + h) / tau)
            pis = np.array([state_log_target(s, params)
                            for row in table.states for s in row])
            sel_flat = p * table.M + m
            new_deltas[k] = pis[sel_flat] - float(beta @ pis)
            new_lw[k] = ncsmc_weight(table) + deltas[anc[k]]
            new_states.append(table.states[p][m])
            tables.append(table)
            cells.append((p, m))
            cgums.append(h)
        tape.record_rank(rank=r, prev_states=prev_states, states=new_states,
                         anc=anc, gumbels=gum, lw=new_lw, tables=tables,
                         cells=cells, cell_gumbels=cgums)
        states, lw, deltas = new_states, new_lw, new_deltas
        per_rank_log_avg[r - 1] = logsumexp(lw) - math.log(K)
        ess_by_rank[r - 1] = ess_log(lw)
        log_z += per_rank_log_avg[r - 1]
    system = SimpleNamespace(particles=states, log_weights=lw,
                             per_rank_log_avg=per_rank_log_avg,
                             ess_by_rank=ess_by_rank, rng_seed=seed)
    return system, float(log_z)


# ---------------------------------------------------------------------------
# public objective

def _elbo_impl(aln: Alignment, model: RateModel, params: ProposalParams,
               config: TrainConfig, seed: int):
    _check_grad_supported(params)
    tape = SweepTape(want_grad=True)
    relaxed = config.estimator == "gumbel_softmax"
    tau = config.gumbel_temperature
    if config.objective == "vcsmc":
        if relaxed:
            system, log_z = _csmc_sweep_relaxed(aln, model, params, config.K,
                                                seed, tau, tape)
        else:
            system, log_z = run_csmc(aln, model, params, config.K, seed,
                                     threads=config.threads, tape=tape)
        vec = _csmc_grad(tape, params, model.n_theta, relaxed, tau)
    else:
        if relaxed:
            system, log_z = _ncsmc_sweep_relaxed(aln, model, params, config.K,
                                                 config.M, seed, tau, tape)
        else:
            system, log_z = run_ncsmc(aln, model, params, config.K, config.M,
                                      seed, threads=config.threads, tape=tape)
        vec = _ncsmc_grad(tape, params, model.n_theta, relaxed, tau)
    n_ranks = aln.n_taxa - 1
    return log_z, _collapse(vec, params, n_ranks), system


def elbo_and_grad(aln: Alignment, model: RateModel, params: ProposalParams,
                  config: TrainConfig, seed: int):
    """One sweep's objective value and its parameter gradient.

    Returns (log Zhat, {"psi": ..., "theta": ...}); the psi entry
    matches the shape of params.psi, theta is None for models with no
    free parameters. The sweep follows config.objective and
    config.estimator; seed keys all of its streams.
    """
    log_z, grads, _ = _elbo_impl(aln, model, params, config, seed)
    return log_z, grads


# ---------------------------------------------------------------------------
# optimization

def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam descent step on a dict of arrays; returns new copies.

    state holds t and per-key first and second moments, initialized on
    first use. Pass negated gradients to ascend.
    """
    if not state:
        state = {"t": 0,
                 "m": {k: np.zeros_like(v) for k, v in params.items()},
                 "v": {k: np.zeros_like(v) for k, v in params.items()}}
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, {"t": t, "m": new_m, "v": new_v}


def _build_model(config: TrainConfig, theta: Optional[np.ndarray]) -> RateModel:
    if config.model_kind == "jc69":
        return build_jc69()
    return build_gtr(np.zeros(10) if theta is None else theta)


def _initial_psi(config: TrainConfig, n_ranks: int):
    psi0 = math.log(config.lambda_bl) if config.psi_init is None \
        else float(config.psi_init)
    if config.per_rank_psi:
        return tuple([psi0] * n_ranks)
    return psi0


def train(aln: Alignment, config: TrainConfig) -> TrainResult:
    """Optimize the sweep objective with Adam; returns the trace, the
    learned model and proposal, and the best tree of a final full-data
    sweep at the learned parameters."""
    n_ranks = aln.n_taxa - 1
    theta = None if config.theta_init is None \
        else np.asarray(config.theta_init, dtype=np.float64)
    model = _build_model(config, theta)
    params = ProposalParams(psi=_initial_psi(config, n_ranks),
                            lambda_bl=config.lambda_bl)
    S = aln.n_sites
    B = math.ceil(config.batch_fraction * S)
    steps_per_epoch = math.ceil(1.0 / config.batch_fraction)
    adam_state = {}
    trace = ElboTrace()
    global_step = 0
    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        elbos = []
        last = None
        for _ in range(steps_per_epoch):
            step_seed = rngmod.derive_seed(config.seed, 1, global_step)
            if B < S:
                batch_rng = rngmod.substream(config.seed, rngmod.MINIBATCH,
                                             rank=global_step)
                idx = np.sort(batch_rng.permutation(S)[:B])
                aln_b = aln.subset_sites(idx)
                scale = S / B
            else:
                aln_b = aln
                scale = 1.0
            params_b = replace(params, loglik_scale=scale)
            log_z, grads, system = _elbo_impl(aln_b, model, params_b, config,
                                              step_seed)
            elbos.append(log_z)
            last = (system, scale)

            upd, gup = {}, {}
            if config.learn_branch_rate:
                upd["psi"] = np.atleast_1d(np.asarray(params.psi, dtype=np.float64))
                gup["psi"] = -np.atleast_1d(np.asarray(grads["psi"]))
            if config.learn_model and model.n_theta:
                upd["theta"] = np.asarray(model.theta, dtype=np.float64)
                gup["theta"] = -np.asarray(grads["theta"])
            if upd:
                new_vals, adam_state = adam_step(upd, gup, adam_state,
                                                 config.learning_rate)
                if "psi" in new_vals:
                    psi = new_vals["psi"]
                    params = replace(params, psi=tuple(psi) if config.per_rank_psi
                                     else float(psi[0]))
                if "theta" in new_vals:
                    model = build_gtr(new_vals["theta"])
            global_step += 1

        system, scale = last
        best = int(np.argmax(system.log_weights))
        full_ll = scale * system.particles[best].total_loglik
        record = {
            "epoch": epoch,
            "elbo_estimate": float(np.mean(elbos)),
            "full_data_loglik_estimate": float(full_ll),
            "ess_min": float(np.min(system.ess_by_rank)),
            "ess_mean": float(np.mean(system.ess_by_rank)),
            "wall_seconds": time.perf_counter() - tic,
            "theta_snapshot": tuple(float(t) for t in np.atleast_1d(
                model.theta)) if model.n_theta else (),
            "psi_snapshot": tuple(float(p) for p in np.atleast_1d(
                np.asarray(params.psi, dtype=np.float64))),
        }
        trace.records.append(record)

    final_seed = rngmod.derive_seed(config.seed, 2, 0)
    if config.objective == "vncsmc":
        final_system, final_log_z = run_ncsmc(aln, model, params, config.K,
                                              config.M, final_seed,
                                              threads=config.threads)
    else:
        final_system, final_log_z = run_csmc(aln, model, params, config.K,
                                             final_seed,
                                             threads=config.threads)
    best_tree = final_system.best_tree()
    return TrainResult(trace=trace, model=model, params=params,
                       best_tree=best_tree, final_log_zhat=final_log_z,
                       final_system=final_system)
