"""Brute-force references for tiny instances.

Everything here trades scale for exactness: exhaustive enumeration of
ordered merge sequences (jump chains), exact marginal likelihood on a
finite branch-length grid, and direct summation over ancestral state
assignments. Hard size guards keep these off the experiment path.

The grid target sums likelihood times prior-atom probability over
every branch assignment of every chain. Branch values are shared
across sites, so the sum cannot be collapsed into one pruning pass
with a prior-mixed matrix (that would average each site independently);
instead each merge carries a batch of partial messages, one per
assignment of the branches below it, and the batch grows by a factor
of grid_size^2 per merge. The plain nested-loop form of the same sum
is recomputed independently in the tests.

The exact normalizer is reported relative to the rank-0 state, i.e.
log(sum over chains and assignments of likelihood times prior) minus
log pi(bottom), because with the ordered-jump-chain extension the
samplers' product-of-average-weights estimator telescopes to exactly
that ratio; the rank-0 target (product of leaf marginals) is the
denominator of the very first weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import logsumexp

from .evomodel import RateModel, transition_probs
from .seqio import Alignment
from .trees import PhyloTree, join, leaf_tree, topology_id


@dataclass(frozen=True)
class GridSpec:
    """Finite branch-length support with proposal probabilities."""

    values: tuple
    probs: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        p = np.asarray(self.probs, dtype=np.float64)
        if v.ndim != 1 or v.shape != p.shape or v.size == 0:
            raise ValueError("grid values and probs must be matching 1-D lists")
        if not np.all(v > 0.0):
            raise ValueError("grid values must be positive")
        if not np.all(np.diff(v) > 0.0):
            raise ValueError("grid values must be sorted and distinct")
        if not np.all(p > 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("grid probs must be positive and sum to 1")
        object.__setattr__(self, "values", tuple(float(x) for x in v))
        object.__setattr__(self, "probs", tuple(float(x) for x in p))

    @property
    def size(self) -> int:
        return len(self.values)

    def log_probs(self) -> np.ndarray:
        return np.log(np.asarray(self.probs))

    def prior_atom_logprobs(self, lambda_bl: float) -> np.ndarray:
        """Exponential prior restricted to the grid atoms, normalized."""
        a = -lambda_bl * np.asarray(self.values)
        return a - logsumexp(a)


def enumerate_jump_chains(n: int) -> list:
    """Every ordered sequence of n - 1 pair merges from n singletons.

    A chain is a tuple of (i, j) positions, i < j, indexing the forest
    kept sorted by smallest contained leaf, exactly the convention the
    samplers use. Guarded to n <= 7.
    """
    if n < 2:
        raise ValueError("need at least 2 taxa")
    if n > 7:
        raise ValueError("jump-chain enumeration is guarded to n <= 7")

    chains = []

    def rec(forest, prefix):
        if len(forest) == 1:
            chains.append(tuple(prefix))
            return
        for i, j in combinations(range(len(forest)), 2):
            merged = forest[i] | forest[j]
            rest = [forest[k] for k in range(len(forest)) if k not in (i, j)]
            pos = 0
            while pos < len(rest) and min(rest[pos]) < min(merged):
                pos += 1
            rest.insert(pos, merged)
            rec(rest, prefix + [(i, j)])

    rec([frozenset({i}) for i in range(n)], [])
    return chains


def chain_to_tree(chain, n: int, branch_length: float = 1.0) -> PhyloTree:
    """Materialize a jump chain as a tree with constant branch lengths."""
    forest = [leaf_tree(i) for i in range(n)]
    for step, (i, j) in enumerate(chain, start=1):
        t = join(forest[i], forest[j], branch_length, branch_length,
                 made_rank=step)
        del forest[max(i, j)], forest[min(i, j)]
        pos = 0
        while pos < len(forest) and forest[pos].min_leaf < t.min_leaf:
            pos += 1
        forest.insert(pos, t)
    return forest[0]


def distinct_topologies(n: int) -> set:
    """Canonical topology ids reachable by the jump chains."""
    return {topology_id(chain_to_tree(c, n)) for c in enumerate_jump_chains(n)}


def log_pi_bottom(aln: Alignment, model: RateModel) -> float:
    """Log target of the rank-0 state: product of leaf marginals."""
    site = np.einsum("i,nsi->ns", model.eta, aln.encoding)
    return float(np.sum(np.log(site)))


def exact_Z_grid(aln: Alignment, model: RateModel, grid: GridSpec,
                 lambda_bl: float) -> float:
    """Exact log normalizer of the grid-restricted target, relative to
    the rank-0 state (see module docstring). Guarded to n <= 5 taxa and
    grids of at most 4 atoms."""
    n = aln.n_taxa
    if n > 5:
        raise ValueError("exact_Z_grid is guarded to n <= 5 taxa")
    if grid.size > 4:
        raise ValueError("exact_Z_grid is guarded to grids of size <= 4")
    G = grid.size
    P_stack = np.stack([transition_probs(model, v) for v in grid.values])
    atom_lp = grid.prior_atom_logprobs(lambda_bl)
    per_chain = []
    for chain in enumerate_jump_chains(n):
        # forest of assignment batches: msgs[t] is (B_t, 4, S), one row
        # per combination of the branch atoms below tree t, lws[t] the
        # matching log prior masses plus accumulated rescaling.
        msgs = [aln.leaf_vectors(i)[None, :, :] for i in range(n)]
        lws = [np.zeros(1) for _ in range(n)]
        for i, j in chain:
            tl = np.einsum("gab,ibs->gias", P_stack, msgs[i])
            tr = np.einsum("gab,jbs->gjas", P_stack, msgs[j])
            h = (tl[:, None, :, None, :, :]
                 * tr[None, :, None, :, :, :])        # (G,G,Bi,Bj,4,S)
            lw = (atom_lp[:, None, None, None]
                  + atom_lp[None, :, None, None]
                  + lws[i][None, None, :, None]
                  + lws[j][None, None, None, :])
            h = h.reshape(-1, 4, h.shape[-1])
            lw = lw.reshape(-1)
            scal = h.max(axis=1)
            h = h / scal[:, None, :]
            lw = lw + np.log(scal).sum(axis=1)
            # merged tree takes slot i (it keeps the smaller leaf min);
            # slot j disappears, matching the chain position convention
            msgs[i], lws[i] = h, lw
            del msgs[j], lws[j]
        site = np.einsum("a,bas->bs", model.eta, msgs[0])
        per_chain.append(logsumexp(lws[0] + np.log(site).sum(axis=1)))
    return float(logsumexp(per_chain) - log_pi_bottom(aln, model))


def _count_internal(tree: PhyloTree) -> int:
    if tree.is_leaf:
        return 0
    return 1 + _count_internal(tree.left) + _count_internal(tree.right)


def brute_force_loglik(tree: PhyloTree, aln: Alignment,
                       model: RateModel) -> float:
    """Log-likelihood by direct summation over ancestral assignments.

    Per site, sums eta(root state) times the product of edge transition
    factors over all 4^(number of internal nodes) assignments. Guarded
    to trees with at most 4 internal nodes.
    """
    n_int = _count_internal(tree)
    if n_int > 4:
        raise ValueError("brute force is guarded to <= 4 internal nodes")
    if tree.is_leaf:
        site = model.eta @ aln.leaf_vectors(tree.leaf)
        return float(np.sum(np.log(site)))

    internals = []

    def collect(node):
        if node.is_leaf:
            return
        collect(node.left)
        collect(node.right)
        internals.append(node)

    collect(tree)
    idx_of = {id(node): k for k, node in enumerate(internals)}
    # assignment grid: (n_int, 4^n_int), row k = states of internal node k
    grid_states = np.indices((4,) * n_int).reshape(n_int, -1)

    edges = []
    for node in internals:
        for child, blen in ((node.left, node.b_left),
                            (node.right, node.b_right)):
            edges.append((idx_of[id(node)], child, transition_probs(model, blen)))
    root_states = grid_states[idx_of[id(tree)]]

    total = 0.0
    for s in range(aln.n_sites):
        factor = model.eta[root_states].copy()
        for parent_idx, child, P in edges:
            a_p = grid_states[parent_idx]
            if child.is_leaf:
                lv = P @ aln.encoding[child.leaf, s]
                factor *= lv[a_p]
            else:
                factor *= P[a_p, grid_states[idx_of[id(child)]]]
        total += float(np.log(np.sum(factor)))
    return total
