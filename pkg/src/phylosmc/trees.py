"""Rooted trees, forests, and Felsenstein pruning.

Trees are immutable binary nodes; a forest of them plus per-tree pruning
caches forms a PartialState, the object the samplers walk over. States at
rank r hold N - r trees; rank 0 is the forest of singleton leaves and
rank N - 1 a single tree over all taxa.

Pruning keeps per-site conditional likelihood vectors rescaled by their
per-site maximum, with the log of the scaling accumulated separately, so
inner loops stay plain matrix products without underflow on long
alignments. A merge computes only the new root's message from the two
cached child messages; untouched trees share their caches with the
previous state.

The gradient pass (tree_grads) runs an outside sweep mirroring the inside
one and returns d loglik / d branch-length summaries per edge-creation
rank plus d loglik / d theta, the quantities the variational estimators
consume. Per-site the ratio of outside-times-inside products cancels the
rescaling factors, so no scaler bookkeeping appears in the gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .evomodel import RateModel, transition_grads, transition_probs
from .seqio import Alignment


class NewickError(ValueError):
    """Malformed Newick text; message carries a character position."""


@dataclass(frozen=True)
class PhyloTree:
    """A rooted binary tree node. Leaves carry an alignment row index.

    Children are ordered so the subtree containing the smallest leaf
    index is the left child; serialization and topology identity rely on
    this canonical form. made_rank records the coalescence rank at which
    the node (and its two child edges) was created, 0 for leaves.
    """

    leaf: Optional[int]
    left: Optional["PhyloTree"]
    right: Optional["PhyloTree"]
    b_left: float
    b_right: float
    min_leaf: int
    n_leaves: int
    made_rank: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.leaf is not None


def leaf_tree(index: int) -> PhyloTree:
    return PhyloTree(leaf=index, left=None, right=None, b_left=0.0,
                     b_right=0.0, min_leaf=index, n_leaves=1)


def join(a: PhyloTree, b: PhyloTree, b_a: float, b_b: float,
         made_rank: int = 0) -> PhyloTree:
    """New root over a and b with the given child branch lengths.

    Children are put in canonical order (smaller min_leaf left), carrying
    their branch lengths with them. Lengths must be finite and >= 0;
    the samplers only ever produce strictly positive ones, zero is
    tolerated for diagnostic computations.
    """
    for v in (b_a, b_b):
        if not (math.isfinite(v) and v >= 0.0):
            raise ValueError(f"branch length must be finite and >= 0, got {v}")
    if a.min_leaf > b.min_leaf:
        a, b, b_a, b_b = b, a, b_b, b_a
    return PhyloTree(leaf=None, left=a, right=b, b_left=b_a, b_right=b_b,
                     min_leaf=a.min_leaf, n_leaves=a.n_leaves + b.n_leaves,
                     made_rank=made_rank)


def count_topologies(n: int) -> int:
    """(2n - 3)!! rooted binary topologies on n labeled leaves."""
    if n < 2:
        raise ValueError("need at least 2 taxa")
    out = 1
    for k in range(3, 2 * n - 2, 2):
        out *= k
    return out


def topology_id(tree: PhyloTree) -> str:
    """Canonical topology string, branch lengths ignored."""
    if tree.is_leaf:
        return str(tree.leaf)
    return f"({topology_id(tree.left)},{topology_id(tree.right)})"


def iter_edges(tree: PhyloTree):
    """Yield (parent, child, branch_length) over all edges, postorder."""
    if tree.is_leaf:
        return
    yield from iter_edges(tree.left)
    yield from iter_edges(tree.right)
    yield (tree, tree.left, tree.b_left)
    yield (tree, tree.right, tree.b_right)


def tree_branch_lengths(tree: PhyloTree) -> list:
    return [b for _, _, b in iter_edges(tree)]


# ---------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------

def _rescale(h: np.ndarray):
    scal = h.max(axis=0)
    safe = np.where(scal > 0.0, scal, 1.0)
    with np.errstate(divide="ignore"):
        return h / safe, np.log(np.where(scal > 0.0, scal, 0.0))


_PTRANS_CACHE: dict = {}


def _ptrans(model: RateModel, b: float) -> np.ndarray:
    """Memoized transition_probs.

    Grid proposals reuse a handful of branch lengths, so the eigenbasis
    reconstruction dominates pruning cost without this. Keys are by
    model identity; the entry pins the model so the id stays valid, and
    the matrix is frozen read-only because callers share it.
    """
    key = (id(model), b)
    hit = _PTRANS_CACHE.get(key)
    if hit is not None:
        return hit[1]
    if len(_PTRANS_CACHE) >= 4096:
        _PTRANS_CACHE.clear()
    P = transition_probs(model, b)
    P.setflags(write=False)
    _PTRANS_CACHE[key] = (model, P)
    return P


def _node_message(node: PhyloTree, aln: Alignment, model: RateModel):
    if node.is_leaf:
        return aln.leaf_vectors(node.leaf), np.zeros(aln.n_sites)
    m_l, s_l = _node_message(node.left, aln, model)
    m_r, s_r = _node_message(node.right, aln, model)
    h = (_ptrans(model, node.b_left) @ m_l) \
        * (_ptrans(model, node.b_right) @ m_r)
    m, extra = _rescale(h)
    return m, s_l + s_r + extra


def prune_tree(tree: PhyloTree, aln: Alignment, model: RateModel):
    """Single post-order pass over one tree.

    Returns (root_vectors, log_scalers, total_loglik) where root_vectors
    is (4, S) rescaled per site and log_scalers holds the accumulated
    log rescaling factors; the true per-site conditional likelihood is
    root_vectors * exp(log_scalers).
    """
    m, scalers = _node_message(tree, aln, model)
    with np.errstate(divide="ignore"):
        site_log = np.log(model.eta @ m)
    return m, scalers, float(np.sum(site_log) + np.sum(scalers))


@dataclass(frozen=True, eq=False)
class TreeCache:
    """Pruning artifacts for one tree: rescaled root message, per-site
    log scalers, total log-likelihood, and (when gradients are on) the
    per-rank branch-length adjoint sum_e dL/db_e * (-b_e) and dL/dtheta."""

    messages: np.ndarray
    log_scalers: np.ndarray
    loglik: float
    g_psi: Optional[np.ndarray] = None     # (n_ranks,)
    g_theta: Optional[np.ndarray] = None   # (n_theta,)


def _leaf_cache(index: int, aln: Alignment, model: RateModel,
                want_grad: bool, n_ranks: int) -> TreeCache:
    vec = aln.leaf_vectors(index)
    site = model.eta @ vec
    loglik = float(np.sum(np.log(site)))
    g_psi = g_theta = None
    if want_grad:
        g_psi = np.zeros(n_ranks)
        g_theta = (model.deta_dtheta @ vec / site[None, :]).sum(axis=1)
    return TreeCache(messages=vec, log_scalers=np.zeros(aln.n_sites),
                     loglik=loglik, g_psi=g_psi, g_theta=g_theta)


def _merged_cache(tree: PhyloTree, c_l: TreeCache, c_r: TreeCache,
                  aln: Alignment, model: RateModel,
                  want_grad: bool, n_ranks: int) -> TreeCache:
    h = (_ptrans(model, tree.b_left) @ c_l.messages) \
        * (_ptrans(model, tree.b_right) @ c_r.messages)
    m, extra = _rescale(h)
    scalers = c_l.log_scalers + c_r.log_scalers + extra
    with np.errstate(divide="ignore"):
        site_log = np.log(model.eta @ m)
    loglik = float(np.sum(site_log) + np.sum(scalers))
    g_psi = g_theta = None
    if want_grad:
        g_psi, g_theta = tree_grads(tree, aln, model, n_ranks)
    return TreeCache(messages=m, log_scalers=scalers, loglik=loglik,
                     g_psi=g_psi, g_theta=g_theta)


def tree_grads(tree: PhyloTree, aln: Alignment, model: RateModel,
               n_ranks: int):
    """Branch and theta adjoints of one tree's log-likelihood.

    Returns (g_psi, g_theta): g_psi[r] = sum over edges created at rank
    r + 1 of dL/db_e * (-b_e), the reparameterized branch contribution
    for a proposal rate at that rank; g_theta = dL/dtheta including the
    stationary-distribution term at the root.
    """
    g_psi = np.zeros(n_ranks)
    g_theta = np.zeros(model.n_theta)
    if tree.is_leaf:
        vec = aln.leaf_vectors(tree.leaf)
        if model.n_theta:
            site = model.eta @ vec
            g_theta = (model.deta_dtheta @ vec / site[None, :]).sum(axis=1)
        return g_psi, g_theta

    msgs = {}

    def post(node):
        if node.is_leaf:
            m = aln.leaf_vectors(node.leaf)
            msgs[id(node)] = (m, None, None)
            return m
        m_l = post(node.left)
        m_r = post(node.right)
        h_l = transition_probs(model, node.b_left) @ m_l
        h_r = transition_probs(model, node.b_right) @ m_r
        m, _ = _rescale(h_l * h_r)
        msgs[id(node)] = (m, h_l, h_r)
        return m

    m_root = post(tree)
    if model.n_theta:
        den_root = model.eta @ m_root
        g_theta += (model.deta_dtheta @ m_root / den_root[None, :]).sum(axis=1)

    stack = [(tree, np.repeat(model.eta[:, None], aln.n_sites, axis=1))]
    while stack:
        node, out = stack.pop()
        _, h_l, h_r = msgs[id(node)]
        for child, blen, h_self, h_sib in (
                (node.left, node.b_left, h_l, h_r),
                (node.right, node.b_right, h_r, h_l)):
            u = out * h_sib
            den = np.einsum("is,is->s", u, h_self)
            m_c = msgs[id(child)][0]
            dp_db, dp_dth = transition_grads(model, blen)
            num_b = np.einsum("is,is->s", u, dp_db @ m_c)
            dl_db = float(np.sum(num_b / den))
            g_psi[max(node.made_rank - 1, 0)] += dl_db * (-blen)
            for k in range(model.n_theta):
                num_k = np.einsum("is,is->s", u, dp_dth[k] @ m_c)
                g_theta[k] += float(np.sum(num_k / den))
            if not child.is_leaf:
                out_c, _ = _rescale(transition_probs(model, blen).T @ u)
                stack.append((child, out_c))
    return g_psi, g_theta


# ---------------------------------------------------------------------
# partial states
# ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PartialState:
    """A rank-r forest with cached pruning artifacts.

    trees are kept sorted by smallest contained leaf index, which fixes
    the pair enumeration order everywhere. States are immutable; merge
    returns a new state sharing the untouched caches.
    """

    rank: int
    n_taxa: int
    model: RateModel
    trees: tuple
    caches: tuple
    n_edges: int
    sum_branch: float
    sum_branch_by_rank: tuple
    total_loglik: float

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_ranks(self) -> int:
        return self.n_taxa - 1


def initial_state(aln: Alignment, model: RateModel,
                  want_grad: bool = False) -> PartialState:
    """The rank-0 state: one singleton tree per taxon."""
    n = aln.n_taxa
    n_ranks = n - 1
    trees = tuple(leaf_tree(i) for i in range(n))
    caches = tuple(_leaf_cache(i, aln, model, want_grad, n_ranks)
                   for i in range(n))
    return PartialState(rank=0, n_taxa=n, model=model, trees=trees,
                        caches=caches, n_edges=0, sum_branch=0.0,
                        sum_branch_by_rank=(0.0,) * n_ranks,
                        total_loglik=float(sum(c.loglik for c in caches)))


def merge(state: PartialState, i: int, j: int, b_left: float,
          b_right: float, aln: Alignment = None, counter=None,
          want_grad: bool = False) -> PartialState:
    """Coalesce trees i and j of the forest at the given branch lengths.

    b_left attaches to tree i and b_right to tree j. Returns the rank
    r + 1 state; the new root's message is computed incrementally from
    the two child caches (one likelihood evaluation, tallied on counter
    when given). aln is only needed when want_grad is set, to run the
    outside pass over the merged tree.
    """
    f = state.n_trees
    if i == j or not (0 <= i < f and 0 <= j < f):
        raise ValueError(f"invalid tree indices ({i}, {j}) for forest of {f}")
    for v in (b_left, b_right):
        if not (math.isfinite(v) and v > 0.0):
            raise ValueError(f"branch length must be finite and > 0, got {v}")
    if i > j:
        i, j, b_left, b_right = j, i, b_right, b_left
    made = state.rank + 1
    tree = join(state.trees[i], state.trees[j], b_left, b_right,
                made_rank=made)
    if want_grad and aln is None:
        raise ValueError("gradient merge needs the alignment")
    cache = _merged_cache(tree, state.caches[i], state.caches[j], aln,
                          state.model, want_grad, state.n_ranks)
    if counter is not None:
        counter.add(1)
    keep_t = [t for k, t in enumerate(state.trees) if k not in (i, j)]
    keep_c = [c for k, c in enumerate(state.caches) if k not in (i, j)]
    pos = 0
    while pos < len(keep_t) and keep_t[pos].min_leaf < tree.min_leaf:
        pos += 1
    keep_t.insert(pos, tree)
    keep_c.insert(pos, cache)
    by_rank = list(state.sum_branch_by_rank)
    by_rank[made - 1] += b_left + b_right
    return PartialState(rank=made, n_taxa=state.n_taxa, model=state.model,
                        trees=tuple(keep_t), caches=tuple(keep_c),
                        n_edges=state.n_edges + 2,
                        sum_branch=state.sum_branch + b_left + b_right,
                        sum_branch_by_rank=tuple(by_rank),
                        total_loglik=float(sum(c.loglik for c in keep_c)))


def forest_loglik(state: PartialState, aln: Alignment,
                  model: RateModel) -> float:
    """Sum of freshly recomputed per-tree log-likelihoods.

    This is the definitional form; the cached state.total_loglik must
    agree with it, which the tests assert.
    """
    return float(sum(prune_tree(t, aln, model)[2] for t in state.trees))


# ---------------------------------------------------------------------
# newick
# ---------------------------------------------------------------------

def to_newick(tree: PhyloTree, names) -> str:
    """Serialize with canonical child order and 10-significant-digit
    branch lengths, trailing semicolon."""

    def rec(node):
        if node.is_leaf:
            return str(names[node.leaf])
        return (f"({rec(node.left)}:{node.b_left:.10g},"
                f"{rec(node.right)}:{node.b_right:.10g})")

    return rec(tree) + ";"


def parse_newick(text: str, names=None):
    """Parse one Newick tree with branch lengths.

    When names is given, leaf labels must come from it and map to its
    indices; otherwise indices are assigned in order of first appearance.
    Returns (tree, names_tuple). Errors carry character positions.
    """
    s = text.strip()
    pos = 0
    special = set("():,;")

    def err(msg):
        raise NewickError(f"position {pos}: {msg}")

    def skip_ws():
        nonlocal pos
        while pos < len(s) and s[pos].isspace():
            pos += 1

    def read_name():
        nonlocal pos
        start = pos
        while pos < len(s) and s[pos] not in special and not s[pos].isspace():
            pos += 1
        if pos == start:
            err("expected a taxon name")
        return s[start:pos]

    def read_number():
        nonlocal pos
        start = pos
        while pos < len(s) and (s[pos] in "+-.eE" or s[pos].isdigit()):
            pos += 1
        try:
            return float(s[start:pos])
        except ValueError:
            err("expected a branch length")

    def expect(ch):
        nonlocal pos
        skip_ws()
        if pos >= len(s) or s[pos] != ch:
            err(f"expected {ch!r}")
        pos += 1

    def subtree():
        nonlocal pos
        skip_ws()
        if pos < len(s) and s[pos] == "(":
            pos += 1
            a = subtree()
            expect(":")
            b_a = read_number()
            expect(",")
            b = subtree()
            expect(":")
            b_b = read_number()
            skip_ws()
            if pos < len(s) and s[pos] == ",":
                err("node has more than two children")
            expect(")")
            return (a, b_a, b, b_b)
        return read_name()

    parsed = subtree()
    expect(";")
    skip_ws()
    if pos != len(s):
        err("trailing characters after ';'")
    if isinstance(parsed, str):
        raise NewickError("a single leaf is not a tree")

    if names is not None:
        index = {str(nm): k for k, nm in enumerate(names)}
        out_names = tuple(names)
    else:
        index = {}
        out_names = None

    seen = set()

    def build(node):
        if isinstance(node, str):
            if node not in index:
                if names is not None:
                    raise NewickError(f"unknown taxon {node!r}")
                index[node] = len(index)
            if node in seen:
                raise NewickError(f"duplicate taxon {node!r}")
            seen.add(node)
            return leaf_tree(index[node])
        a, b_a, b, b_b = node
        return join(build(a), build(b), b_a, b_b)

    collect = []

    def order(node):
        if isinstance(node, str):
            if node not in collect:
                collect.append(node)
        else:
            order(node[0])
            order(node[2])

    if names is None:
        order(parsed)
        index = {nm: k for k, nm in enumerate(collect)}
        out_names = tuple(collect)
    tree = build(parsed)
    return tree, out_names
