"""Synthetic data generation for experiments and tests.

Draws a random rooted binary tree by repeated uniform pair merges with
exponential branch lengths, then evolves i.i.d. sites down it: root
states from the stationary distribution, each edge a categorical
transition under the model's matrix for that branch length. All draws
come from the data-generation stream family, so datasets are pure
functions of their seed.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from . import rng as rngmod
from .evomodel import RateModel, transition_probs
from .seqio import ALPHABET, Alignment, make_alignment
from .trees import PhyloTree, join, leaf_tree


def random_tree(n: int, seed: int, rate: float = 10.0) -> PhyloTree:
    """Random topology with Exp(rate) branch lengths on every join."""
    if n < 2:
        raise ValueError("need at least two leaves")
    if rate <= 0:
        raise ValueError("rate must be positive")
    rng = rngmod.substream(seed, rngmod.DATAGEN)
    forest = [leaf_tree(i) for i in range(n)]
    for step in range(1, n):
        pairs = list(combinations(range(len(forest)), 2))
        i, j = pairs[int(rng.integers(len(pairs)))]
        b = -np.log1p(-rng.random(2)) / rate
        node = join(forest[i], forest[j], float(b[0]), float(b[1]),
                    made_rank=step)
        forest = [t for k, t in enumerate(forest) if k not in (i, j)]
        forest.append(node)
    return forest[0]


def _step_down(rng: np.random.Generator, parent_states: np.ndarray,
               P: np.ndarray) -> np.ndarray:
    cum = np.cumsum(P, axis=1)
    u = rng.random(parent_states.shape[0])
    return (u[:, None] > cum[parent_states]).sum(axis=1)


def simulate_alignment(tree: PhyloTree, model: RateModel, n_sites: int,
                       seed: int, names=None) -> Alignment:
    """Evolve n_sites i.i.d. sites down the tree; returns an Alignment
    whose row order matches the tree's leaf indices."""
    if n_sites < 1:
        raise ValueError("need at least one site")
    rng = rngmod.substream(seed, rngmod.DATAGEN, rank=1)
    root_states = (rng.random(n_sites)[:, None]
                   > np.cumsum(model.eta)[None, :]).sum(axis=1)
    leaves = {}

    def walk(node, states):
        if node.is_leaf:
            leaves[node.leaf] = states
            return
        for child, b in ((node.left, node.b_left), (node.right, node.b_right)):
            walk(child, _step_down(rng, states, transition_probs(model, b)))

    walk(tree, root_states)
    n = len(leaves)
    if sorted(leaves) != list(range(n)):
        raise ValueError("tree leaves must be indexed 0..n-1")
    if names is None:
        names = ["S%d" % i for i in range(n)]
    seqs = ["".join(ALPHABET[s] for s in leaves[i]) for i in range(n)]
    return make_alignment(names, seqs)
