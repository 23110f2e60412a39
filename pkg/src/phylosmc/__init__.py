"""Phylogenetic inference by combinatorial and nested SMC, with
variational training of the proposal and substitution parameters."""

__version__ = "0.1.0"

from .evomodel import (RateModel, build_gtr, build_jc69, load_params,
                       save_params, transition_grads, transition_probs)
from .ncsmc import (LookAheadTable, build_lookahead, ncsmc_weight,
                    proper_weighting_check, run_ncsmc, select_extension)
from .oracle import (GridSpec, brute_force_loglik, chain_to_tree,
                     distinct_topologies, enumerate_jump_chains, exact_Z_grid)
from .seqio import (Alignment, make_alignment, parse_fasta, parse_phylip,
                    read_alignment, write_fasta)
from .simulate import random_tree, simulate_alignment
from .smc import (EvalCounter, ParticleSystem, ProposalParams, csmc_weight,
                  default_params, ess, ess_log, propose, resample, run_csmc)
from .trees import (PartialState, PhyloTree, count_topologies, forest_loglik,
                    initial_state, merge, parse_newick, prune_tree, to_newick)
from .vi import (ElboTrace, TrainConfig, TrainResult, adam_step,
                 elbo_and_grad, train)

__all__ = [
    "Alignment", "ElboTrace", "EvalCounter", "GridSpec", "LookAheadTable",
    "ParticleSystem", "PartialState", "PhyloTree", "ProposalParams",
    "RateModel", "TrainConfig", "TrainResult", "adam_step",
    "brute_force_loglik", "build_gtr", "build_jc69", "build_lookahead",
    "chain_to_tree", "count_topologies", "csmc_weight", "default_params",
    "distinct_topologies", "elbo_and_grad", "enumerate_jump_chains", "ess",
    "ess_log", "exact_Z_grid", "forest_loglik", "initial_state",
    "load_params", "make_alignment", "merge", "ncsmc_weight", "parse_fasta",
    "parse_newick", "parse_phylip", "propose", "proper_weighting_check",
    "prune_tree", "random_tree", "read_alignment", "resample", "run_csmc",
    "run_ncsmc", "save_params", "select_extension", "simulate_alignment",
    "to_newick", "train", "transition_grads", "transition_probs",
    "write_fasta",
]
