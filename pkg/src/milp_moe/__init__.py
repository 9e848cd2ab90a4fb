"""Cross-domain learned predict-and-search for binary MILPs.

Subpackages and modules:

- :mod:`milp_moe.instances` -- MILP data model, synthetic generators, text format.
- :mod:`milp_moe.graph` -- bipartite variable/constraint feature encoding.
- :mod:`milp_moe.solver` -- simplex, branch-and-bound, trust region, pools, oracles.
- :mod:`milp_moe.autodiff` -- small reverse-mode tensor engine and optimizers.
- :mod:`milp_moe.model` -- GNN encoder with gated experts and decoder heads.
- :mod:`milp_moe.losses` -- weighted BCE, expert diversity and routing consistency.
- :mod:`milp_moe.trainer` -- group-DRO training loop.
- :mod:`milp_moe.search` -- predict-and-search inference and evaluation.
- :mod:`milp_moe.cli` -- command line entry point.
"""

__version__ = "0.1.0"
