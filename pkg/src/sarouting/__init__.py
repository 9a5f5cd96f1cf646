"""Multi-flow network routing by utility maximization.

Classic augmented-Lagrangian solvers and a state-augmented graph neural
network policy, with the simulation and experiment tooling around them.
"""

__version__ = "0.1.0"
