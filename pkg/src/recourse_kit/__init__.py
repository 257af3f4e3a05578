"""recourse-kit: scenario-tree toolkit for nonlinear multistage stochastic programs.

Core surface: scenario trees with adapted vectors and the nonanticipativity
projector; node-wise convex sets with projections and normal cones; causal
stage dynamics with analytic derivatives and adjoints; the distance penalty
and its generalized gradient; feasibility restoration with certified error
bounds; multiplier certificates for both nonanticipativity formulations; and
a JSON instance format with a small CLI.
"""

__version__ = "0.1.0"

from ._kernels import backend as kernel_backend
from .tree import (AdaptedVector, PNorm, ScenarioTree, build_tree, conditional_expectation,
                   inner_product, lp_norm, nonanticipativity_gap, nonanticipativity_project)
from .sets import (Ball, Box, ConeHull, Orthant, Polyhedron, SetFamily, Singleton, Subspace,
                   polar_pointwise, verify_decomposable_polar)
from .causal import AffineMap, BilinearMap, CausalOperator, SmoothMap, fd_check_jacobian
from .penalty import clarke_dirderiv_fd, phi, phi_subgradient
from .objectives import (CompositeObjective, CVaRObjective, ExpectedObjective, LinearCost,
                         QuadraticCost, SoftplusCost)
from .model import CausalInstance
from .recourse import (RecourseReport, estimate_recourse_constant, node_recourse_solve,
                       restore_builtin, restore_relaxed, verify_recourse_constant)
from .optimality import (KktOptions, KktReport, MultiplierCertificate, kkt_residual_builtin,
                         kkt_residual_explicit, recover_multipliers, reduce_multipliers)
from .solvers import brute_force_solve, penalty_solve
from .instances import (GeneratorSpec, ProblemInstanceFile, canonical_json, generate,
                        parse_instance, serialize_instance)

__all__ = [
    "AdaptedVector", "AffineMap", "Ball", "BilinearMap", "Box", "CausalInstance",
    "CausalOperator", "CompositeObjective", "ConeHull", "CVaRObjective", "ExpectedObjective",
    "GeneratorSpec", "KktOptions", "KktReport", "LinearCost", "MultiplierCertificate",
    "Orthant", "PNorm", "Polyhedron", "ProblemInstanceFile", "QuadraticCost", "RecourseReport",
    "ScenarioTree", "SetFamily", "Singleton", "SmoothMap", "SoftplusCost", "Subspace",
    "brute_force_solve", "build_tree", "canonical_json", "clarke_dirderiv_fd",
    "conditional_expectation", "estimate_recourse_constant", "fd_check_jacobian", "generate",
    "inner_product", "kernel_backend", "kkt_residual_builtin", "kkt_residual_explicit",
    "lp_norm", "node_recourse_solve", "nonanticipativity_gap", "nonanticipativity_project",
    "parse_instance", "penalty_solve", "phi", "phi_subgradient", "polar_pointwise",
    "recover_multipliers", "reduce_multipliers", "restore_builtin", "restore_relaxed",
    "serialize_instance", "verify_decomposable_polar", "verify_recourse_constant",
]
