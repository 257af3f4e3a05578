"""Problem instance container shared by the restoration and certification layers."""

from __future__ import annotations

from dataclasses import dataclass

from .causal import CausalOperator
from .errors import DimensionMismatch
from .sets import SetFamily
from .tree import ScenarioTree


@dataclass
class CausalInstance:
    """Full problem datum: tree, dynamics, stage-wise sets, objective, constants.

    ``cf`` bounds the stage-map Jacobian norms, ``l_phi`` the objective's
    Lipschitz constant, and ``recourse_c`` is the node-level recourse
    constant (declared or estimated).
    """

    tree: ScenarioTree
    operator: CausalOperator
    x_sets: SetFamily
    y_sets: SetFamily
    objective: object
    cf: float
    l_phi: float
    recourse_c: float
    name: str = ""

    def __post_init__(self):
        if self.operator.tree is not self.tree:
            raise DimensionMismatch("operator is attached to a different tree")
        if self.x_sets.dim != self.operator.n:
            raise DimensionMismatch("decision set dimension != operator input dimension")
        if self.y_sets.dim != self.operator.m:
            raise DimensionMismatch("output set dimension != operator output dimension")
        if self.recourse_c <= 0:
            raise ValueError("recourse constant must be positive")

    @property
    def n(self):
        return self.operator.n

    @property
    def m(self):
        return self.operator.m

    @property
    def stages(self):
        return self.tree.stages

    def lipschitz_stage_bound(self):
        """Certified product-space Lipschitz constant of the stage dynamics."""
        return float(self.tree.stages ** 0.5 * self.cf)
