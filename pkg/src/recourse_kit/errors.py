"""Exception types shared across the package."""


class TreeStructureError(ValueError):
    """Scenario tree input violates a structural invariant."""


class DimensionMismatch(ValueError):
    """Array shapes are inconsistent with the declared dimensions."""


class InfeasibleNodeError(RuntimeError):
    """A node-level recourse system has no solution."""

    def __init__(self, stage, node_id, message=""):
        self.stage = stage
        self.node_id = node_id
        detail = f" ({message})" if message else ""
        super().__init__(f"infeasible recourse system at stage {stage}, node {node_id}{detail}")


class RestorationError(RuntimeError):
    """Feasibility restoration could not produce an exactly feasible policy."""

    def __init__(self, stage, node_id, message=""):
        self.stage = stage
        self.node_id = node_id
        detail = f" ({message})" if message else ""
        super().__init__(f"restoration failed at stage {stage}, node {node_id}{detail}")


class InfeasiblePointError(RuntimeError):
    """A candidate policy violates the feasibility tolerance of a checker."""


class SchemaError(ValueError):
    """An instance/policy/certificate document violates the JSON schema."""

    def __init__(self, pointer, message):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")
