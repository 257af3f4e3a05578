import numpy as np
import pytest

from recourse_kit.causal import AffineMap, CausalOperator
from recourse_kit.model import CausalInstance
from recourse_kit.objectives import ExpectedObjective, QuadraticCost
from recourse_kit.sets import Box, SetFamily, Singleton
from recourse_kit.tree import AdaptedVector, ScenarioTree


@pytest.fixture
def two_stage_tree():
    """Root plus two equiprobable leaves."""
    return ScenarioTree.from_branching([2])


@pytest.fixture
def three_stage_tree():
    """1 -> 2 -> 2 uniform; 7 nodes, 4 scenarios."""
    return ScenarioTree.from_branching([2, 2])


def make_chain_instance(tree, recourse_c=2.0):
    """Scalar chain dynamics y_1 = x_1, y_t = x_t - x_{t-1}; free decision sets,
    outputs pinned to zero from stage 2 on."""
    T = tree.stages
    maps = []
    for t in range(1, T + 1):
        A = np.zeros((1, t))
        A[0, t - 1] = 1.0
        if t > 1:
            A[0, t - 2] = -1.0
        maps.append([AffineMap(A, np.zeros(1)) for _ in range(tree.n_at_stage(t))])
    operator = CausalOperator(tree, 1, 1, maps)
    x_sets = SetFamily.uniform(tree, Box([-np.inf], [np.inf]))
    y_by_id = {}
    for t in range(1, T + 1):
        for nid in tree.stage_ids(t):
            y_by_id[int(nid)] = Box([-np.inf], [np.inf]) if t == 1 else Singleton([0.0])
    y_sets = SetFamily(tree, y_by_id)
    costs = [[QuadraticCost([[1.0]], [0.0]) for _ in range(tree.n_scenarios)] for _ in range(T)]
    obj = ExpectedObjective(tree, costs, lipschitz=20.0)
    return CausalInstance(tree, operator, x_sets, y_sets, obj,
                          cf=operator.certified_jacobian_bound(), l_phi=20.0,
                          recourse_c=recourse_c)


def make_first_stage_toy(c_scenarios=(0.5, 1.5), probs=None):
    """Deterministic first-stage decision with scenario-dependent quadratic cost.

    min E[(x_1 - c)^2] with x_1 measurable at the trivial stage, stage-2
    decision pinned to zero, inactive dynamics. Optimal x_1 = E[c].
    """
    k = len(c_scenarios)
    if probs is None:
        tree = ScenarioTree.from_branching([k])
    else:
        tree = ScenarioTree.from_branching([k], [{0: list(probs)}])
    maps = [
        [AffineMap(np.zeros((1, 1)), np.zeros(1))],
        [AffineMap(np.zeros((1, 2)), np.zeros(1)) for _ in range(k)],
    ]
    operator = CausalOperator(tree, 1, 1, maps)
    x_by_id = {0: Box([-5.0], [5.0])}
    for nid in tree.stage_ids(2):
        x_by_id[int(nid)] = Singleton([0.0])
    x_sets = SetFamily(tree, x_by_id)
    y_sets = SetFamily.uniform(tree, Box([-np.inf], [np.inf]))
    costs = [
        [QuadraticCost([[1.0]], [c]) for c in c_scenarios],
        [QuadraticCost([[0.0]], [0.0]) for _ in range(k)],
    ]
    obj = ExpectedObjective(tree, costs, lipschitz=15.0)
    return CausalInstance(tree, operator, x_sets, y_sets, obj, cf=0.0, l_phi=15.0,
                          recourse_c=2.0, name="first-stage-toy")


def make_tiny_instance(seed):
    """Random 2-stage scalar instance, total decision dimension 3, box sets,
    identity own-stage dynamics block (recourse constant 2 holds)."""
    rng = np.random.default_rng(seed)
    p = float(rng.uniform(0.3, 0.7))
    tree = ScenarioTree.from_branching([2], [{0: [p, 1.0 - p]}])
    a = float(rng.uniform(-1.0, 1.0))
    b = rng.uniform(-0.3, 0.3, size=2)
    maps = [
        [AffineMap(np.eye(1), np.zeros(1))],
        [AffineMap(np.array([[-a, 1.0]]), np.array([b[i]])) for i in range(2)],
    ]
    operator = CausalOperator(tree, 1, 1, maps)
    w1 = float(rng.uniform(0.4, 1.2))
    slack = 0.8
    w2 = slack + abs(a) * w1 + 0.3
    x_by_id = {0: Box([-w1], [w1])}
    for i, nid in enumerate(tree.stage_ids(2)):
        x_by_id[int(nid)] = Box([-w2 - abs(b[i])], [w2 + abs(b[i])])
    x_sets = SetFamily(tree, x_by_id)
    # outputs near the reference policy x = 0: y_1 = 0, y_2 = b
    y_by_id = {0: Box([-np.inf], [np.inf])}
    for i, nid in enumerate(tree.stage_ids(2)):
        y_by_id[int(nid)] = Box([b[i] - slack], [b[i] + slack])
    y_sets = SetFamily(tree, y_by_id)
    centers = rng.uniform(-1.5, 1.5, size=(2, 2))
    costs = [[QuadraticCost([[1.0]], [centers[t, s]]) for s in range(2)] for t in range(2)]
    lip = 4.0 * (2.0 + w1 + w2)
    obj = ExpectedObjective(tree, costs, lipschitz=lip)
    return CausalInstance(tree, operator, x_sets, y_sets, obj,
                          cf=operator.certified_jacobian_bound(), l_phi=lip,
                          recourse_c=2.0, name=f"tiny-{seed}")


def random_adapted(tree, dim, mode, rng, radius=1.0):
    if mode == "builtin":
        vals = [rng.uniform(-radius, radius, size=(tree.n_at_stage(t), dim))
                for t in range(1, tree.stages + 1)]
    else:
        vals = [rng.uniform(-radius, radius, size=(tree.n_scenarios, dim))
                for _ in range(tree.stages)]
    return AdaptedVector(tree, mode, vals, copy=False)
