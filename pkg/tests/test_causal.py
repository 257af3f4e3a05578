import numpy as np
import pytest

from recourse_kit.causal import (AffineMap, BilinearMap, CausalOperator, SmoothMap,
                                 fd_check_jacobian)
from recourse_kit.errors import DimensionMismatch
from recourse_kit.tree import AdaptedVector, ScenarioTree, inner_product, lp_norm, \
    nonanticipativity_gap

from conftest import random_adapted


def identity_operator(tree):
    maps = []
    for t in range(1, tree.stages + 1):
        A = np.zeros((1, t))
        A[0, t - 1] = 1.0
        maps.append([AffineMap(A, np.zeros(1)) for _ in range(tree.n_at_stage(t))])
    return CausalOperator(tree, 1, 1, maps)


def difference_operator(tree):
    maps = []
    for t in range(1, tree.stages + 1):
        A = np.zeros((1, t))
        A[0, t - 1] = 1.0
        if t > 1:
            A[0, t - 2] = -1.0
        maps.append([AffineMap(A, np.zeros(1)) for _ in range(tree.n_at_stage(t))])
    return CausalOperator(tree, 1, 1, maps)


def random_smooth_operator(tree, n, m, rng, name="tanh"):
    maps = []
    for t in range(1, tree.stages + 1):
        stage = []
        for _ in range(tree.n_at_stage(t)):
            k = 3
            stage.append(SmoothMap(
                name,
                rng.uniform(-0.5, 0.5, size=(m, n * t)),
                rng.uniform(-0.5, 0.5, size=m),
                rng.uniform(-0.5, 0.5, size=(m, k)),
                rng.uniform(-0.5, 0.5, size=(k, n * t)),
                rng.uniform(-0.5, 0.5, size=k)))
        maps.append(stage)
    return CausalOperator(tree, n, m, maps)


class TestEvaluate:
    def test_telescoping_constant_policy(self, three_stage_tree):
        F = difference_operator(three_stage_tree)
        x = AdaptedVector(three_stage_tree, "builtin",
                          [np.full((three_stage_tree.n_at_stage(t), 1), 0.7) for t in (1, 2, 3)])
        y = F.evaluate(x)
        assert np.allclose(y.stage(2), 0.0) and np.allclose(y.stage(3), 0.0)

    def test_identity_operator(self, three_stage_tree):
        F = identity_operator(three_stage_tree)
        rng = np.random.default_rng(0)
        x = random_adapted(three_stage_tree, 1, "builtin", rng)
        assert F.evaluate(x).allclose(x)

    def test_sine_at_zero(self):
        tree = ScenarioTree.from_branching([])
        F = CausalOperator(tree, 1, 1,
                           [[SmoothMap("sin", None, None, np.eye(1), np.eye(1), np.zeros(1))]])
        x = AdaptedVector.zeros(tree, "builtin", 1)
        assert F.evaluate(x).stage(1)[0, 0] == 0.0

    def test_builtin_and_relaxed_evaluation_agree_on_lift(self, three_stage_tree):
        rng = np.random.default_rng(1)
        F = random_smooth_operator(three_stage_tree, 2, 2, rng)
        x = random_adapted(three_stage_tree, 2, "builtin", rng)
        yb = F.evaluate(x)
        yr = F.evaluate(x.lift())
        assert yr.allclose(yb.lift(), atol=1e-13)

    def test_causality_future_perturbation(self, three_stage_tree):
        rng = np.random.default_rng(2)
        F = random_smooth_operator(three_stage_tree, 2, 2, rng)
        x = random_adapted(three_stage_tree, 2, "builtin", rng)
        y1 = F.evaluate(x)
        x2 = x.copy()
        x2.stage(3)[:] += rng.standard_normal(x2.stage(3).shape)
        y2 = F.evaluate(x2)
        assert np.allclose(y1.stage(1), y2.stage(1))
        assert np.allclose(y1.stage(2), y2.stage(2))

    def test_dimension_mismatch(self, two_stage_tree):
        F = identity_operator(two_stage_tree)
        with pytest.raises(DimensionMismatch):
            F.evaluate(AdaptedVector.zeros(two_stage_tree, "builtin", 3))


class TestJacobianBlocks:
    def test_affine_blocks_independent_of_x(self, two_stage_tree):
        F = difference_operator(two_stage_tree)
        rng = np.random.default_rng(3)
        x = random_adapted(two_stage_tree, 1, "builtin", rng)
        np.testing.assert_allclose(F.jacobian_block(x, 2, 2, 0), [[1.0]])
        np.testing.assert_allclose(F.jacobian_block(x, 2, 1, 0), [[-1.0]])

    def test_sine_at_zero_gives_identity(self):
        tree = ScenarioTree.from_branching([])
        F = CausalOperator(tree, 1, 1,
                           [[SmoothMap("sin", None, None, np.eye(1), np.eye(1), np.zeros(1))]])
        x = AdaptedVector.zeros(tree, "builtin", 1)
        np.testing.assert_allclose(F.jacobian_block(x, 1, 1, 0), [[1.0]])

    def test_future_block_rejected(self, two_stage_tree):
        F = difference_operator(two_stage_tree)
        x = AdaptedVector.zeros(two_stage_tree, "builtin", 1)
        with pytest.raises(ValueError, match="causality"):
            F.jacobian_block(x, 1, 2, 0)


class TestApplyJacobian:
    def test_zero_direction(self, three_stage_tree):
        rng = np.random.default_rng(4)
        F = random_smooth_operator(three_stage_tree, 2, 3, rng)
        x = random_adapted(three_stage_tree, 2, "builtin", rng)
        h = AdaptedVector.zeros(three_stage_tree, "builtin", 2)
        assert lp_norm(F.apply_jacobian(x, h)) == 0.0

    def test_affine_exactness(self, three_stage_tree):
        rng = np.random.default_rng(5)
        F = difference_operator(three_stage_tree)
        x = random_adapted(three_stage_tree, 1, "builtin", rng)
        h = random_adapted(three_stage_tree, 1, "builtin", rng)
        lin = F.apply_jacobian(x, h)
        exact = F.evaluate(x + h) - F.evaluate(x)
        assert lin.allclose(exact, atol=1e-12)

    def test_linearity(self, three_stage_tree):
        rng = np.random.default_rng(6)
        F = random_smooth_operator(three_stage_tree, 2, 2, rng)
        x = random_adapted(three_stage_tree, 2, "relaxed", rng)
        h = random_adapted(three_stage_tree, 2, "relaxed", rng)
        assert F.apply_jacobian(x, 2.0 * h).allclose(2.0 * F.apply_jacobian(x, h), atol=1e-12)

    def test_mode_mismatch(self, two_stage_tree):
        F = identity_operator(two_stage_tree)
        x = AdaptedVector.zeros(two_stage_tree, "builtin", 1)
        h = AdaptedVector.zeros(two_stage_tree, "relaxed", 1)
        with pytest.raises(DimensionMismatch):
            F.apply_jacobian(x, h)


class TestAdjoint:
    def test_zero_dual(self, three_stage_tree):
        rng = np.random.default_rng(7)
        F = random_smooth_operator(three_stage_tree, 2, 2, rng)
        x = random_adapted(three_stage_tree, 2, "builtin", rng)
        psi = AdaptedVector.zeros(three_stage_tree, "builtin", 2)
        assert lp_norm(F.apply_adjoint(x, psi)) == 0.0

    def test_single_stage_modes_agree(self):
        tree = ScenarioTree.from_branching([])
        rng = np.random.default_rng(8)
        F = random_smooth_operator(tree, 2, 3, rng)
        x = random_adapted(tree, 2, "builtin", rng)
        psi = random_adapted(tree, 3, "builtin", rng)
        out_b = F.apply_adjoint(x, psi)
        out_r = F.apply_adjoint(x.lift(), psi.lift())
        assert out_r.allclose(out_b.lift(), atol=1e-13)

    @pytest.mark.parametrize("mode", ["builtin", "relaxed"])
    def test_pairing_identity(self, three_stage_tree, mode):
        rng = np.random.default_rng(9)
        for trial in range(10):
            F = random_smooth_operator(three_stage_tree, 2, 2, rng,
                                       name=("tanh", "sin", "softplus")[trial % 3])
            x = random_adapted(three_stage_tree, 2, mode, rng)
            psi = random_adapted(three_stage_tree, 2, mode, rng)
            h = random_adapted(three_stage_tree, 2, mode, rng)
            lhs = inner_product(psi, F.apply_jacobian(x, h))
            rhs = inner_product(F.apply_adjoint(x, psi), h)
            assert abs(lhs - rhs) <= 1e-12

    def test_builtin_output_is_adapted(self, three_stage_tree):
        rng = np.random.default_rng(10)
        F = random_smooth_operator(three_stage_tree, 2, 2, rng)
        x = random_adapted(three_stage_tree, 2, "builtin", rng)
        psi = random_adapted(three_stage_tree, 2, "builtin", rng)
        out = F.apply_adjoint(x, psi)
        assert out.mode == "builtin"
        assert nonanticipativity_gap(out.lift()) <= 1e-12


class TestLipschitz:
    def test_certified_bound_dominates_samples(self, three_stage_tree):
        rng = np.random.default_rng(11)
        F = random_smooth_operator(three_stage_tree, 2, 2, rng)
        bound = F.certified_jacobian_bound()
        assert F.cf == pytest.approx(bound)
        H = F.histories(random_adapted(three_stage_tree, 2, "builtin", rng), 3)
        for row in H:
            J = F.map_at(3, 0).jacobian(row)
            assert np.linalg.norm(J, 2) <= bound + 1e-12

    def test_stagewise_lipschitz_bound(self, three_stage_tree):
        rng = np.random.default_rng(12)
        F = random_smooth_operator(three_stage_tree, 2, 2, rng)
        L = np.sqrt(three_stage_tree.stages) * F.cf
        for _ in range(15):
            x = random_adapted(three_stage_tree, 2, "relaxed", rng)
            z = random_adapted(three_stage_tree, 2, "relaxed", rng)
            lhs = lp_norm(F.evaluate(x) - F.evaluate(z), 2)
            assert lhs <= L * lp_norm(x - z, 2) + 1e-10

    def test_affine_declared_bound_validated(self, two_stage_tree):
        maps = [[AffineMap(np.array([[3.0]]), np.zeros(1))],
                [AffineMap(np.array([[0.0, 1.0]]), np.zeros(1)) for _ in range(2)]]
        with pytest.raises(ValueError, match="below the exact affine bound"):
            CausalOperator(two_stage_tree, 1, 1, maps, cf=1.0)


class TestFdCheck:
    def test_affine_exact(self, two_stage_tree):
        F = difference_operator(two_stage_tree)
        rng = np.random.default_rng(13)
        x = random_adapted(two_stage_tree, 1, "builtin", rng)
        dirs = [random_adapted(two_stage_tree, 1, "builtin", rng) for _ in range(5)]
        rep = fd_check_jacobian(F, x, dirs)
        assert rep.passed
        # linearization error is exactly zero; what remains is quotient roundoff (~eps/tau)
        assert rep.max_error <= 1e-10
        assert rep.max_error_by_tau[0] <= 1e-12

    def test_sine_central_difference_accuracy(self):
        tree = ScenarioTree.from_branching([2])
        rng = np.random.default_rng(14)
        F = random_smooth_operator(tree, 1, 1, rng, name="sin")
        x = random_adapted(tree, 1, "builtin", rng)
        dirs = [random_adapted(tree, 1, "builtin", rng) for _ in range(5)]
        rep = fd_check_jacobian(F, x, dirs, taus=(1e-3, 1e-4, 1e-5))
        assert rep.passed
        assert rep.max_error <= 1e-9

    def test_forward_quotient_decays(self, two_stage_tree):
        rng = np.random.default_rng(15)
        F = random_smooth_operator(two_stage_tree, 1, 1, rng, name="tanh")
        x = random_adapted(two_stage_tree, 1, "builtin", rng)
        dirs = [random_adapted(two_stage_tree, 1, "builtin", rng)]
        rep = fd_check_jacobian(F, x, dirs, taus=(1e-2, 1e-3, 1e-4))
        assert rep.forward_error_by_tau[0] > rep.forward_error_by_tau[-1]

    def test_zero_direction_zero_quotient(self, two_stage_tree):
        F = difference_operator(two_stage_tree)
        x = AdaptedVector.zeros(two_stage_tree, "builtin", 1)
        rep = fd_check_jacobian(F, x, [AdaptedVector.zeros(two_stage_tree, "builtin", 1)])
        assert rep.max_error == 0.0

    def test_bilinear_jacobian(self):
        tree = ScenarioTree.from_branching([])
        rng = np.random.default_rng(16)
        Q = rng.uniform(-0.5, 0.5, size=(2, 2, 2))
        mp = BilinearMap(rng.uniform(-1, 1, size=(2, 2)), np.zeros(2), Q, input_radius=3.0)
        F = CausalOperator(tree, 2, 2, [[mp]])
        x = random_adapted(tree, 2, "builtin", rng)
        dirs = [random_adapted(tree, 2, "builtin", rng) for _ in range(5)]
        rep = fd_check_jacobian(F, x, dirs)
        assert rep.passed
