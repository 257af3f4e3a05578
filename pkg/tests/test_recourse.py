import numpy as np
import pytest

from recourse_kit.causal import AffineMap, SmoothMap
from recourse_kit.errors import InfeasibleNodeError, RestorationError
from recourse_kit.instances import GeneratorSpec, generate, random_policy
from recourse_kit.recourse import (estimate_recourse_constant, node_recourse_solve,
                                   restore_builtin, restore_relaxed, stage_constants_builtin,
                                   stage_constants_relaxed, verify_recourse_constant)
from recourse_kit.sets import Box, Singleton, SetFamily
from recourse_kit.tree import AdaptedVector, ScenarioTree, lp_norm, nonanticipativity_gap

from conftest import make_chain_instance, make_tiny_instance


FREE = Box([-np.inf], [np.inf])


class TestNodeSolve:
    def test_feasible_target_is_fixed_point(self):
        r = node_recourse_solve(AffineMap(np.eye(1), np.zeros(1)), np.zeros(0),
                                np.array([0.5]), Box([0.0], [1.0]), FREE)
        assert r.xi[0] == 0.5 and r.ratio == 0.0

    def test_pure_projection(self):
        r = node_recourse_solve(AffineMap(np.eye(1), np.zeros(1)), np.zeros(0),
                                np.array([1.5]), Box([0.0], [1.0]), FREE)
        assert r.xi[0] == pytest.approx(1.0, abs=1e-12)
        assert abs(r.xi[0] - 1.5) == pytest.approx(0.5, abs=1e-12)
        assert r.ratio == pytest.approx(1.0, abs=1e-9)

    def test_forced_equality(self):
        # dynamics xi - zeta pinned to zero forces xi = zeta
        fmap = AffineMap(np.array([[-1.0, 1.0]]), np.zeros(1))
        for eta in (-2.0, 0.3, 4.0):
            r = node_recourse_solve(fmap, np.array([0.7]), np.array([eta]),
                                    FREE, Singleton([0.0]))
            assert r.xi[0] == pytest.approx(0.7, abs=1e-9)
            if abs(eta - 0.7) > 1e-9:
                assert r.ratio == pytest.approx(1.0, abs=1e-6)

    def test_box_intersection_solve(self):
        # xi in [0, 1] with xi + 0.5 in [1.2, 2.0]: feasible interval [0.7, 1.0]
        fmap = AffineMap(np.eye(1), np.array([0.5]))
        r = node_recourse_solve(fmap, np.zeros(0), np.array([0.0]),
                                Box([0.0], [1.0]), Box([1.2], [2.0]))
        assert r.xi[0] == pytest.approx(0.7, abs=1e-9)

    def test_infeasible_system_raises(self):
        fmap = AffineMap(np.eye(1), np.zeros(1))
        with pytest.raises(InfeasibleNodeError):
            node_recourse_solve(fmap, np.zeros(0), np.array([0.0]),
                                Box([0.0], [1.0]), Singleton([5.0]), stage=2, node_id=7)

    def test_infeasible_error_names_node(self):
        fmap = AffineMap(np.eye(1), np.zeros(1))
        with pytest.raises(InfeasibleNodeError, match="stage 2, node 7"):
            node_recourse_solve(fmap, np.zeros(0), np.array([0.0]),
                                Box([0.0], [1.0]), Singleton([5.0]), stage=2, node_id=7)

    def test_smooth_dynamics_gauss_newton(self):
        fmap = SmoothMap("tanh", None, None, np.eye(1), np.eye(1), np.zeros(1))
        r = node_recourse_solve(fmap, np.zeros(0), np.array([0.0]),
                                Box([-3.0], [3.0]), Box([0.4], [0.9]))
        assert r.feasible
        assert 0.4 - 1e-9 <= np.tanh(r.xi[0]) <= 0.9 + 1e-9

    def test_ball_set_iterative_path(self):
        fmap = AffineMap(np.eye(2), np.zeros(2))
        from recourse_kit.sets import Ball
        r = node_recourse_solve(fmap, np.zeros(0), np.array([3.0, 4.0]),
                                Ball([0.0, 0.0], 1.0), Box([-np.inf] * 2, [np.inf] * 2))
        assert r.feasible
        np.testing.assert_allclose(r.xi, [0.6, 0.8], atol=1e-7)


class TestRestoreBuiltin:
    def test_feasible_input_unchanged(self, three_stage_tree):
        inst = make_chain_instance(three_stage_tree)
        x = AdaptedVector(three_stage_tree, "builtin",
                          [np.full((three_stage_tree.n_at_stage(t), 1), 0.3) for t in (1, 2, 3)])
        rep = restore_builtin(inst, x)
        assert rep.restored.allclose(x)
        assert np.all(rep.deviations == 0.0)
        assert rep.bound_ok

    def test_single_stage_clamp(self):
        tree = ScenarioTree.from_branching([])
        inst = make_chain_instance(tree)
        inst.x_sets = SetFamily.uniform(tree, Box([0.0], [1.0]))
        u = AdaptedVector(tree, "builtin", [np.array([[1.8]])])
        rep = restore_builtin(inst, u)
        assert rep.restored.stage(1)[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert rep.deviations[0] == pytest.approx(0.8, abs=1e-12)

    def test_two_stage_chain_hand_solve(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        u = AdaptedVector(two_stage_tree, "builtin", [[[0.5]], [[0.9], [0.9]]])
        rep = restore_builtin(inst, u)
        np.testing.assert_allclose(rep.restored.stage(1).ravel(), [0.5])
        np.testing.assert_allclose(rep.restored.stage(2).ravel(), [0.5, 0.5])
        assert rep.deviations[1] == pytest.approx(0.4, abs=1e-12)
        assert rep.input_dist_f[1] == pytest.approx(0.4, abs=1e-12)
        assert rep.bound_ok

    def test_idempotent(self):
        pif = generate(GeneratorSpec(seed=11, stages=3, branching=(2, 2), n=2, m=2))
        inst = pif.instance
        rng = np.random.default_rng(0)
        u = random_policy(inst.tree, inst.n, "builtin", rng, radius=3.0)
        rep1 = restore_builtin(inst, u)
        rep2 = restore_builtin(inst, rep1.restored)
        assert rep2.restored.allclose(rep1.restored)
        assert np.all(rep2.deviations == 0.0)

    def test_certificate_monotone(self):
        for C, L, T in ((2.0, 1.5, 4), (1.0, 0.0, 3), (3.0, 2.0, 5)):
            cb = stage_constants_builtin(C, L, T)
            cr = stage_constants_relaxed(C, L, T)
            assert np.all(np.diff(cb) >= 0)
            assert np.all(np.diff(cr) >= 0)

    def test_mode_enforced(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        with pytest.raises(ValueError, match="builtin"):
            restore_builtin(inst, AdaptedVector.zeros(two_stage_tree, "relaxed", 1))


class TestRestoreRelaxed:
    def test_adapted_feasible_unchanged(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        x = AdaptedVector(two_stage_tree, "builtin", [[[0.2]], [[0.2], [0.2]]]).lift()
        rep = restore_relaxed(inst, x)
        assert rep.restored.allclose(x, atol=1e-12)

    def test_nonadapted_unconstrained_projects(self, two_stage_tree):
        tree = two_stage_tree
        inst = make_chain_instance(tree)
        inst.y_sets = SetFamily.uniform(tree, FREE)  # drop dynamics pinning
        u = AdaptedVector(tree, "relaxed", [[[1.0], [3.0]], [[5.0], [5.0]]])
        rep = restore_relaxed(inst, u)
        np.testing.assert_allclose(rep.restored.stage(1).ravel(), [2.0, 2.0])
        gap = nonanticipativity_gap(u)
        assert rep.deviations.sum() == pytest.approx(gap, abs=1e-12)

    def test_single_stage_box_average(self):
        # two equiprobable scenarios, X = [0, 1], u = (1.5, 0.5): target E[u] = 1.0
        tree = ScenarioTree.from_branching([2])
        inst = make_chain_instance(tree)
        inst.y_sets = SetFamily.uniform(tree, FREE)
        by_id = {0: Box([0.0], [1.0]), 1: FREE, 2: FREE}
        inst.x_sets = SetFamily(tree, by_id)
        u = AdaptedVector(tree, "relaxed", [[[1.5], [0.5]], [[0.0], [0.0]]])
        rep = restore_relaxed(inst, u)
        np.testing.assert_allclose(rep.restored.stage(1).ravel(), [1.0, 1.0])
        assert rep.deviations[0] == pytest.approx(0.5, abs=1e-12)
        assert rep.bound_ok

    def test_output_always_adapted(self):
        pif = generate(GeneratorSpec(seed=21, stages=3, branching=(2, 3), n=2, m=2))
        inst = pif.instance
        rng = np.random.default_rng(1)
        u = random_policy(inst.tree, inst.n, "relaxed", rng, radius=3.0)
        rep = restore_relaxed(inst, u)
        assert nonanticipativity_gap(rep.restored) <= 1e-12
        assert rep.bound_ok


class TestConstants:
    def test_box_only_instance_passes_with_any_c_at_least_one(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        inst.y_sets = SetFamily.uniform(two_stage_tree, FREE)
        inst.x_sets = SetFamily.uniform(two_stage_tree, Box([-1.0], [1.0]))
        rep = verify_recourse_constant(inst, 1.0, n_samples=100, seed=0)
        assert rep.passed
        assert rep.max_ratio <= 1.0 + 1e-9

    def test_forced_equality_ratios_one(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)  # chain with pinned outputs, free X
        rep = verify_recourse_constant(inst, 1.0, n_samples=120, seed=1)
        assert rep.passed
        assert rep.max_ratio == pytest.approx(1.0, abs=1e-9)

    def test_seed_reproducibility(self):
        pif = generate(GeneratorSpec(seed=31, stages=3, branching=(2, 2), n=2, m=2))
        r1 = verify_recourse_constant(pif.instance, 2.0, n_samples=60, seed=5)
        r2 = verify_recourse_constant(pif.instance, 2.0, n_samples=60, seed=5)
        assert r1.max_ratio == r2.max_ratio

    def test_estimate_box_only_doubles_ratio(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        inst.y_sets = SetFamily.uniform(two_stage_tree, FREE)
        inst.x_sets = SetFamily.uniform(two_stage_tree, Box([-1.0], [1.0]))
        c = estimate_recourse_constant(inst, n_samples=100, seed=2)
        assert c == pytest.approx(2.0, abs=1e-6)

    def test_estimate_defaults_to_one_when_all_feasible(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        inst.y_sets = SetFamily.uniform(two_stage_tree, FREE)  # everything feasible
        c = estimate_recourse_constant(inst, n_samples=50, seed=3)
        assert c == 1.0

    def test_estimate_deterministic(self):
        pif = generate(GeneratorSpec(seed=41, stages=2, branching=(3,), n=2, m=2))
        c1 = estimate_recourse_constant(pif.instance, n_samples=80, seed=9)
        c2 = estimate_recourse_constant(pif.instance, n_samples=80, seed=9)
        assert c1 == c2

    def test_report_states_sampled_region(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        rep = verify_recourse_constant(inst, 2.0, n_samples=20, seed=4)
        assert len(rep.eta_box) == 2
        assert rep.to_json_dict()["eta_box"] == rep.eta_box


class TestRestorationErrors:
    def test_infeasible_node_propagates(self, two_stage_tree):
        inst = make_chain_instance(two_stage_tree)
        # stage-2 output pinned to zero AND stage-2 decision pinned away from reachability
        by_id = {0: FREE, 1: Singleton([3.0]), 2: Singleton([3.0])}
        inst.x_sets = SetFamily(two_stage_tree, by_id)
        u = AdaptedVector(two_stage_tree, "builtin", [[[0.0]], [[0.0], [0.0]]])
        with pytest.raises(InfeasibleNodeError):
            restore_builtin(inst, u)

    def test_tiny_instances_restore_from_anywhere(self):
        rng = np.random.default_rng(5)
        for seed in range(5):
            inst = make_tiny_instance(seed)
            for _ in range(5):
                u = random_policy(inst.tree, inst.n, "builtin", rng, radius=3.0)
                rep = restore_builtin(inst, u)
                assert rep.bound_ok, rep.to_json_dict()
