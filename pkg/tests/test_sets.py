import numpy as np
import pytest

from recourse_kit.sets import (Ball, Box, ConeHull, Orthant, Polyhedron, SetFamily, Singleton,
                               Subspace, cones_equal, polar_pointwise, set_from_json,
                               verify_decomposable_polar)
from recourse_kit.tree import ScenarioTree


class TestProjection:
    def test_box_clamp(self):
        b = Box([0.0], [1.0])
        assert b.project(np.array([1.7])) == pytest.approx(1.0)

    def test_fixed_point_inside(self):
        b = Box([0.0, -1.0], [1.0, 1.0])
        z = np.array([0.3, -0.2])
        np.testing.assert_allclose(b.project(z), z)

    def test_ball_radial(self):
        ball = Ball([0.0, 0.0], 1.0)
        np.testing.assert_allclose(ball.project(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        sets = [Box([-1.0, 0.0], [1.0, 2.0]), Ball([0.5, 0.5], 0.7),
                Polyhedron([[1.0, 1.0], [-1.0, 0.0]], [1.0, 0.0]),
                Subspace(np.array([[1.0], [1.0]]))]
        for s in sets:
            for _ in range(20):
                z = rng.uniform(-3, 3, size=2)
                p = s.project(z)
                np.testing.assert_allclose(s.project(p), p, atol=1e-9)

    def test_firmly_nonexpansive(self):
        rng = np.random.default_rng(1)
        sets = [Box([-1.0, 0.0], [1.0, 2.0]), Ball([0.0, 0.0], 1.2),
                Polyhedron([[1.0, 2.0], [-1.0, 1.0], [0.0, -1.0]], [1.0, 0.5, 0.2])]
        for s in sets:
            for _ in range(30):
                z = rng.uniform(-3, 3, size=2)
                w = rng.uniform(-3, 3, size=2)
                pz, pw = s.project(z), s.project(w)
                assert np.dot(pz - pw, pz - pw) <= np.dot(pz - pw, z - w) + 1e-10

    def test_polyhedron_variational_inequality(self):
        # <z - Pz, w - Pz> <= 0 for all w in S characterizes the projection
        rng = np.random.default_rng(2)
        G = np.array([[1.0, 1.0], [-1.0, 0.5], [0.0, -1.0], [0.3, -0.9]])
        h = np.array([1.0, 0.8, 0.6, 0.9])
        s = Polyhedron(G, h)
        for _ in range(25):
            z = rng.uniform(-4, 4, size=2)
            pz = s.project(z)
            assert s.distance(pz) <= 1e-9
            for _ in range(20):
                w = s.project(rng.uniform(-4, 4, size=2))
                assert np.dot(z - pz, w - pz) <= 1e-8


class TestDistance:
    def test_box_example(self):
        assert Box([0.0], [1.0]).distance(np.array([1.7])) == pytest.approx(0.7)

    def test_zero_inside(self):
        s = Ball([1.0, 1.0], 0.5)
        assert s.distance(np.array([1.1, 1.2])) == 0.0

    def test_singleton(self):
        s = Singleton([1.0, 2.0])
        assert s.distance(np.array([4.0, 6.0])) == pytest.approx(5.0)

    def test_one_lipschitz(self):
        rng = np.random.default_rng(3)
        sets = [Box([-1.0, -1.0], [1.0, 1.0]), Ball([0.0, 0.0], 1.0),
                Polyhedron([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5]), Singleton([0.3, -0.3])]
        for s in sets:
            for _ in range(40):
                z = rng.uniform(-3, 3, size=2)
                w = rng.uniform(-3, 3, size=2)
                assert abs(s.distance(z) - s.distance(w)) <= np.linalg.norm(z - w) + 1e-12


class TestNormalCone:
    def test_box_outward_at_upper(self):
        b = Box([0.0], [1.0])
        assert b.normal_cone_residual(np.array([1.0]), np.array([2.5])) == 0.0

    def test_interior_only_zero(self):
        b = Box([0.0, 0.0], [1.0, 1.0])
        v = np.array([0.4, -0.3])
        x = np.array([0.5, 0.5])
        assert b.normal_cone_residual(x, v) == pytest.approx(np.linalg.norm(v))

    def test_box_wrong_sign(self):
        b = Box([0.0], [1.0])
        assert b.normal_cone_residual(np.array([1.0]), np.array([-1.0])) == pytest.approx(1.0)

    def test_requires_membership(self):
        b = Box([0.0], [1.0])
        with pytest.raises(ValueError, match="not in the set"):
            b.normal_cone_residual(np.array([2.0]), np.array([1.0]))

    def test_ball_boundary(self):
        ball = Ball([0.0, 0.0], 1.0)
        x = np.array([1.0, 0.0])
        assert ball.normal_cone_residual(x, np.array([2.0, 0.0])) == pytest.approx(0.0)
        assert ball.normal_cone_residual(x, np.array([-1.0, 0.0])) == pytest.approx(1.0)

    def test_polyhedron_active_cone(self):
        s = Polyhedron([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
        corner = np.array([1.0, 1.0])
        assert s.normal_cone_residual(corner, np.array([0.5, 0.7])) <= 1e-12
        assert s.normal_cone_residual(corner, np.array([-1.0, 0.0])) == pytest.approx(1.0, abs=1e-9)

    def test_distance_gradient_is_normal(self):
        # (z - Pz)/|z - Pz| lies in the normal cone at Pz, for z outside
        rng = np.random.default_rng(4)
        sets = [Box([-1.0, -1.0], [1.0, 1.0]), Ball([0.2, 0.2], 0.8),
                Polyhedron([[1.0, 1.0], [-1.0, 0.0]], [0.5, 0.5])]
        for s in sets:
            for _ in range(25):
                z = rng.uniform(-4, 4, size=2)
                if s.distance(z) < 1e-6:
                    continue
                pz = s.project(z)
                g = (z - pz) / np.linalg.norm(z - pz)
                assert s.normal_cone_residual(pz, g) <= 1e-7


class TestPolar:
    def test_nonnegative_orthant(self):
        c = Orthant(("+", "+", "+"))
        p = polar_pointwise(c)
        assert p.signs == ("-", "-", "-")

    def test_subspace_complement(self):
        v = Subspace(np.array([[1.0], [1.0]]))
        p = polar_pointwise(v)
        assert p.kind == "subspace"
        assert abs(p.basis[:, 0] @ np.array([1.0, 1.0])) <= 1e-12

    def test_origin_gives_full_space(self):
        c = Singleton([0.0, 0.0])
        p = polar_pointwise(c)
        z = np.array([3.0, -4.0])
        np.testing.assert_allclose(p.project(z), z)

    def test_double_polar_identity(self):
        rng = np.random.default_rng(5)
        cones = [
            Orthant(("+", "-", "0", "free")),
            Subspace(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).T[:, :1], dim=2),
            Box([0.0, -np.inf], [np.inf, 0.0]),
            Polyhedron([[1.0, 1.0], [-1.0, 2.0]], [0.0, 0.0]),
            ConeHull(np.array([[1.0, 0.2], [0.0, 1.0]])),
        ]
        for c in cones:
            cc = polar_pointwise(polar_pointwise(c))
            assert cones_equal(c, cc, rng), f"double polar failed for {c.kind}"

    def test_non_cone_rejected(self):
        with pytest.raises(ValueError):
            polar_pointwise(Ball([0.0], 1.0))
        with pytest.raises(ValueError):
            polar_pointwise(Box([0.0], [2.0]))

    def test_moreau_decomposition(self):
        rng = np.random.default_rng(6)
        cones = [Orthant(("+", "+")), Polyhedron([[1.0, -1.0], [0.5, 1.0]], [0.0, 0.0])]
        for c in cones:
            p = polar_pointwise(c)
            for _ in range(20):
                z = rng.uniform(-2, 2, size=2)
                np.testing.assert_allclose(c.project(z) + p.project(z), z, atol=1e-8)
                assert c.project(z) @ p.project(z) == pytest.approx(0.0, abs=1e-8)


class TestDecomposablePolar:
    def test_all_nonnegative_nodes(self, two_stage_tree):
        fam = SetFamily.uniform(two_stage_tree, Orthant(("+", "+")))
        rep = verify_decomposable_polar(fam, samples=60, seed=0)
        assert rep.passed and rep.max_violation <= 1e-12

    def test_mixed_family(self, three_stage_tree):
        rng = np.random.default_rng(7)
        by_id = {}
        for nid in three_stage_tree.ids:
            pick = rng.integers(0, 3)
            if pick == 0:
                by_id[int(nid)] = Orthant(tuple(rng.choice(["+", "-", "0", "free"], size=2)))
            elif pick == 1:
                by_id[int(nid)] = Subspace(rng.standard_normal((2, 1)))
            else:
                by_id[int(nid)] = Polyhedron(rng.standard_normal((2, 2)), np.zeros(2))
        rep = verify_decomposable_polar(SetFamily(three_stage_tree, by_id), samples=80, seed=8)
        assert rep.passed, rep.to_json_dict()

    def test_single_node_tree(self):
        tree = ScenarioTree.from_branching([])
        fam = SetFamily.uniform(tree, Orthant(("+", "-")))
        rep = verify_decomposable_polar(fam, samples=40, seed=9)
        assert rep.passed


class TestSerialization:
    def test_box_json_roundtrip_with_inf(self):
        b = Box([0.0, -np.inf], [np.inf, 2.5])
        d = b.to_json_dict()
        assert d["upper"][0] == "inf" and d["lower"][1] == "-inf"
        b2 = set_from_json(d)
        assert np.isposinf(b2.upper[0]) and b2.lower[0] == 0.0

    def test_all_kinds_roundtrip(self):
        rng = np.random.default_rng(10)
        sets = [Box([-1.0], [2.0]), Ball([0.5, 0.5], 1.5), Singleton([1.0, -1.0]),
                Orthant(("+", "free")), Subspace(rng.standard_normal((3, 2))),
                Polyhedron(rng.standard_normal((3, 2)), np.ones(3)),
                ConeHull(rng.standard_normal((2, 2)))]
        for s in sets:
            s2 = set_from_json(s.to_json_dict())
            z = rng.uniform(-2, 2, size=s.dim)
            np.testing.assert_allclose(s.project(z), s2.project(z), atol=1e-10)

    def test_polyhedron_nonempty_check(self):
        with pytest.raises(ValueError, match="empty"):
            Polyhedron([[1.0], [-1.0]], [-2.0, -2.0], check_nonempty=True)
        Polyhedron([[1.0], [-1.0]], [1.0, 1.0], check_nonempty=True)


class TestSetFamily:
    def test_missing_node_rejected(self, two_stage_tree):
        with pytest.raises(ValueError, match="missing node"):
            SetFamily(two_stage_tree, {0: Box([0.0], [1.0])})

    def test_scenario_view_uses_ancestor_set(self, two_stage_tree):
        fam = SetFamily(two_stage_tree, {0: Box([0.0], [1.0]),
                                         1: Box([-1.0], [0.0]), 2: Box([2.0], [3.0])})
        stage1 = fam.at_scenarios(1)
        assert stage1[0] is stage1[1]
        stage2 = fam.at_scenarios(2)
        assert stage2[0].lower[0] == -1.0 and stage2[1].lower[0] == 2.0
