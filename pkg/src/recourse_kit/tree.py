"""Finite scenario trees and stage-adapted vectors.

A tree realizes a finite filtered probability space: the nodes at stage t
partition the scenario set and carry absolute probability masses, so
conditional expectation given stage t is a single weighted average over each
node's scenarios. Two storage modes exist for staged vectors:

* ``builtin``: one value per stage-t node, measurability is structural;
* ``relaxed``: one value per scenario at every stage, measurability is a
  constraint (enforced by the nonanticipativity projector).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as kernels
from .errors import DimensionMismatch, TreeStructureError

PROB_TOL = 1e-12
COLLAPSE_TOL = 1e-9


@dataclass(frozen=True)
class PNorm:
    """Exponent of the probability-weighted norm; p in [1, inf)."""

    p: float = 2.0

    def __post_init__(self):
        if not (1.0 <= self.p < np.inf):
            raise ValueError(f"norm exponent must lie in [1, inf), got {self.p}")

    @property
    def dual(self):
        return np.inf if self.p == 1.0 else self.p / (self.p - 1.0)


def _pval(p):
    p = p.p if isinstance(p, PNorm) else float(p)
    if p < 1.0:
        raise ValueError(f"norm exponent must lie in [1, inf), got {p}")
    return p


class ScenarioTree:
    """Rooted staged tree with absolute probability masses on every node.

    Nodes are indexed internally in (stage, id) order; external ids are
    preserved for serialization. Stage numbering is 1-based; scenarios are
    the nodes of the last stage.
    """

    def __init__(self, stages, ids, node_stage, parent_index, prob):
        self.stages = int(stages)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.node_stage = np.asarray(node_stage, dtype=np.int64)
        self.parent = np.asarray(parent_index, dtype=np.int64)
        self.prob = np.asarray(prob, dtype=np.float64)
        self.n_nodes = self.ids.size
        self._validate()

        self.stage_nodes = [np.flatnonzero(self.node_stage == t) for t in range(1, self.stages + 1)]
        self.stage_probs = [self.prob[idx] for idx in self.stage_nodes]
        self.scenario_nodes = self.stage_nodes[-1]
        self.n_scenarios = self.scenario_nodes.size
        self.scenario_prob = self.prob[self.scenario_nodes]

        # scenario_stage_pos[s, t-1]: position (within stage_nodes[t-1]) of the
        # stage-t ancestor of scenario s.
        pos_of = np.empty(self.n_nodes, dtype=np.int64)
        for idx in self.stage_nodes:
            pos_of[idx] = np.arange(idx.size)
        self.scenario_stage_pos = np.empty((self.n_scenarios, self.stages), dtype=np.int64)
        cur = self.scenario_nodes.copy()
        for t in range(self.stages, 0, -1):
            self.scenario_stage_pos[:, t - 1] = pos_of[cur]
            cur = self.parent[cur]
        # contiguous per-stage copies for the grouped-mean kernel
        self.stage_groups = [np.ascontiguousarray(self.scenario_stage_pos[:, t]) for t in range(self.stages)]
        self._pos_of = pos_of
        self._anc_cache = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def from_nodes(cls, stages, nodes):
        """Build from an iterable of (id, stage, parent_id_or_None, prob)."""
        rows = [(int(i), int(t), None if par is None else int(par), float(p)) for i, t, par, p in nodes]
        rows.sort(key=lambda r: (r[1], r[0]))
        ids = [r[0] for r in rows]
        if len(set(ids)) != len(ids):
            raise TreeStructureError("duplicate node ids")
        index = {i: k for k, i in enumerate(ids)}
        parent_index = []
        for i, t, par, p in rows:
            if par is None:
                parent_index.append(-1)
            elif par not in index:
                raise TreeStructureError(f"node {i} references unknown parent {par}")
            else:
                parent_index.append(index[par])
        return cls(stages, ids, [r[1] for r in rows], parent_index, [r[3] for r in rows])

    @classmethod
    def from_branching(cls, branching, probabilities=None):
        """Build from per-stage branching factors; uniform masses by default.

        ``branching`` lists the number of children per node for stages
        1..T-1. ``probabilities`` may give conditional child weights (same
        shape as the children lists), normalized per family.
        """
        branching = [int(b) for b in branching]
        stages = len(branching) + 1
        nodes = [(0, 1, None, 1.0)]
        frontier = [(0, 1.0)]
        next_id = 1
        for t, b in enumerate(branching, start=2):
            if b < 1:
                raise TreeStructureError("branching factors must be >= 1")
            new_frontier = []
            for parent_id, parent_mass in frontier:
                if probabilities is None:
                    weights = np.full(b, 1.0 / b)
                else:
                    w = np.asarray(probabilities[t - 2][parent_id], dtype=float)
                    if w.size != b or np.any(w <= 0):
                        raise TreeStructureError("invalid conditional child weights")
                    weights = w / w.sum()
                masses = parent_mass * weights
                masses[-1] = parent_mass - masses[:-1].sum()
                for k in range(b):
                    nodes.append((next_id, t, parent_id, float(masses[k])))
                    new_frontier.append((next_id, float(masses[k])))
                    next_id += 1
            frontier = new_frontier
        return cls.from_nodes(stages, nodes)

    def _validate(self):
        if self.stages < 1:
            raise TreeStructureError("a tree needs at least one stage")
        if np.any(self.prob <= 0.0):
            bad = self.ids[self.prob <= 0.0][0]
            raise TreeStructureError(f"node {bad} has non-positive probability")
        roots = np.flatnonzero(self.node_stage == 1)
        if roots.size != 1:
            raise TreeStructureError(f"expected exactly one stage-1 root, found {roots.size}")
        if self.parent[roots[0]] != -1:
            raise TreeStructureError("root must not have a parent")
        if abs(self.prob[roots[0]] - 1.0) > PROB_TOL:
            raise TreeStructureError("root probability must equal 1")
        if np.any((self.node_stage < 1) | (self.node_stage > self.stages)):
            raise TreeStructureError("node stage out of range")
        child_mass = np.zeros(self.n_nodes)
        for k in range(self.n_nodes):
            par = self.parent[k]
            if par == -1:
                if self.node_stage[k] != 1:
                    raise TreeStructureError(f"orphan node {self.ids[k]} at stage {self.node_stage[k]}")
                continue
            if self.node_stage[par] != self.node_stage[k] - 1:
                raise TreeStructureError(f"node {self.ids[k]}: parent is not at the previous stage")
            child_mass[par] += self.prob[k]
        internal = np.flatnonzero(self.node_stage < self.stages)
        gap = np.abs(child_mass[internal] - self.prob[internal])
        if internal.size and gap.max() > PROB_TOL:
            bad = self.ids[internal[int(np.argmax(gap))]]
            raise TreeStructureError(
                f"children of node {bad} have total mass off by {gap.max():.3e} (tolerance {PROB_TOL})"
            )

    # -- structure queries ------------------------------------------------

    def n_at_stage(self, t):
        return self.stage_nodes[t - 1].size

    def check_stage(self, t):
        if not (1 <= t <= self.stages):
            raise ValueError(f"stage {t} out of range 1..{self.stages}")

    def stage_ids(self, t):
        return self.ids[self.stage_nodes[t - 1]]

    def ancestor_positions(self, t_from, t_to):
        """Map stage-``t_from`` node positions to their stage-``t_to`` ancestor positions."""
        if t_to > t_from:
            raise ValueError("ancestors live at earlier stages")
        key = (t_from, t_to)
        if key not in self._anc_cache:
            cur = self.stage_nodes[t_from - 1].copy()
            for _ in range(t_from - t_to):
                cur = self.parent[cur]
            self._anc_cache[key] = self._pos_of[cur]
        return self._anc_cache[key]

    def node_scenarios(self, t, pos):
        """Scenario indices whose stage-t ancestor sits at position ``pos``."""
        return np.flatnonzero(self.scenario_stage_pos[:, t - 1] == pos)

    def to_json_dict(self):
        return {
            "stages": self.stages,
            "nodes": [
                {
                    "id": int(self.ids[k]),
                    "stage": int(self.node_stage[k]),
                    "parent": None if self.parent[k] == -1 else int(self.ids[self.parent[k]]),
                    "prob": float(self.prob[k]),
                }
                for k in range(self.n_nodes)
            ],
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls.from_nodes(d["stages"], [(n["id"], n["stage"], n["parent"], n["prob"]) for n in d["nodes"]])


def build_tree(spec):
    """Build a tree from a dict: either ``{"stages", "nodes"}`` or ``{"branching", ...}``."""
    if "nodes" in spec:
        return ScenarioTree.from_json_dict(spec)
    return ScenarioTree.from_branching(spec["branching"], spec.get("probabilities"))


class AdaptedVector:
    """Staged vector over a tree, stored per node (builtin) or per scenario (relaxed)."""

    __slots__ = ("tree", "mode", "dim", "values")

    def __init__(self, tree, mode, values, copy=True):
        if mode not in ("builtin", "relaxed"):
            raise ValueError(f"unknown mode {mode!r}")
        self.tree = tree
        self.mode = mode
        vals = []
        dim = None
        for t, arr in enumerate(values, start=1):
            if copy:
                a = np.array(arr, dtype=np.float64, order="C")
            else:
                a = np.ascontiguousarray(arr, dtype=np.float64)
            if a.ndim == 1:
                a = a[:, None]
            rows = tree.n_at_stage(t) if mode == "builtin" else tree.n_scenarios
            if a.shape[0] != rows:
                raise DimensionMismatch(
                    f"stage {t}: expected {rows} rows in {mode} mode, got {a.shape[0]}"
                )
            if dim is None:
                dim = a.shape[1]
            elif a.shape[1] != dim:
                raise DimensionMismatch("all stages must share the component dimension")
            vals.append(a)
        if len(vals) != tree.stages:
            raise DimensionMismatch(f"expected {tree.stages} stage arrays, got {len(vals)}")
        self.values = vals
        self.dim = dim

    @classmethod
    def zeros(cls, tree, mode, dim):
        rows = [tree.n_at_stage(t) for t in range(1, tree.stages + 1)] if mode == "builtin" \
            else [tree.n_scenarios] * tree.stages
        return cls(tree, mode, [np.zeros((r, dim)) for r in rows], copy=False)

    def stage(self, t):
        return self.values[t - 1]

    def copy(self):
        return AdaptedVector(self.tree, self.mode, [a.copy() for a in self.values], copy=False)

    def lift(self):
        """Relaxed view: copy each node value to all its scenarios."""
        if self.mode == "relaxed":
            return self.copy()
        out = []
        for t in range(1, self.tree.stages + 1):
            out.append(self.values[t - 1][self.tree.scenario_stage_pos[:, t - 1]])
        return AdaptedVector(self.tree, "relaxed", out, copy=False)

    def collapse(self, tol=COLLAPSE_TOL):
        """Builtin view of a relaxed vector; requires nonanticipativity gap <= tol."""
        if self.mode == "builtin":
            return self.copy()
        g = nonanticipativity_gap(self)
        if g > tol:
            raise ValueError(f"cannot collapse: nonanticipativity gap {g:.3e} exceeds {tol}")
        tree = self.tree
        out = []
        for t in range(1, tree.stages + 1):
            out.append(
                kernels.segment_weighted_mean(
                    self.values[t - 1], tree.scenario_prob,
                    tree.stage_groups[t - 1], tree.n_at_stage(t),
                )
            )
        return AdaptedVector(tree, "builtin", out, copy=False)

    def _check_compatible(self, other):
        if self.tree is not other.tree or self.mode != other.mode or self.dim != other.dim:
            raise DimensionMismatch("operands must share tree, mode and dimension")

    def __add__(self, other):
        self._check_compatible(other)
        return AdaptedVector(self.tree, self.mode,
                             [a + b for a, b in zip(self.values, other.values)], copy=False)

    def __sub__(self, other):
        self._check_compatible(other)
        return AdaptedVector(self.tree, self.mode,
                             [a - b for a, b in zip(self.values, other.values)], copy=False)

    def __mul__(self, scalar):
        return AdaptedVector(self.tree, self.mode,
                             [float(scalar) * a for a in self.values], copy=False)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def allclose(self, other, atol=1e-12):
        self._check_compatible(other)
        return all(np.allclose(a, b, atol=atol, rtol=0.0) for a, b in zip(self.values, other.values))

    def __repr__(self):
        return f"AdaptedVector(mode={self.mode}, dim={self.dim}, stages={self.tree.stages})"


def _stage_weights(v, t):
    return v.tree.stage_probs[t - 1] if v.mode == "builtin" else v.tree.scenario_prob


def conditional_expectation(v, t):
    """Average a relaxed vector over the scenarios of each stage-t node.

    Every stage component is replaced by its expectation given stage-t
    information; total expectation is preserved.
    """
    if v.mode != "relaxed":
        raise ValueError("conditional expectation acts on relaxed vectors")
    v.tree.check_stage(t)
    tree = v.tree
    groups = tree.stage_groups[t - 1]
    out = []
    for arr in v.values:
        means = kernels.segment_weighted_mean(arr, tree.scenario_prob, groups, tree.n_at_stage(t))
        out.append(means[groups])
    return AdaptedVector(tree, "relaxed", out, copy=False)


def nonanticipativity_project(x):
    """Apply the stage-wise conditional expectation (E_1, ..., E_T) to a relaxed policy."""
    if x.mode != "relaxed":
        raise ValueError("the projector acts on relaxed vectors")
    tree = x.tree
    out = []
    for t in range(1, tree.stages + 1):
        groups = tree.stage_groups[t - 1]
        means = kernels.segment_weighted_mean(x.values[t - 1], tree.scenario_prob,
                                              groups, tree.n_at_stage(t))
        out.append(means[groups])
    return AdaptedVector(tree, "relaxed", out, copy=False)


def stage_lp_norms(v, p=2.0):
    """Probability-weighted p-norm of each stage component."""
    p = _pval(p)
    out = np.empty(v.tree.stages)
    for t in range(1, v.tree.stages + 1):
        out[t - 1] = kernels.weighted_power_sum(v.values[t - 1], _stage_weights(v, t), p) ** (1.0 / p)
    return out


def lp_norm(v, p=2.0):
    """Probability-weighted p-norm over all stages and nodes."""
    p = _pval(p)
    acc = 0.0
    for t in range(1, v.tree.stages + 1):
        acc += kernels.weighted_power_sum(v.values[t - 1], _stage_weights(v, t), p)
    return acc ** (1.0 / p)


def lq_norm(v, q):
    """Dual-side norm; q = inf gives the maximum Euclidean row norm."""
    if np.isinf(q):
        worst = 0.0
        for arr in v.values:
            if arr.size:
                worst = max(worst, float(np.sqrt((arr * arr).sum(axis=1)).max()))
        return worst
    return lp_norm(v, q)


def inner_product(y, x):
    """Probability-weighted bilinear pairing; mixed modes are lifted first."""
    if y.dim != x.dim:
        raise DimensionMismatch("pairing requires equal component dimensions")
    if y.mode != x.mode:
        y = y.lift()
        x = x.lift()
    acc = 0.0
    for t in range(1, y.tree.stages + 1):
        w = _stage_weights(y, t)
        acc += float(np.einsum("i,ij,ij->", w, y.values[t - 1], x.values[t - 1]))
    return acc


def nonanticipativity_gap(x, p=2.0):
    """Sum over stages of the p-distance between x_t and its stage-t conditional expectation."""
    if x.mode == "builtin":
        return 0.0
    p = _pval(p)
    tree = x.tree
    acc = 0.0
    for t in range(1, tree.stages + 1):
        groups = tree.stage_groups[t - 1]
        means = kernels.segment_weighted_mean(x.values[t - 1], tree.scenario_prob,
                                              groups, tree.n_at_stage(t))
        diff = x.values[t - 1] - means[groups]
        acc += kernels.weighted_power_sum(diff, tree.scenario_prob, p) ** (1.0 / p)
    return acc
