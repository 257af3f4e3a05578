"""Lipschitz objective functionals with subgradient oracles.

Kinds: expected cumulative cost, CVaR of the total cost, and weighted sums
of those. Stage costs are keyed per scenario (integrands may depend on the
elementary event even at early stages); adapted policies read their node
value along each scenario.

Convention for duals: node-stored subgradient values are raw Euclidean
gradients; probability weights enter through the bilinear pairing, never
through the stored values. On relaxed policies every objective extends
naturally by scenario-wise evaluation, which agrees with the builtin value
whenever the policy is nonanticipative.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as kernels
from .errors import DimensionMismatch
from .tree import AdaptedVector, lp_norm, lq_norm


class StageCost:
    """Scalar cost of a stage decision in R^n."""

    kind = "abstract"

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def value_batch(self, X):
        return np.array([self.value(r) for r in X])

    def grad_batch(self, X):
        return np.array([self.grad(r) for r in X])


class LinearCost(StageCost):
    kind = "linear"

    def __init__(self, a, c0=0.0):
        self.a = np.asarray(a, dtype=np.float64)
        self.c0 = float(c0)

    def value(self, x):
        return float(self.a @ x + self.c0)

    def grad(self, x):
        return self.a.copy()

    def value_batch(self, X):
        return X @ self.a + self.c0

    def grad_batch(self, X):
        return np.broadcast_to(self.a, X.shape).copy()

    def to_json_dict(self):
        return {"kind": "linear", "a": self.a.tolist(), "c0": self.c0}


class QuadraticCost(StageCost):
    """(x - center)^T Q (x - center); convex when Q is positive semidefinite."""

    kind = "quadratic"

    def __init__(self, Q, center):
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        self.Q = 0.5 * (Q + Q.T)
        self.center = np.asarray(center, dtype=np.float64)
        if self.Q.shape[0] != self.center.size:
            raise DimensionMismatch("quadratic cost shapes disagree")

    def value(self, x):
        d = x - self.center
        return float(d @ self.Q @ d)

    def grad(self, x):
        return 2.0 * self.Q @ (x - self.center)

    def value_batch(self, X):
        D = X - self.center
        return np.einsum("bi,ij,bj->b", D, self.Q, D)

    def grad_batch(self, X):
        return 2.0 * (X - self.center) @ self.Q

    def to_json_dict(self):
        return {"kind": "quadratic", "Q": self.Q.tolist(), "center": self.center.tolist()}


class SoftplusCost(StageCost):
    """log(1 + exp(w . x + b)); smooth, convex, 1-Lipschitz in (w . x)."""

    kind = "softplus"

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)

    def value(self, x):
        return float(np.logaddexp(0.0, self.w @ x + self.b))

    def grad(self, x):
        s = 0.5 * (1.0 + np.tanh(0.5 * (self.w @ x + self.b)))
        return s * self.w

    def value_batch(self, X):
        return np.logaddexp(0.0, X @ self.w + self.b)

    def grad_batch(self, X):
        s = 0.5 * (1.0 + np.tanh(0.5 * (X @ self.w + self.b)))
        return s[:, None] * self.w

    def to_json_dict(self):
        return {"kind": "softplus", "w": self.w.tolist(), "b": self.b}


def cost_from_json(d):
    kind = d.get("kind")
    if kind == "linear":
        return LinearCost(d["a"], d.get("c0", 0.0))
    if kind == "quadratic":
        return QuadraticCost(d["Q"], d["center"])
    if kind == "softplus":
        return SoftplusCost(d["w"], d.get("b", 0.0))
    raise ValueError(f"unknown stage cost kind {kind!r}")


def _scenario_values(x):
    """Stage arrays viewed per scenario, (S, n) each."""
    if x.mode == "relaxed":
        return x.values
    tree = x.tree
    return [x.values[t - 1][tree.scenario_stage_pos[:, t - 1]] for t in range(1, tree.stages + 1)]


class _CostTable:
    """Per-stage, per-scenario stage costs with dimension checks."""

    def __init__(self, tree, costs):
        if len(costs) != tree.stages:
            raise DimensionMismatch("one cost list per stage is required")
        for t, row in enumerate(costs, start=1):
            if len(row) != tree.n_scenarios:
                raise DimensionMismatch(f"stage {t}: expected {tree.n_scenarios} scenario costs")
        self.tree = tree
        self.costs = [list(row) for row in costs]

    def stage_values(self, xs):
        """(T, S) matrix of c_t(x_t(s), s)."""
        tree = self.tree
        out = np.empty((tree.stages, tree.n_scenarios))
        for t in range(tree.stages):
            for s in range(tree.n_scenarios):
                out[t, s] = self.costs[t][s].value(xs[t][s])
        return out

    def stage_grads(self, xs):
        """List over stages of (S, n) gradient matrices."""
        tree = self.tree
        return [
            np.array([self.costs[t][s].grad(xs[t][s]) for s in range(tree.n_scenarios)])
            for t in range(tree.stages)
        ]

    def to_json(self):
        return [[c.to_json_dict() for c in row] for row in self.costs]


class ExpectedObjective:
    """E[ sum_t c_t(x_t, .) ] with scenario-keyed integrands."""

    kind = "expected"

    def __init__(self, tree, costs, lipschitz=None):
        self.table = _CostTable(tree, costs)
        self.tree = tree
        self.lipschitz = lipschitz

    def value(self, x):
        vals = self.table.stage_values(_scenario_values(x))
        return float(self.tree.scenario_prob @ vals.sum(axis=0))

    def scenario_weights(self, x):
        return np.ones(self.tree.n_scenarios)

    def subgradient(self, x, mode=None):
        return _weighted_subgradient(self, x, mode)

    def to_json_dict(self):
        d = {"kind": "expected", "stages": self.table.to_json()}
        if self.lipschitz is not None:
            d["lipschitz"] = float(self.lipschitz)
        return d


class CVaRObjective:
    """CVaR_alpha of the total scenario cost Z = sum_t c_t(x_t, .)."""

    kind = "cvar"

    def __init__(self, tree, alpha, costs, lipschitz=None, tie_tol=1e-10):
        if not (0.0 < alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        self.alpha = float(alpha)
        self.table = _CostTable(tree, costs)
        self.tree = tree
        self.lipschitz = lipschitz
        self.tie_tol = tie_tol

    def _losses(self, x):
        return self.table.stage_values(_scenario_values(x)).sum(axis=0)

    def value(self, x):
        return cvar_value(self._losses(x), self.tree.scenario_prob, self.alpha)

    def scenario_weights(self, x):
        """Tail weights q with q in [0, 1/alpha], E[q] = 1; ties split evenly."""
        return cvar_weights(self._losses(x), self.tree.scenario_prob, self.alpha, self.tie_tol)

    def subgradient(self, x, mode=None):
        return _weighted_subgradient(self, x, mode)

    def to_json_dict(self):
        d = {"kind": "cvar", "alpha": self.alpha, "stages": self.table.to_json()}
        if self.lipschitz is not None:
            d["lipschitz"] = float(self.lipschitz)
        return d


class CompositeObjective:
    """Nonnegatively weighted sum of objectives."""

    kind = "composite"

    def __init__(self, parts, lipschitz=None):
        self.parts = [(float(w), obj) for w, obj in parts]
        if any(w < 0 for w, _ in self.parts):
            raise ValueError("composite weights must be nonnegative")
        self.tree = self.parts[0][1].tree
        self.lipschitz = lipschitz

    def value(self, x):
        return sum(w * obj.value(x) for w, obj in self.parts)

    def subgradient(self, x, mode=None):
        mode = mode or x.mode
        out = None
        for w, obj in self.parts:
            g = obj.subgradient(x, mode)
            out = w * g if out is None else out + w * g
        return out

    def to_json_dict(self):
        d = {"kind": "composite",
             "parts": [{"weight": w, "objective": obj.to_json_dict()} for w, obj in self.parts]}
        if self.lipschitz is not None:
            d["lipschitz"] = float(self.lipschitz)
        return d


def _weighted_subgradient(obj, x, mode):
    """Scenario-weighted chain rule shared by the expected and CVaR kinds.

    Relaxed mode returns raw scenario-wise gradients scaled by the tail
    weights; builtin mode is the stage-wise conditional average of those,
    which is a subgradient of the restriction to adapted policies.
    """
    mode = mode or x.mode
    tree = obj.tree
    xs = _scenario_values(x)
    q = obj.scenario_weights(x)
    grads = obj.table.stage_grads(xs)
    raw = [q[:, None] * g for g in grads]
    if mode == "relaxed":
        return AdaptedVector(tree, "relaxed", raw, copy=False)
    out = []
    for t in range(1, tree.stages + 1):
        out.append(kernels.segment_weighted_mean(
            np.ascontiguousarray(raw[t - 1]), tree.scenario_prob,
            tree.stage_groups[t - 1], tree.n_at_stage(t)))
    return AdaptedVector(tree, "builtin", out, copy=False)


def value(obj, x):
    return obj.value(x)


def subgradient(obj, x, mode=None):
    return obj.subgradient(x, mode)


def cvar_value(losses, probs, alpha):
    """min_eta eta + E[(Z - eta)_+] / alpha, computed exactly by sorting."""
    order = np.argsort(losses)[::-1]
    acc_p = 0.0
    acc = 0.0
    for idx in order:
        take = min(probs[idx], alpha - acc_p)
        acc += take * losses[idx]
        acc_p += take
        if acc_p >= alpha - 1e-15:
            break
    return float(acc / alpha)


def cvar_weights(losses, probs, alpha, tie_tol=1e-10):
    """Maximizing density of the CVaR dual representation.

    q = 1/alpha strictly above the value-at-risk, 0 strictly below, and the
    leftover mass is spread evenly over the boundary atoms, which keeps
    every weight inside [0, 1/alpha].
    """
    order = np.argsort(losses)[::-1]
    acc_p = 0.0
    var = losses[order[-1]]
    for idx in order:
        acc_p += probs[idx]
        if acc_p >= alpha - 1e-15:
            var = losses[idx]
            break
    above = losses > var + tie_tol
    ties = np.abs(losses - var) <= tie_tol
    q = np.zeros_like(losses)
    q[above] = 1.0 / alpha
    p_ties = probs[ties].sum()
    leftover = 1.0 - probs[above].sum() / alpha
    if p_ties > 0:
        q[ties] = leftover / p_ties
    return q


def project_capped_mean(target, weights, cap, total):
    """Project ``target`` onto {q : 0 <= q <= cap, sum_i weights_i q_i = total}.

    Weighted least squares with a scalar shift: q_i = clip(target_i - mu, 0, cap);
    mu is found by bisection on the monotone mass function.
    """
    target = np.asarray(target, dtype=float)

    def mass(mu):
        return float(weights @ np.clip(target - mu, 0.0, cap))

    lo = float(target.min() - cap - 1.0)
    hi = float(target.max() + 1.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) > total:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    return np.clip(target - mu, 0.0, cap)


def subgradient_membership_residual(obj, x, g, q_norm=2.0):
    """Distance-style residual of ``g`` against the subdifferential of ``obj`` at ``x``.

    Smooth kinds compare against the unique gradient. For CVaR the boundary
    atoms' tail weights are free, so the best admissible weights are fitted
    first (within the cap/total constraints) and the remaining mismatch is
    reported.
    """
    mode = g.mode
    if isinstance(obj, CVaRObjective):
        tree = obj.tree
        xs = _scenario_values(x)
        losses = obj._losses(x)
        grads = obj.table.stage_grads(xs)
        q = cvar_weights(losses, tree.scenario_prob, obj.alpha, obj.tie_tol)
        var_mask = _cvar_tie_mask(losses, tree.scenario_prob, obj.alpha, obj.tie_tol)
        if np.any(var_mask):
            g_rel = g if mode == "relaxed" else g.lift()
            denom = np.zeros(tree.n_scenarios)
            numer = np.zeros(tree.n_scenarios)
            for t in range(tree.stages):
                denom += np.einsum("ij,ij->i", grads[t], grads[t])
                numer += np.einsum("ij,ij->i", grads[t], g_rel.values[t])
            target = np.where(denom > 1e-14, numer / np.maximum(denom, 1e-14), 0.0)
            free_total = 1.0 - float(tree.scenario_prob[~var_mask] @ q[~var_mask])
            fitted = project_capped_mean(target[var_mask], tree.scenario_prob[var_mask],
                                         1.0 / obj.alpha, free_total)
            q = q.copy()
            q[var_mask] = fitted
        canonical = _weighted_q_subgradient(obj, x, q, mode)
    else:
        canonical = obj.subgradient(x, mode)
    return lq_norm(g - canonical, q_norm)


def _cvar_tie_mask(losses, probs, alpha, tie_tol):
    order = np.argsort(losses)[::-1]
    acc_p = 0.0
    var = losses[order[-1]]
    for idx in order:
        acc_p += probs[idx]
        if acc_p >= alpha - 1e-15:
            var = losses[idx]
            break
    return np.abs(losses - var) <= tie_tol


def _weighted_q_subgradient(obj, x, q, mode):
    tree = obj.tree
    xs = _scenario_values(x)
    grads = obj.table.stage_grads(xs)
    raw = [q[:, None] * g for g in grads]
    if mode == "relaxed":
        return AdaptedVector(tree, "relaxed", raw, copy=False)
    out = [kernels.segment_weighted_mean(np.ascontiguousarray(raw[t]), tree.scenario_prob,
                                         tree.stage_groups[t], tree.n_at_stage(t + 1))
           for t in range(tree.stages)]
    return AdaptedVector(tree, "builtin", out, copy=False)


def audit_lipschitz(obj, dim, rng, samples=50, radius=2.0, p=2.0):
    """Largest sampled difference quotient |phi(x) - phi(z)| / |x - z|_p."""
    tree = obj.tree
    worst = 0.0
    for _ in range(samples):
        a = _random_relaxed(tree, dim, rng, radius)
        b = _random_relaxed(tree, dim, rng, radius)
        denom = lp_norm(a - b, p)
        if denom < 1e-12:
            continue
        worst = max(worst, abs(obj.value(a) - obj.value(b)) / denom)
    return worst


def _random_relaxed(tree, dim, rng, radius):
    vals = [rng.uniform(-radius, radius, size=(tree.n_scenarios, dim)) for _ in range(tree.stages)]
    return AdaptedVector(tree, "relaxed", vals, copy=False)


def objective_from_json(tree, d):
    kind = d.get("kind")
    lip = d.get("lipschitz")
    if kind == "expected":
        costs = [[cost_from_json(c) for c in row] for row in d["stages"]]
        return ExpectedObjective(tree, costs, lipschitz=lip)
    if kind == "cvar":
        costs = [[cost_from_json(c) for c in row] for row in d["stages"]]
        return CVaRObjective(tree, d["alpha"], costs, lipschitz=lip)
    if kind == "composite":
        parts = [(p["weight"], objective_from_json(tree, p["objective"])) for p in d["parts"]]
        return CompositeObjective(parts, lipschitz=lip)
    raise ValueError(f"unknown objective kind {kind!r}")
