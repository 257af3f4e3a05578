"""Distance penalty of the dynamics constraints and its generalized gradient.

The penalty of a policy is the sum over stages of the probability-weighted
p-distance between the stage output and its admissible set,

    penalty(x) = sum_t dist_p( F_t(x), Y_t ).

At p = 2 an exact subgradient is available in closed form: take the stage
residual direction r_t / |r_t| (the gradient of a point-to-convex-set
distance) and push it through the adjoint of the dynamics derivative. For
other exponents only values and finite-difference directional derivatives
are offered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import AdaptedVector, inner_product, lp_norm
from .sets import SetFamily

FEASIBLE_EPS = 1e-14


@dataclass
class PenaltyEvaluation:
    """Value, per-stage distances, node residuals, and (optionally) a subgradient."""

    value: float
    stage_distances: np.ndarray
    residuals: AdaptedVector
    subgradient: AdaptedVector | None = None

    def to_json_dict(self):
        return {"value": self.value, "stage_distances": self.stage_distances.tolist()}


def _stage_residuals(F, x, y_sets):
    """Outputs minus their node-wise projections, stage by stage."""
    y = F.evaluate(x)
    res = []
    for t in range(1, F.stages + 1):
        sets_t = y_sets.at_stage(t) if x.mode == "builtin" else y_sets.at_scenarios(t)
        arr = y.stage(t)
        proj = np.array([sets_t[i].project(arr[i]) for i in range(arr.shape[0])])
        res.append(arr - proj)
    return AdaptedVector(F.tree, x.mode, res, copy=False)


def phi(F, x, y_sets, p=2.0, with_subgradient=False, feasible_g=None):
    """Evaluate the distance penalty; optionally attach an exact subgradient (p=2)."""
    residuals = _stage_residuals(F, x, y_sets)
    tree = F.tree
    weights = tree.stage_probs if x.mode == "builtin" else [tree.scenario_prob] * tree.stages
    dists = np.empty(tree.stages)
    for t in range(tree.stages):
        r = residuals.values[t]
        norms = np.sqrt(np.einsum("ij,ij->i", r, r))
        dists[t] = float((weights[t] @ norms**p) ** (1.0 / p))
    ev = PenaltyEvaluation(value=float(dists.sum()), stage_distances=dists, residuals=residuals)
    if with_subgradient:
        ev.subgradient = phi_subgradient(F, x, y_sets, p=p, feasible_g=feasible_g,
                                         _residuals=residuals, _dists=dists)
    return ev


def distance_direction(residuals, dists, feasible_g=None):
    """Stage-normalized residual directions, a subgradient of the product distance.

    Where a stage distance vanishes the direction defaults to zero (a valid
    choice at feasible points) unless ``feasible_g`` supplies an element of
    the normal-cone intersection with the unit ball.
    """
    out = []
    for t, arr in enumerate(residuals.values):
        if dists[t] > FEASIBLE_EPS:
            out.append(arr / dists[t])
        elif feasible_g is not None:
            out.append(feasible_g.values[t].copy())
        else:
            out.append(np.zeros_like(arr))
    return AdaptedVector(residuals.tree, residuals.mode, out, copy=False)


def phi_subgradient(F, x, y_sets, p=2.0, feasible_g=None, _residuals=None, _dists=None):
    """Exact penalty subgradient at p = 2: adjoint of the derivative applied
    to the stage distance directions."""
    if p != 2.0:
        raise ValueError("exact penalty subgradients are available only for p = 2")
    if _residuals is None:
        ev = phi(F, x, y_sets, p=2.0)
        _residuals, _dists = ev.residuals, ev.stage_distances
    g = distance_direction(_residuals, _dists, feasible_g)
    return F.apply_adjoint(x, g)


def dual_direction_membership(F, x, y_sets, g_dual, tol=1e-9):
    """Residual of g_dual against N_Y(F(x)) intersected with the unit ball.

    Zero means g_dual is an admissible distance-function subgradient at a
    feasible point; the penalty subdifferential there is the image of all
    such elements under the adjoint.
    """
    y = F.evaluate(x)
    worst = 0.0
    for t in range(1, F.stages + 1):
        sets_t = y_sets.at_stage(t) if x.mode == "builtin" else y_sets.at_scenarios(t)
        arr = y.stage(t)
        gd = g_dual.stage(t)
        for i in range(arr.shape[0]):
            worst = max(worst, sets_t[i].normal_cone_residual(arr[i], gd[i]))
    ball_excess = max(0.0, lp_norm(g_dual, 2.0) - 1.0)
    return max(worst, ball_excess)


def clarke_dirderiv_fd(F, x, y_sets, h, z_samples=8, taus=(1e-4, 3e-5, 1e-5, 3e-6, 1e-6),
                       seed=0, p=2.0, radius_scale=10.0):
    """Empirical generalized directional derivative of the penalty at x along h.

    Supremum of forward difference quotients over base points sampled in a
    ball around x whose radius shrinks with the step; the reported figure is
    the quotient supremum at the smallest step.
    """
    rng = np.random.default_rng(seed)
    taus = sorted(taus, reverse=True)
    per_tau = []
    for tau in taus:
        radius = radius_scale * tau
        best = -np.inf
        for k in range(z_samples + 1):
            if k == 0:
                z = x
            else:
                noise = [rng.standard_normal(a.shape) for a in x.values]
                scale = radius / max(1e-300, float(np.sqrt(sum((nz * nz).sum() for nz in noise))))
                z = AdaptedVector(x.tree, x.mode,
                                  [a + scale * nz for a, nz in zip(x.values, noise)], copy=False)
            base = phi(F, z, y_sets, p=p).value
            step = phi(F, z + tau * h, y_sets, p=p).value
            best = max(best, (step - base) / tau)
        per_tau.append(best)
    return per_tau[-1], {"taus": list(taus), "sup_quotients": per_tau}


def penalty_gap_certificate(F, x, y_sets, sub, directions, p=2.0, tol=1e-6):
    """Check the subgradient inequality of the penalty along given directions
    (convex instances): phi(x + d) >= phi(x) + <sub, d> - tol."""
    base = phi(F, x, y_sets, p=p).value
    worst = 0.0
    for d in directions:
        lhs = phi(F, x + d, y_sets, p=p).value
        rhs = base + inner_product(sub, d)
        worst = max(worst, rhs - lhs)
    return worst <= tol, worst
