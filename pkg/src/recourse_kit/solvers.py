"""Desk-scale candidate solvers used to make the certification loop self-contained.

``brute_force_solve`` enumerates a grid over the flattened builtin decision
vector, restores feasibility of the most promising candidates, and polishes
the best one by coordinate descent (with restoration after every move and a
parabolic line-search refinement). It is an independent primal oracle: no
multiplier or stationarity machinery is involved.

``penalty_solve`` minimizes the exact-penalty function

    phi(x) + K * cbar_T * ( dist(F(x), Y) + dist(x, X) )

by subgradient descent with a diminishing step, tracking the best restored
feasible iterate. The weight must exceed the objective's Lipschitz constant
times the certified subregularity constant, which is what makes the penalty
exact at local minima.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleNodeError, RestorationError
from .penalty import distance_direction, phi
from .recourse import restore_builtin, stage_constants_builtin
from .sets import Box, Orthant
from .tree import AdaptedVector, lp_norm

MAX_BRUTE_DIM = 10


def flatten_policy(x):
    return np.concatenate([arr.ravel() for arr in x.values])


def unflatten_policy(tree, vec, dim):
    vals = []
    k = 0
    for t in range(1, tree.stages + 1):
        rows = tree.n_at_stage(t)
        vals.append(vec[k: k + rows * dim].reshape(rows, dim))
        k += rows * dim
    return AdaptedVector(tree, "builtin", vals, copy=False)


def total_decision_dim(inst):
    return inst.n * sum(inst.tree.n_at_stage(t) for t in range(1, inst.stages + 1))


def _coordinate_boxes(inst, box=None):
    """Finite per-coordinate search intervals from the decision sets (boxes widened a little)."""
    lo_parts, hi_parts = [], []
    for t in range(1, inst.stages + 1):
        for s in inst.x_sets.at_stage(t):
            if isinstance(s, Box):
                lo, hi = s.lower.copy(), s.upper.copy()
            elif isinstance(s, Orthant):
                lo, hi = s._box.lower.copy(), s._box.upper.copy()
            else:
                lo = np.full(inst.n, -np.inf)
                hi = np.full(inst.n, np.inf)
            lo_parts.append(lo)
            hi_parts.append(hi)
    lo = np.concatenate(lo_parts)
    hi = np.concatenate(hi_parts)
    if box is not None:
        lo = np.maximum(lo, box[0])
        hi = np.minimum(hi, box[1])
    if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)):
        raise ValueError("unbounded decision coordinates: supply a finite search box")
    width = hi - lo
    return lo - 0.05 * width, hi + 0.05 * width


def _objective_of(inst, x):
    return inst.objective.value(x)


def _violation(inst, x, p=2.0):
    pen = phi(inst.operator, x, inst.y_sets, p=p).value
    dx = 0.0
    tree = inst.tree
    for t in range(1, inst.stages + 1):
        d = inst.x_sets.distance_stage(x.stage(t), t, "builtin")
        dx += float((tree.stage_probs[t - 1] @ d**p) ** (1.0 / p))
    return pen + dx


@dataclass
class BruteForceResult:
    policy: AdaptedVector
    objective: float
    grid_points: int
    polished: bool

    def to_json_dict(self):
        return {"objective": self.objective, "grid_points": self.grid_points,
                "polished": self.polished}


def _restored_objective(inst, vec, dim):
    u = unflatten_policy(inst.tree, vec, dim)
    rep = restore_builtin(inst, u)
    return _objective_of(inst, rep.restored), rep.restored


def _coordinate_descent(inst, vec, dim, step0, min_step=1e-9, max_rounds=400):
    """Probe +/- moves per coordinate on the restored objective; shrink on stalls.

    A parabolic fit through (x - s, x, x + s) refines smooth valleys; every
    accepted move re-restores feasibility, so constrained coordinates simply
    stick to their bounds.
    """
    best_val, best_pol = _restored_objective(inst, vec, dim)
    vec = vec.copy()
    step = step0
    for _ in range(max_rounds):
        improved = False
        for i in range(vec.size):
            candidates = [vec[i] + step, vec[i] - step]
            vals = []
            for c in candidates:
                trial = vec.copy()
                trial[i] = c
                try:
                    v, pol = _restored_objective(inst, trial, dim)
                except (InfeasibleNodeError, RestorationError):
                    v, pol = np.inf, None
                vals.append((v, c, pol))
            # parabolic vertex through the three probes
            f_plus, f_minus = vals[0][0], vals[1][0]
            if np.isfinite(f_plus) and np.isfinite(f_minus):
                denom = f_plus - 2.0 * best_val + f_minus
                if denom > 1e-300:
                    shift = 0.5 * step * (f_minus - f_plus) / denom
                    if abs(shift) <= 2.0 * step:
                        trial = vec.copy()
                        trial[i] = vec[i] + shift
                        try:
                            v, pol = _restored_objective(inst, trial, dim)
                            vals.append((v, trial[i], pol))
                        except (InfeasibleNodeError, RestorationError):
                            pass
            vals.sort(key=lambda r: r[0])
            if vals[0][0] < best_val - 1e-15:
                best_val, best_pol = vals[0][0], vals[0][2]
                vec[i] = vals[0][1]
                improved = True
        if not improved:
            step *= 0.5
            if step < min_step:
                break
    return best_val, best_pol, vec


def brute_force_solve(inst, grid_points=5, box=None, top_k=5, min_step=1e-9):
    """Grid search over the flattened policy plus local polish; deterministic.

    Total decision dimension is capped at 10; the feasible region must be
    bounded (finite boxes or an explicit search box).
    """
    dim_total = total_decision_dim(inst)
    if dim_total > MAX_BRUTE_DIM:
        raise ValueError(f"total decision dimension {dim_total} exceeds {MAX_BRUTE_DIM}")
    lo, hi = _coordinate_boxes(inst, box)
    axes = [np.linspace(lo[i], hi[i], grid_points) for i in range(dim_total)]
    mesh = np.meshgrid(*axes, indexing="ij")
    cands = np.stack([m.ravel() for m in mesh], axis=1)

    # cheap screen: penalized objective on the raw grid
    scores = np.empty(cands.shape[0])
    for k in range(cands.shape[0]):
        u = unflatten_policy(inst.tree, cands[k], inst.n)
        scores[k] = _objective_of(inst, u) + 1e3 * _violation(inst, u)
    order = np.argsort(scores, kind="stable")[: max(1, top_k)]

    best = (np.inf, None, None)
    failures = 0
    step0 = float(np.max(hi - lo)) / max(1, grid_points - 1)
    for k in order:
        try:
            val, pol, vec = _coordinate_descent(inst, cands[k].copy(), inst.n, step0,
                                                min_step=min_step)
        except (InfeasibleNodeError, RestorationError):
            failures += 1
            continue
        if val < best[0]:
            best = (val, pol, vec)
    if best[1] is None:
        raise RestorationError(0, -1, "no grid candidate could be restored (empty feasible grid)")
    return BruteForceResult(policy=best[1], objective=float(best[0]),
                            grid_points=cands.shape[0], polished=True)


@dataclass
class PenaltySolveResult:
    policy: AdaptedVector
    objective: float
    penalty_weight: float
    steps: int
    best_step: int
    diverged: bool
    trace: list = field(default_factory=list)

    def to_json_dict(self):
        return {"objective": self.objective, "penalty_weight": self.penalty_weight,
                "steps": self.steps, "best_step": self.best_step,
                "diverged": self.diverged, "trace": self.trace[:50]}


def penalty_solve(inst, K, steps=500, seed=0, x0=None, step0=None, p=2.0,
                  divergence_window=60):
    """Subgradient descent on the exact-penalty function, with restoration tracking."""
    cbar = stage_constants_builtin(inst.recourse_c, inst.lipschitz_stage_bound(), inst.stages)[-1]
    if K <= inst.l_phi:
        raise ValueError(f"penalty weight {K} must exceed the objective Lipschitz constant "
                         f"{inst.l_phi}")
    weight = K * cbar
    rng = np.random.default_rng(seed)
    if x0 is None:
        lo, hi = _coordinate_boxes(inst)
        x = unflatten_policy(inst.tree, rng.uniform(lo, hi), inst.n)
    else:
        x = x0.copy()
    if step0 is None:
        step0 = 0.5

    best_obj = np.inf
    best_pol = None
    best_step = 0
    trace = []
    penalized_best = np.inf
    stall = 0
    diverged = False
    for k in range(steps):
        ev = phi(inst.operator, x, inst.y_sets, p=p, with_subgradient=True)
        gx_dir = _decision_distance_direction(inst, x)
        sub = inst.objective.subgradient(x, "builtin") + weight * (ev.subgradient + gx_dir)
        penalized = inst.objective.value(x) + weight * (ev.value + _x_distance(inst, x, p))
        trace.append(penalized)
        if penalized < penalized_best - 1e-12:
            penalized_best = penalized
            stall = 0
        else:
            stall += 1
            if stall >= divergence_window:
                # stalled: converged if the iterate still tracks the best value,
                # diverged if it drifted well above it
                diverged = bool(penalized - penalized_best > 0.1 * (1.0 + abs(penalized_best)))
                break
        try:
            rep = restore_builtin(inst, x, p=p)
            obj = _objective_of(inst, rep.restored)
            if obj < best_obj:
                best_obj, best_pol, best_step = obj, rep.restored, k
        except (InfeasibleNodeError, RestorationError):
            pass
        gn = lp_norm(sub, 2.0)
        if gn <= 1e-14:
            break
        x = x + (-(step0 / (1.0 + 0.1 * k)) / max(gn, 1e-12)) * sub
    if best_pol is None:
        rep = restore_builtin(inst, x, p=p)
        best_pol, best_obj = rep.restored, _objective_of(inst, rep.restored)
    return PenaltySolveResult(policy=best_pol, objective=float(best_obj), penalty_weight=weight,
                              steps=steps, best_step=best_step, diverged=diverged, trace=trace)


def _x_distance(inst, x, p=2.0):
    tree = inst.tree
    acc = 0.0
    for t in range(1, inst.stages + 1):
        d = inst.x_sets.distance_stage(x.stage(t), t, "builtin")
        acc += float((tree.stage_probs[t - 1] @ d**p) ** (1.0 / p))
    return acc


def _decision_distance_direction(inst, x):
    """Subgradient of x -> dist(x, X) in the stage-sum form (zero where feasible)."""
    tree = inst.tree
    vals = []
    dists = []
    for t in range(1, inst.stages + 1):
        sets_t = inst.x_sets.at_stage(t)
        arr = x.stage(t)
        proj = np.array([sets_t[i].project(arr[i]) for i in range(arr.shape[0])])
        r = arr - proj
        norms = np.sqrt(np.einsum("ij,ij->i", r, r))
        dist = float((tree.stage_probs[t - 1] @ norms**2) ** 0.5)
        vals.append(r)
        dists.append(dist)
    res = AdaptedVector(tree, "builtin", vals, copy=False)
    return distance_direction(res, np.array(dists))
