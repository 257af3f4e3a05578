"""Feasibility restoration with certified stage-wise error bounds.

Restoration walks the tree stage by stage. At each node it solves the
single-node recourse system: find a stage decision inside the decision set
whose dynamics output lands in the admissible set, as close as possible to a
target point (the incoming policy value, or its conditional expectation in
the relaxed variant). The per-stage amplification constants

    builtin:  cbar_1 = C,          cbar_t = C (1 + L sum_{l<t} cbar_l)
    relaxed:  cbar_1 = 1 + C + CL, cbar_t = (1 + C + CL) + C L sum_{l<t} cbar_l

with L = sqrt(T) * C_f certify that the restored policy's distance to the
input is bounded by cbar_t times the accumulated input residuals, which is
the error-bound form of subregularity for these constraint systems.

Node solvers: affine dynamics with polyhedral-style sets reduce exactly to a
least-distance program (solved by an active-set nonnegative least-squares
method); smooth dynamics or ball sets use a damped Gauss-Newton iteration on
the stacked projection residuals with a projection fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from .causal import AffineMap
from .errors import InfeasibleNodeError, RestorationError
from .sets import Ball, Box, ConeHull, Orthant, Polyhedron, Singleton, Subspace, _ldp
from .tree import AdaptedVector, lp_norm, stage_lp_norms, _pval
from . import _kernels as kernels

NODE_TOL = 1e-9
GN_TOL = 1e-10
GN_MAX_ITER = 200
_BOUND_SLACK = 1e-9


@dataclass
class NodeRecourseResult:
    xi: np.ndarray
    ratio: float
    residual_before: float
    feasible: bool
    iterations: int = 0
    message: str = ""


def _box_rows(lower, upper):
    """Inequality and equality rows of a box; infinite bounds drop out."""
    d = lower.size
    eye = np.eye(d)
    G_rows, g_vals, E_rows, e_vals = [], [], [], []
    for i in range(d):
        if lower[i] == upper[i]:
            E_rows.append(eye[i])
            e_vals.append(lower[i])
            continue
        if np.isfinite(upper[i]):
            G_rows.append(eye[i])
            g_vals.append(upper[i])
        if np.isfinite(lower[i]):
            G_rows.append(-eye[i])
            g_vals.append(-lower[i])
    return G_rows, g_vals, E_rows, e_vals


def _set_rows(s, dim):
    """Linear description (G z <= g, E z = e) of a polyhedral-style set, or None."""
    if isinstance(s, Box):
        return _box_rows(s.lower, s.upper)
    if isinstance(s, Orthant):
        return _box_rows(s._box.lower, s._box.upper)
    if isinstance(s, Polyhedron):
        return list(s.G), list(s.h), [], []
    if isinstance(s, Singleton):
        return [], [], list(np.eye(dim)), list(s.point)
    if isinstance(s, Subspace):
        comp = null_space(s.basis.T) if s.basis.shape[1] else np.eye(dim)
        return [], [], list(comp.T), [0.0] * comp.shape[1]
    return None  # ball or generated cone: handled by the iterative path


def _project_poly(point, G, g, tol):
    """Projection of a point onto {z : G z <= g}; None when the system is infeasible."""
    if G is None or G.shape[0] == 0:
        return point.copy()
    slack = g - G @ point
    if slack.min(initial=0.0) >= 0.0:
        return point.copy()
    w, feasible = _ldp(-G, -slack)
    if not feasible:
        return None
    p = point + w
    scale = 1.0 + float(np.abs(g).max(initial=0.0))
    active = np.flatnonzero(G @ p >= g - 1e-7 * scale)
    if active.size:
        Ga, ga = G[active], g[active]
        kkt = np.block([[np.eye(point.size), Ga.T],
                        [Ga, np.zeros((active.size, active.size))]])
        rhs = np.concatenate([point, ga])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        q = sol[: point.size]
        if np.all(G @ q <= g + tol) and np.linalg.norm(q - point) <= np.linalg.norm(w) + 1e-12:
            return q
    return p


def _solve_affine_node(fmap, zeta, eta, xset, yset, tol):
    """Exact minimum-distance solve for affine dynamics and polyhedral-style sets."""
    n = eta.size
    A = fmap.A[:, zeta.size:]
    c0 = fmap.A[:, : zeta.size] @ zeta + fmap.b if zeta.size else fmap.b.copy()

    x_rows = _set_rows(xset, n)
    y_rows = _set_rows(yset, fmap.m)
    if x_rows is None or y_rows is None:
        return None  # fall through to the iterative solver

    G_rows, g_vals, E_rows, e_vals = [list(r) for r in x_rows]
    yG, yg, yE, ye = y_rows
    for row, val in zip(yG, yg):
        G_rows.append(np.asarray(row) @ A)
        g_vals.append(val - float(np.asarray(row) @ c0))
    for row, val in zip(yE, ye):
        E_rows.append(np.asarray(row) @ A)
        e_vals.append(val - float(np.asarray(row) @ c0))

    G = np.array(G_rows) if G_rows else np.zeros((0, n))
    g = np.array(g_vals)
    E = np.array(E_rows) if E_rows else np.zeros((0, n))
    e = np.array(e_vals)

    if E.shape[0]:
        xi0, *_ = np.linalg.lstsq(E, e, rcond=None)
        scale = 1.0 + float(np.abs(e).max(initial=0.0))
        if np.linalg.norm(E @ xi0 - e) > 1e-8 * scale:
            return "infeasible"
        N = null_space(E)
        if N.shape[1] == 0:
            if G.shape[0] and np.any(G @ xi0 - g > tol):
                return "infeasible"
            return xi0
        eta_r = N.T @ (eta - xi0)
        Gr = G @ N if G.shape[0] else np.zeros((0, N.shape[1]))
        gr = g - G @ xi0 if G.shape[0] else g
        theta = _project_poly(eta_r, Gr, gr, tol)
        if theta is None:
            return "infeasible"
        return xi0 + N @ theta
    xi = _project_poly(eta, G, g, tol)
    return "infeasible" if xi is None else xi


def _gauss_newton_node(fmap, zeta, eta, xset, yset, tol, max_iter):
    """Damped Gauss-Newton on the stacked projection residuals, from eta."""
    n = eta.size
    xi = eta.copy()
    damping = 1e-8
    eye = np.eye(n)

    def residual(x):
        hist = np.concatenate([zeta, x])
        w = fmap.value(hist)
        ry = w - yset.project(w)
        rx = x - xset.project(x)
        return np.concatenate([ry, rx]), hist

    r, hist = residual(xi)
    best_xi, best_norm = xi.copy(), float(np.linalg.norm(r))
    stall = 0
    for it in range(max_iter):
        rnorm = float(np.linalg.norm(r))
        if rnorm < best_norm:
            best_xi, best_norm = xi.copy(), rnorm
        if rnorm <= tol:
            return xi, True, it
        J = np.vstack([fmap.jacobian(hist)[:, zeta.size:], eye])
        try:
            delta = np.linalg.solve(J.T @ J + damping * eye, -J.T @ r)
        except np.linalg.LinAlgError:
            delta = -np.linalg.pinv(J) @ r
        r_new, hist_new = residual(xi + delta)
        if np.linalg.norm(r_new) < rnorm:
            xi = xi + delta
            r, hist = r_new, hist_new
            damping = max(damping / 3.0, 1e-12)
            stall = 0
        else:
            damping *= 10.0
            stall += 1
            if stall >= 10:
                xi = xset.project(xi)
                r, hist = residual(xi)
                damping = 1e-8
                stall = 0
    return best_xi, best_norm <= tol, max_iter


def node_recourse_solve(fmap, zeta, eta, xset, yset, tol=NODE_TOL, max_iter=GN_MAX_ITER,
                        stage=None, node_id=None):
    """Find a stage decision xi in X with f(zeta, xi) in Y, close to eta.

    Returns the solution together with the achieved ratio
    |xi - eta| / (d(f(zeta, eta), Y) + d(eta, X)), the quantity a recourse
    constant must dominate. Raises :class:`InfeasibleNodeError` when the
    node system is provably empty; an exhausted iteration budget yields a
    soft failure carrying the best iterate.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    hist_eta = np.concatenate([zeta, eta])
    res_before = float(yset.distance(fmap.value(hist_eta)) + xset.distance(eta))
    if res_before <= tol:
        return NodeRecourseResult(eta.copy(), 0.0, res_before, True)

    xi = None
    iterations = 0
    if isinstance(fmap, AffineMap):
        out = _solve_affine_node(fmap, zeta, eta, xset, yset, tol)
        if isinstance(out, str):
            raise InfeasibleNodeError(stage, node_id, "empty affine node system")
        if out is not None:
            xi = out
    if xi is None:
        xi, ok, iterations = _gauss_newton_node(fmap, zeta, eta, xset, yset, GN_TOL, max_iter)
        if not ok:
            ratio = float(np.linalg.norm(xi - eta) / res_before)
            return NodeRecourseResult(xi, ratio, res_before, False, iterations,
                                      "iteration limit exceeded")
    # exact-feasibility audit of the returned point
    feas = float(yset.distance(fmap.value(np.concatenate([zeta, xi]))) + xset.distance(xi))
    if feas > tol:
        return NodeRecourseResult(xi, float(np.linalg.norm(xi - eta) / res_before),
                                  res_before, False, iterations,
                                  f"residual {feas:.2e} above tolerance")
    ratio = float(np.linalg.norm(xi - eta) / res_before)
    return NodeRecourseResult(xi, ratio, res_before, True, iterations)


def stage_constants_builtin(C, L, T):
    out = np.empty(T)
    for t in range(T):
        out[t] = C * (1.0 + L * out[:t].sum())
    return out


def stage_constants_relaxed(C, L, T):
    base = 1.0 + C + C * L
    out = np.empty(T)
    for t in range(T):
        out[t] = base + C * L * out[:t].sum()
    return out


@dataclass
class RecourseReport:
    """Restored policy plus the audit of the certified deviation bound."""

    mode: str
    restored: AdaptedVector
    deviations: np.ndarray
    input_dist_f: np.ndarray
    input_dist_x: np.ndarray
    input_gap: np.ndarray
    cbar: np.ndarray
    recourse_constant: float
    lipschitz_used: float
    stage_bound_ok: np.ndarray
    bound_ok: bool
    total_deviation: float = 0.0
    total_residual: float = 0.0
    max_ratio: float = 0.0

    def to_json_dict(self):
        return {
            "mode": self.mode,
            "deviations": self.deviations.tolist(),
            "input_dist_f": self.input_dist_f.tolist(),
            "input_dist_x": self.input_dist_x.tolist(),
            "input_gap": self.input_gap.tolist(),
            "cbar": self.cbar.tolist(),
            "recourse_constant": self.recourse_constant,
            "lipschitz_used": self.lipschitz_used,
            "stage_bound_ok": [bool(b) for b in self.stage_bound_ok],
            "bound_ok": bool(self.bound_ok),
            "total_deviation": self.total_deviation,
            "total_residual": self.total_residual,
            "max_ratio": self.max_ratio,
        }


def _input_residuals(inst, u, p):
    """Stage-wise p-distances of the unrestored policy to Y (through F) and X."""
    y = inst.operator.evaluate(u)
    tree = inst.tree
    weights = tree.stage_probs if u.mode == "builtin" else [tree.scenario_prob] * tree.stages
    dist_f = np.empty(tree.stages)
    dist_x = np.empty(tree.stages)
    for t in range(1, tree.stages + 1):
        dy = inst.y_sets.distance_stage(y.stage(t), t, u.mode)
        dx = inst.x_sets.distance_stage(u.stage(t), t, u.mode)
        dist_f[t - 1] = float((weights[t - 1] @ dy**p) ** (1.0 / p))
        dist_x[t - 1] = float((weights[t - 1] @ dx**p) ** (1.0 / p))
    return dist_f, dist_x


def _restore_nodes(inst, targets):
    """Stage-by-stage node solves toward per-node target values (builtin layout)."""
    tree = inst.tree
    n = inst.n
    xbar = AdaptedVector.zeros(tree, "builtin", n)
    max_ratio = 0.0
    for t in range(1, tree.stages + 1):
        ids = tree.stage_ids(t)
        x_sets = inst.x_sets.at_stage(t)
        y_sets = inst.y_sets.at_stage(t)
        hist_cols = [xbar.stage(l)[tree.ancestor_positions(t, l)] for l in range(1, t)]
        hist = np.hstack(hist_cols) if hist_cols else np.zeros((tree.n_at_stage(t), 0))
        for pos in range(tree.n_at_stage(t)):
            res = node_recourse_solve(
                inst.operator.map_at(t, pos), hist[pos], targets[t - 1][pos],
                x_sets[pos], y_sets[pos], stage=t, node_id=int(ids[pos]))
            if not res.feasible:
                raise RestorationError(t, int(ids[pos]), res.message)
            xbar.stage(t)[pos] = res.xi
            max_ratio = max(max_ratio, res.ratio)
    return xbar, max_ratio


def _bound_audit(deviations, residual_terms, cbar):
    cum = np.cumsum(residual_terms)
    stage_ok = deviations <= cbar * cum + _BOUND_SLACK
    return stage_ok


def restore_builtin(inst, u, p=2.0):
    """Restore feasibility of a builtin policy; audit the deviation bound."""
    p = _pval(p)
    if u.mode != "builtin":
        raise ValueError("restore_builtin expects a builtin policy")
    dist_f, dist_x = _input_residuals(inst, u, p)
    targets = [u.stage(t) for t in range(1, inst.stages + 1)]
    xbar, max_ratio = _restore_nodes(inst, targets)
    deviations = stage_lp_norms(xbar - u, p)
    cbar = stage_constants_builtin(inst.recourse_c, inst.lipschitz_stage_bound(), inst.stages)
    terms = dist_f + dist_x
    stage_ok = _bound_audit(deviations, terms, cbar)
    total_dev = lp_norm(xbar - u, p)
    total_res = float(terms.sum())
    bound_ok = bool(stage_ok.all() and total_dev <= cbar[-1] * total_res + _BOUND_SLACK)
    return RecourseReport(
        mode="builtin", restored=xbar, deviations=deviations,
        input_dist_f=dist_f, input_dist_x=dist_x, input_gap=np.zeros(inst.stages),
        cbar=cbar, recourse_constant=inst.recourse_c,
        lipschitz_used=inst.lipschitz_stage_bound(),
        stage_bound_ok=stage_ok, bound_ok=bound_ok,
        total_deviation=total_dev, total_residual=total_res, max_ratio=max_ratio)


def restore_relaxed(inst, u, p=2.0):
    """Restore a relaxed policy to an adapted feasible one.

    Targets are the stage-wise conditional expectations of the input, so the
    output is nonanticipative by construction; the audited bound gains the
    per-stage nonanticipativity gap terms.
    """
    p = _pval(p)
    if u.mode != "relaxed":
        raise ValueError("restore_relaxed expects a relaxed policy")
    tree = inst.tree
    dist_f, dist_x = _input_residuals(inst, u, p)
    gaps = np.empty(inst.stages)
    targets = []
    for t in range(1, inst.stages + 1):
        means = kernels.segment_weighted_mean(u.stage(t), tree.scenario_prob,
                                              tree.stage_groups[t - 1], tree.n_at_stage(t))
        diff = u.stage(t) - means[tree.stage_groups[t - 1]]
        gaps[t - 1] = kernels.weighted_power_sum(diff, tree.scenario_prob, p) ** (1.0 / p)
        targets.append(means)
    xbar_b, max_ratio = _restore_nodes(inst, targets)
    xbar = xbar_b.lift()
    deviations = stage_lp_norms(xbar - u, p)
    cbar = stage_constants_relaxed(inst.recourse_c, inst.lipschitz_stage_bound(), inst.stages)
    terms = gaps + dist_f + dist_x
    stage_ok = _bound_audit(deviations, terms, cbar)
    total_dev = lp_norm(xbar - u, p)
    total_res = float(terms.sum())
    bound_ok = bool(stage_ok.all() and total_dev <= cbar[-1] * total_res + _BOUND_SLACK)
    return RecourseReport(
        mode="relaxed", restored=xbar, deviations=deviations,
        input_dist_f=dist_f, input_dist_x=dist_x, input_gap=gaps,
        cbar=cbar, recourse_constant=inst.recourse_c,
        lipschitz_used=inst.lipschitz_stage_bound(),
        stage_bound_ok=stage_ok, bound_ok=bound_ok,
        total_deviation=total_dev, total_residual=total_res, max_ratio=max_ratio)


@dataclass
class ConstantCheckReport:
    """Sampled audit of a recourse constant; the claim holds on the sampled region only."""

    constant: float
    max_ratio: float
    samples: int
    passed: bool
    eta_box: list
    worst: dict | None = None
    failures: list = field(default_factory=list)

    def to_json_dict(self):
        return {"constant": self.constant, "max_ratio": self.max_ratio,
                "samples": self.samples, "passed": self.passed,
                "eta_box": self.eta_box, "worst": self.worst, "failures": self.failures}


def _sample_in_set(s, rng, window=5.0):
    z = rng.uniform(-window, window, size=s.dim)
    return s.project(z)


def _ratio_samples(inst, n_samples, seed, eta_box):
    tree = inst.tree
    rng = np.random.default_rng(seed)
    lo, hi = eta_box
    max_ratio = 0.0
    worst = None
    failures = []
    for k in range(n_samples):
        t = int(rng.integers(1, tree.stages + 1))
        pos = int(rng.integers(0, tree.n_at_stage(t)))
        node_id = int(tree.stage_ids(t)[pos])
        zeta = np.concatenate([
            _sample_in_set(inst.x_sets.at_stage(l)[int(tree.ancestor_positions(t, l)[pos])], rng)
            for l in range(1, t)
        ]) if t > 1 else np.zeros(0)
        eta = rng.uniform(lo, hi, size=inst.n)
        try:
            res = node_recourse_solve(inst.operator.map_at(t, pos), zeta, eta,
                                      inst.x_sets.at_stage(t)[pos], inst.y_sets.at_stage(t)[pos],
                                      stage=t, node_id=node_id)
        except InfeasibleNodeError as err:
            failures.append({"sample": k, "stage": t, "node": node_id, "error": str(err)})
            continue
        if not res.feasible:
            failures.append({"sample": k, "stage": t, "node": node_id, "error": res.message})
            continue
        if res.residual_before > 1e-12 and res.ratio > max_ratio:
            max_ratio = res.ratio
            worst = {"sample": k, "stage": t, "node": node_id, "ratio": res.ratio,
                     "eta": eta.tolist()}
    return max_ratio, worst, failures


def verify_recourse_constant(inst, C, n_samples=200, seed=0, eta_box=None):
    """Empirical audit of a declared recourse constant over sampled node systems."""
    if eta_box is None:
        eta_box = (-3.0 * np.ones(inst.n), 3.0 * np.ones(inst.n))
    max_ratio, worst, failures = _ratio_samples(inst, n_samples, seed, eta_box)
    passed = (max_ratio <= C * (1.0 + 1e-9) + 1e-12) and not failures
    return ConstantCheckReport(constant=float(C), max_ratio=float(max_ratio),
                               samples=n_samples, passed=bool(passed),
                               eta_box=[eta_box[0].tolist(), eta_box[1].tolist()],
                               worst=worst, failures=failures)


def estimate_recourse_constant(inst, n_samples=200, seed=0, eta_box=None):
    """Doubled worst sampled ratio, floored at one; raises on infeasible samples."""
    if eta_box is None:
        eta_box = (-3.0 * np.ones(inst.n), 3.0 * np.ones(inst.n))
    max_ratio, worst, failures = _ratio_samples(inst, n_samples, seed, eta_box)
    if failures:
        f = failures[0]
        raise InfeasibleNodeError(f["stage"], f["node"], f"infeasible sample: {f['error']}")
    return max(1.0, 2.0 * max_ratio)
