"""Stationarity certificates for both problem formulations.

Built-in form (adapted decision spaces), stage t at each stage-t node:

    g_t + A_tt^T psi_t + E_t[ sum_{l>t} A_lt^T psi_l ] + n_t = 0

Explicit form (scenario-wise decisions plus the measurability constraint),
stage t at each scenario, with a multiplier lam in the kernel of the
projector adjoint (E_t[lam_t] = 0):

    g_t + lam_t + sum_{l>=t} A_lt^T psi_l + n_t = 0

The checkers report probability-weighted residual norms per stage, node-wise
normal-cone residuals for psi and n, a membership residual for g against the
objective's subdifferential, and (explicit form) the kernel residual of lam.
Reduction maps an explicit certificate to a built-in one by stage-wise
conditional expectation; recovery fits multipliers to a candidate policy by
bounded least squares over normal-cone coefficient parametrizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sciopt

from . import _kernels as kernels
from .errors import DimensionMismatch, InfeasiblePointError
from .objectives import subgradient_membership_residual
from .penalty import phi
from .tree import AdaptedVector, conditional_expectation, lq_norm


@dataclass
class KktOptions:
    feasibility_tol: float = 1e-8
    stationarity_tol: float = 1e-6
    cone_tol: float = 1e-8
    kernel_tol: float = 1e-8
    subgradient_tol: float = 1e-6
    active_tol: float = 1e-7
    p: float = 2.0

    @property
    def q(self):
        return np.inf if self.p == 1.0 else self.p / (self.p - 1.0)


@dataclass
class MultiplierCertificate:
    """Multiplier collection (g, psi, n[, lam]) for one of the two systems."""

    mode: str
    g: AdaptedVector
    psi: AdaptedVector
    n: AdaptedVector
    lam: AdaptedVector | None = None

    def __post_init__(self):
        if self.mode not in ("builtin", "explicit"):
            raise ValueError(f"unknown certificate mode {self.mode!r}")
        storage = "builtin" if self.mode == "builtin" else "relaxed"
        for name, vec in (("g", self.g), ("psi", self.psi), ("n", self.n)):
            if vec.mode != storage:
                raise DimensionMismatch(f"{name} must be stored {storage} for a {self.mode} certificate")
        if self.mode == "explicit":
            if self.lam is None:
                raise ValueError("explicit certificates carry a lambda multiplier")
            if self.lam.mode != "relaxed":
                raise DimensionMismatch("lambda must be stored scenario-wise")
        elif self.lam is not None:
            raise ValueError("builtin certificates carry no lambda multiplier")

    def to_json_dict(self):
        def enc(vec):
            tree = vec.tree
            out = {}
            for t in range(1, tree.stages + 1):
                keys = tree.stage_ids(t) if vec.mode == "builtin" else tree.ids[tree.scenario_nodes]
                out[str(t)] = {str(int(k)): vec.stage(t)[i].tolist() for i, k in enumerate(keys)}
            return out

        return {
            "mode": self.mode,
            "g": enc(self.g),
            "psi": enc(self.psi),
            "n": enc(self.n),
            "lambda": enc(self.lam) if self.lam is not None else None,
        }

    @classmethod
    def from_json_dict(cls, tree, d, n_dim, m_dim):
        mode = d["mode"]
        storage = "builtin" if mode == "builtin" else "relaxed"

        def dec(block, dim):
            vals = []
            for t in range(1, tree.stages + 1):
                keys = tree.stage_ids(t) if storage == "builtin" else tree.ids[tree.scenario_nodes]
                row = np.array([block[str(t)][str(int(k))] for k in keys], dtype=float)
                vals.append(row.reshape(len(keys), dim))
            return AdaptedVector(tree, storage, vals, copy=False)

        lam = dec(d["lambda"], n_dim) if d.get("lambda") is not None else None
        return cls(mode=mode, g=dec(d["g"], n_dim), psi=dec(d["psi"], m_dim),
                   n=dec(d["n"], n_dim), lam=lam)


@dataclass
class KktReport:
    mode: str
    stationarity: np.ndarray
    stationarity_max: float
    cone_psi: np.ndarray
    cone_n: np.ndarray
    subgradient_residual: float
    kernel: np.ndarray | None
    feasibility: dict
    adjoint_cross_check: float
    passed: bool

    def to_json_dict(self):
        return {
            "mode": self.mode,
            "stationarity": self.stationarity.tolist(),
            "stationarity_max": self.stationarity_max,
            "cone_psi": self.cone_psi.tolist(),
            "cone_n": self.cone_n.tolist(),
            "subgradient_residual": self.subgradient_residual,
            "kernel": None if self.kernel is None else self.kernel.tolist(),
            "feasibility": self.feasibility,
            "adjoint_cross_check": self.adjoint_cross_check,
            "passed": bool(self.passed),
        }


def check_feasibility(inst, x, options=None, require_adapted=False):
    """Penalty value, decision-set distance and (optionally) the measurability gap of x."""
    from .tree import nonanticipativity_gap

    options = options or KktOptions()
    pen = phi(inst.operator, x, inst.y_sets, p=options.p).value
    tree = inst.tree
    weights = tree.stage_probs if x.mode == "builtin" else [tree.scenario_prob] * tree.stages
    dist_x = 0.0
    for t in range(1, tree.stages + 1):
        d = inst.x_sets.distance_stage(x.stage(t), t, x.mode)
        dist_x += float((weights[t - 1] @ d**options.p) ** (1.0 / options.p))
    gap = nonanticipativity_gap(x, options.p) if require_adapted else 0.0
    ok = pen <= options.feasibility_tol and dist_x <= options.feasibility_tol \
        and gap <= options.feasibility_tol
    return {"penalty": pen, "dist_x": dist_x, "gap": gap, "feasible": bool(ok)}


def _direct_builtin_adjoint(inst, x, psi):
    """Reference evaluation of the built-in adjoint via explicit descendant sums.

    Independent of CausalOperator.apply_adjoint: loops stage pairs and
    divides accumulated descendant mass node by node.
    """
    tree = inst.tree
    n = inst.n
    out = [np.zeros((tree.n_at_stage(l), n)) for l in range(1, tree.stages + 1)]
    for t in range(1, tree.stages + 1):
        H = inst.operator.histories(x, t)
        for pos in range(tree.n_at_stage(t)):
            J = inst.operator.map_at(t, pos).jacobian(H[pos])
            contrib = J.T @ psi.stage(t)[pos]
            for l in range(1, t + 1):
                piece = contrib[(l - 1) * n: l * n]
                if l == t:
                    out[l - 1][pos] += piece
                else:
                    anc = int(tree.ancestor_positions(t, l)[pos])
                    w = tree.stage_probs[t - 1][pos] / tree.stage_probs[l - 1][anc]
                    out[l - 1][anc] += w * piece
    return AdaptedVector(tree, "builtin", out, copy=False)


def _cone_residuals(inst, x, cert, options):
    """Node-wise normal-cone residuals of psi (against Y at F(x)) and n (against X at x)."""
    tree = inst.tree
    mode = x.mode
    y = inst.operator.evaluate(x)
    cone_psi = np.zeros(tree.stages)
    cone_n = np.zeros(tree.stages)
    for t in range(1, tree.stages + 1):
        ysets = inst.y_sets.at_stage(t) if mode == "builtin" else inst.y_sets.at_scenarios(t)
        xsets = inst.x_sets.at_stage(t) if mode == "builtin" else inst.x_sets.at_scenarios(t)
        yt, xt = y.stage(t), x.stage(t)
        pt, nt = cert.psi.stage(t), cert.n.stage(t)
        worst_p = worst_n = 0.0
        for i in range(yt.shape[0]):
            yi = ysets[i].project(yt[i])  # tolerate feasibility-level drift off the set
            xi = xsets[i].project(xt[i])
            worst_p = max(worst_p, ysets[i].normal_cone_residual(yi, pt[i], options.active_tol))
            worst_n = max(worst_n, xsets[i].normal_cone_residual(xi, nt[i], options.active_tol))
        cone_psi[t - 1] = worst_p
        cone_n[t - 1] = worst_n
    return cone_psi, cone_n


def kkt_residual_builtin(inst, x, cert, options=None):
    """Residuals of the built-in stationarity system at a feasible adapted policy."""
    options = options or KktOptions()
    if cert.mode != "builtin":
        raise ValueError("certificate mode must be builtin")
    if x.mode != "builtin":
        x = x.collapse()
    feas = check_feasibility(inst, x, options)
    if not feas["feasible"]:
        raise InfeasiblePointError(
            f"candidate violates feasibility: penalty {feas['penalty']:.2e}, "
            f"dist_x {feas['dist_x']:.2e}")
    adj = inst.operator.apply_adjoint(x, cert.psi)
    resid = cert.g + adj + cert.n
    cross = lq_norm(_direct_builtin_adjoint(inst, x, cert.psi) - adj, options.q)
    stat = _stage_lq(resid, options.q)
    cone_psi, cone_n = _cone_residuals(inst, x, cert, options)
    sub_res = subgradient_membership_residual(inst.objective, x, cert.g, options.q)
    passed = (stat.max() <= options.stationarity_tol
              and cone_psi.max(initial=0.0) <= options.cone_tol
              and cone_n.max(initial=0.0) <= options.cone_tol
              and sub_res <= options.subgradient_tol)
    return KktReport(mode="builtin", stationarity=stat, stationarity_max=float(stat.max()),
                     cone_psi=cone_psi, cone_n=cone_n, subgradient_residual=float(sub_res),
                     kernel=None, feasibility=feas, adjoint_cross_check=float(cross),
                     passed=bool(passed))


def _stage_lq(vec, q):
    out = np.empty(vec.tree.stages)
    weights = vec.tree.stage_probs if vec.mode == "builtin" \
        else [vec.tree.scenario_prob] * vec.tree.stages
    for t in range(1, vec.tree.stages + 1):
        arr = vec.stage(t)
        norms = np.sqrt(np.einsum("ij,ij->i", arr, arr))
        if np.isinf(q):
            out[t - 1] = norms.max(initial=0.0)
        else:
            out[t - 1] = float((weights[t - 1] @ norms**q) ** (1.0 / q))
    return out


def kkt_residual_explicit(inst, x, cert, options=None):
    """Residuals of the explicit-measurability stationarity system at a feasible policy."""
    options = options or KktOptions()
    if cert.mode != "explicit":
        raise ValueError("certificate mode must be explicit")
    if x.mode != "relaxed":
        x = x.lift()
    feas = check_feasibility(inst, x, options, require_adapted=True)
    if not feas["feasible"]:
        raise InfeasiblePointError(
            f"candidate violates feasibility: penalty {feas['penalty']:.2e}, "
            f"dist_x {feas['dist_x']:.2e}, gap {feas['gap']:.2e}")
    adj = inst.operator.apply_adjoint(x, cert.psi)
    resid = cert.g + cert.lam + adj + cert.n
    stat = _stage_lq(resid, options.q)
    # lam must lie in the kernel of the projector adjoint: E_t[lam_t] = 0
    kernel = _stage_lq(conditional_expectation_stagewise(cert.lam), options.q)
    cone_psi, cone_n = _cone_residuals(inst, x, cert, options)
    sub_res = subgradient_membership_residual(inst.objective, x, cert.g, options.q)
    cross = 0.0
    passed = (stat.max() <= options.stationarity_tol
              and kernel.max() <= options.kernel_tol
              and cone_psi.max(initial=0.0) <= options.cone_tol
              and cone_n.max(initial=0.0) <= options.cone_tol
              and sub_res <= options.subgradient_tol)
    return KktReport(mode="explicit", stationarity=stat, stationarity_max=float(stat.max()),
                     cone_psi=cone_psi, cone_n=cone_n, subgradient_residual=float(sub_res),
                     kernel=kernel, feasibility=feas, adjoint_cross_check=float(cross),
                     passed=bool(passed))


def conditional_expectation_stagewise(v):
    """Apply E_t to the stage-t component of a relaxed vector, for every t."""
    from .tree import nonanticipativity_project

    return nonanticipativity_project(v)


def reduce_multipliers(cert, tree):
    """Stage-wise conditional expectation of an explicit certificate.

    The kernel multiplier integrates to zero and drops out; convexity of the
    normal cones preserves the node-wise memberships, so the image is a
    candidate certificate for the built-in system.
    """
    if cert.mode != "explicit":
        raise ValueError("reduction maps explicit certificates to builtin ones")

    def reduce_vec(vec):
        vals = []
        for t in range(1, tree.stages + 1):
            vals.append(kernels.segment_weighted_mean(
                vec.stage(t), tree.scenario_prob, tree.stage_groups[t - 1], tree.n_at_stage(t)))
        return AdaptedVector(tree, "builtin", vals, copy=False)

    return MultiplierCertificate(mode="builtin", g=reduce_vec(cert.g),
                                 psi=reduce_vec(cert.psi), n=reduce_vec(cert.n))


# -- multiplier recovery ----------------------------------------------------


def _normal_cone_columns(s, point, active_tol):
    """Parametrize N_S(point) as {D @ coef : coef[sign_mask] >= 0}.

    Columns are cone directions for active inequalities and free directions
    for equality-type sets (singletons, subspaces, pinned box coordinates).
    """
    from .sets import Ball, Box, Orthant, Polyhedron, Singleton, Subspace
    from scipy.linalg import null_space as _null_space

    d = s.dim
    cols = []
    nonneg = []
    eye = np.eye(d)
    if isinstance(s, Box):
        for i in range(d):
            lo, hi = s.lower[i], s.upper[i]
            if hi - lo <= active_tol:  # pinned coordinate: free normal component
                cols.append(eye[i])
                nonneg.append(False)
                continue
            if point[i] >= hi - active_tol:
                cols.append(eye[i])
                nonneg.append(True)
            if point[i] <= lo + active_tol:
                cols.append(-eye[i])
                nonneg.append(True)
    elif isinstance(s, Orthant):
        for i, sign in enumerate(s.signs):
            if sign == "0":
                cols.append(eye[i])
                nonneg.append(False)
            elif sign == "+" and abs(point[i]) <= active_tol:
                cols.append(-eye[i])
                nonneg.append(True)
            elif sign == "-" and abs(point[i]) <= active_tol:
                cols.append(eye[i])
                nonneg.append(True)
    elif isinstance(s, Ball):
        if s.radius == 0.0:
            cols.extend(eye)
            nonneg.extend([False] * d)
        else:
            r = np.linalg.norm(point - s.center)
            if r >= s.radius - active_tol:
                cols.append((point - s.center) / max(r, 1e-15))
                nonneg.append(True)
    elif isinstance(s, Singleton):
        cols.extend(eye)
        nonneg.extend([False] * d)
    elif isinstance(s, Subspace):
        comp = _null_space(s.basis.T) if s.basis.shape[1] else eye
        cols.extend(comp.T)
        nonneg.extend([False] * comp.shape[1])
    elif isinstance(s, Polyhedron):
        scale = 1.0 + float(np.abs(s.h).max(initial=0.0))
        active = np.flatnonzero(s.G @ point >= s.h - active_tol * scale)
        for idx in active:
            cols.append(s.G[idx])
            nonneg.append(True)
    else:
        raise ValueError(f"normal-cone parametrization unavailable for kind {s.kind!r}")
    if not cols:
        return np.zeros((d, 0)), np.zeros(0, dtype=bool)
    return np.array(cols).T, np.array(nonneg, dtype=bool)


def _kernel_basis_vectors(tree, t):
    """Scalar basis of {v per scenario : E_t[v] = 0}, one weight vector each."""
    basis = []
    for pos in range(tree.n_at_stage(t)):
        scen = tree.node_scenarios(t, pos)
        if scen.size < 2:
            continue
        p = tree.scenario_prob
        last = scen[-1]
        for s in scen[:-1]:
            vec = np.zeros(tree.n_scenarios)
            vec[s] = 1.0
            vec[last] = -p[s] / p[last]
            basis.append(vec)
    return basis


@dataclass
class RecoveryResult:
    certificate: MultiplierCertificate
    report: KktReport
    found: bool
    parameters: int = 0


def recover_multipliers(inst, x, mode="builtin", options=None):
    """Fit multipliers minimizing the stationarity residual at a feasible policy.

    The objective subgradient is the canonical one; psi and n range over the
    active normal-cone parametrizations; the kernel multiplier (explicit
    mode) ranges over a basis of mean-zero scenario weights. Bounded least
    squares over the sign-constrained coefficients; the result is audited by
    the corresponding checker.
    """
    options = options or KktOptions()
    tree = inst.tree
    n, m = inst.n, inst.m
    if mode == "builtin" and x.mode != "builtin":
        x = x.collapse()
    if mode == "explicit" and x.mode != "relaxed":
        x = x.lift()
    storage = x.mode
    rows = [tree.n_at_stage(t) for t in range(1, tree.stages + 1)] if storage == "builtin" \
        else [tree.n_scenarios] * tree.stages

    g = inst.objective.subgradient(x, storage)
    y = inst.operator.evaluate(x)

    # parameter blocks: per-stage psi cone coefficients, n cone coefficients,
    # and (explicit) kernel weights per decision coordinate
    params = []  # (kind, t, pos, columns, nonneg) descriptors

    def add_cone_params(fam, values, dim, kind):
        for t in range(1, tree.stages + 1):
            sets_t = fam.at_stage(t) if storage == "builtin" else fam.at_scenarios(t)
            arr = values.stage(t)
            for pos in range(rows[t - 1]):
                anchor = sets_t[pos].project(arr[pos])
                D, nonneg = _normal_cone_columns(sets_t[pos], anchor, options.active_tol)
                if D.shape[1]:
                    params.append((kind, t, pos, D, nonneg))

    add_cone_params(inst.y_sets, y, m, "psi")
    add_cone_params(inst.x_sets, x, n, "n")
    if mode == "explicit":
        for t in range(1, tree.stages + 1):
            for vec in _kernel_basis_vectors(tree, t):
                for j in range(n):
                    params.append(("lam", t, j, vec, None))

    n_params = sum(
        (p[3].shape[1] if p[0] in ("psi", "n") else 1) for p in params
    )

    # residual rows: stationarity equations, probability-weighted
    weights = [np.sqrt(tree.stage_probs[t - 1] if storage == "builtin" else tree.scenario_prob)
               for t in range(1, tree.stages + 1)]

    def weighted_flat(vec):
        return np.concatenate([
            (weights[t - 1][:, None] * vec.stage(t)).ravel() for t in range(1, tree.stages + 1)
        ])

    r0 = weighted_flat(g)
    columns = []
    col_nonneg = []
    for kind, t, pos, D, nonneg in params:
        if kind == "psi":
            for j in range(D.shape[1]):
                psi_basis = AdaptedVector.zeros(tree, storage, m)
                psi_basis.stage(t)[pos] = D[:, j]
                col = weighted_flat(inst.operator.apply_adjoint(x, psi_basis))
                columns.append(col)
                col_nonneg.append(bool(nonneg[j]))
        elif kind == "n":
            for j in range(D.shape[1]):
                nb = AdaptedVector.zeros(tree, storage, n)
                nb.stage(t)[pos] = D[:, j]
                columns.append(weighted_flat(nb))
                col_nonneg.append(bool(nonneg[j]))
        else:  # lam kernel basis element on decision coordinate pos
            lb = AdaptedVector.zeros(tree, "relaxed", n)
            lb.stage(t)[:, pos] = D
            columns.append(weighted_flat(lb))
            col_nonneg.append(False)

    if columns:
        M = np.array(columns).T
        lb = np.where(col_nonneg, 0.0, -np.inf)
        ub = np.full(len(columns), np.inf)
        # light ridge: keeps the fit unique without disturbing the residual
        reg = 1e-9
        M_aug = np.vstack([M, reg * np.eye(M.shape[1])])
        r_aug = np.concatenate([-r0, np.zeros(M.shape[1])])
        sol = sciopt.lsq_linear(M_aug, r_aug, bounds=(lb, ub), method="bvls", tol=1e-14)
        coef = np.where(np.abs(sol.x) < 1e-14, 0.0, sol.x)
    else:
        coef = np.zeros(0)

    psi = AdaptedVector.zeros(tree, storage, m)
    nvec = AdaptedVector.zeros(tree, storage, n)
    lam = AdaptedVector.zeros(tree, "relaxed", n) if mode == "explicit" else None
    k = 0
    for kind, t, pos, D, nonneg in params:
        if kind in ("psi", "n"):
            block = coef[k: k + D.shape[1]]
            k += D.shape[1]
            target = psi if kind == "psi" else nvec
            target.stage(t)[pos] += D @ block
        else:
            lam.stage(t)[:, pos] += coef[k] * D
            k += 1

    cert = MultiplierCertificate(mode=mode, g=g, psi=psi, n=nvec, lam=lam)
    checker = kkt_residual_builtin if mode == "builtin" else kkt_residual_explicit
    report = checker(inst, x, cert, options)
    return RecoveryResult(certificate=cert, report=report, found=bool(report.passed),
                          parameters=int(n_params))
