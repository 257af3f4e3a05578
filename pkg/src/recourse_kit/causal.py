"""Stage-wise causal dynamics with analytic Jacobians and adjoints.

A causal operator maps a staged policy x to staged outputs y, where the
stage-t output at a node depends only on the decision history x_1..x_t along
that node's ancestor path. Every stage map comes from a whitelist (affine,
componentwise sin/tanh/softplus around an affine core, bilinear-quadratic)
so that continuous differentiability and a certified Jacobian norm bound are
available by construction.

Adjoint application differs between the two measurability modes:

* builtin: (A* psi)_l = A_ll^T psi_l + E_l[ sum_{t>l} A_tl^T psi_t ];
* relaxed: the same sum scenario-wise, with no conditional expectation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .tree import AdaptedVector, lp_norm

SMOOTH_NAMES = ("sin", "tanh", "softplus")


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_FUN = {
    "sin": (np.sin, np.cos),
    "tanh": (np.tanh, lambda z: 1.0 / np.cosh(z) ** 2),
    "softplus": (_softplus, _sigmoid),
}


class StageMap:
    """Map from the stacked history (n*t,) to the stage output (m,)."""

    kind = "abstract"

    def __init__(self, m, hist_dim):
        self.m = int(m)
        self.hist_dim = int(hist_dim)

    def value(self, xi):
        return self.value_batch(np.asarray(xi, dtype=float)[None, :])[0]

    def jacobian(self, xi):
        raise NotImplementedError

    def value_batch(self, X):
        raise NotImplementedError

    def jacobian_bound(self):
        """Certified upper bound on the spectral norm of the Jacobian."""
        raise NotImplementedError


class AffineMap(StageMap):
    kind = "affine"

    def __init__(self, A, b):
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.size:
            raise DimensionMismatch("affine map requires A (m, n*t) and b (m,)")
        super().__init__(A.shape[0], A.shape[1])
        self.A = A
        self.b = b

    def value_batch(self, X):
        return X @ self.A.T + self.b

    def jacobian(self, xi):
        return self.A.copy()

    def jacobian_bound(self):
        return float(np.linalg.norm(self.A, 2))

    def to_json_dict(self):
        return {"kind": "affine", "A": self.A.tolist(), "b": self.b.tolist()}


class SmoothMap(StageMap):
    """f(xi) = A xi + b + W sigma(M xi + c) with sigma in the whitelist."""

    kind = "smooth"

    def __init__(self, name, A, b, W, M, c):
        if name not in SMOOTH_NAMES:
            raise ValueError(f"unknown nonlinearity {name!r}; supported: {SMOOTH_NAMES}")
        W = np.asarray(W, dtype=np.float64)
        M = np.asarray(M, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        m, k = W.shape
        if M.shape[0] != k or c.size != k:
            raise DimensionMismatch("inner shapes of W, M, c disagree")
        super().__init__(m, M.shape[1])
        self.name = name
        self.A = np.zeros((m, self.hist_dim)) if A is None else np.asarray(A, dtype=np.float64)
        self.b = np.zeros(m) if b is None else np.asarray(b, dtype=np.float64)
        self.W = W
        self.M = M
        self.c = c
        self._fun, self._dfun = _FUN[name]

    def value_batch(self, X):
        inner = X @ self.M.T + self.c
        return X @ self.A.T + self.b + self._fun(inner) @ self.W.T

    def jacobian(self, xi):
        inner = self.M @ xi + self.c
        return self.A + (self.W * self._dfun(inner)) @ self.M

    def jacobian_bound(self):
        # |sigma'| <= 1 for sin, tanh and softplus
        return float(np.linalg.norm(self.A, 2) + np.linalg.norm(self.W, 2) * np.linalg.norm(self.M, 2))

    def to_json_dict(self):
        return {"kind": "smooth", "name": self.name,
                "params": {"A": self.A.tolist(), "b": self.b.tolist(), "W": self.W.tolist(),
                           "M": self.M.tolist(), "c": self.c.tolist()}}


class BilinearMap(StageMap):
    """f_i(xi) = (A xi)_i + b_i + 0.5 xi^T Q_i xi, with a declared input radius.

    The Jacobian bound is certified on the ball of that radius; inputs are
    expected to stay inside it (bounded decision sets).
    """

    kind = "bilinear"

    def __init__(self, A, b, Q, input_radius):
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        Q = np.asarray(Q, dtype=np.float64)
        if Q.ndim != 3 or Q.shape[0] != A.shape[0] or Q.shape[1] != Q.shape[2]:
            raise DimensionMismatch("bilinear map requires Q (m, k, k)")
        super().__init__(A.shape[0], A.shape[1])
        self.A = A
        self.b = b
        self.Q = 0.5 * (Q + np.transpose(Q, (0, 2, 1)))
        self.input_radius = float(input_radius)

    def value_batch(self, X):
        quad = 0.5 * np.einsum("bi,mij,bj->bm", X, self.Q, X)
        return X @ self.A.T + self.b + quad

    def jacobian(self, xi):
        return self.A + np.einsum("mij,j->mi", self.Q, xi)

    def jacobian_bound(self):
        qnorm = np.sqrt(sum(np.linalg.norm(Qi, 2) ** 2 for Qi in self.Q))
        return float(np.linalg.norm(self.A, 2) + qnorm * self.input_radius)

    def to_json_dict(self):
        return {"kind": "smooth", "name": "bilinear",
                "params": {"A": self.A.tolist(), "b": self.b.tolist(), "Q": self.Q.tolist(),
                           "input_radius": self.input_radius}}


def stage_map_from_json(d, hist_dim, m):
    kind = d.get("kind")
    if kind == "affine":
        mp = AffineMap(d["A"], d["b"])
    elif kind == "smooth":
        p = d.get("params", {})
        if d.get("name") == "bilinear":
            mp = BilinearMap(p["A"], p["b"], p["Q"], p["input_radius"])
        else:
            mp = SmoothMap(d["name"], p.get("A"), p.get("b"), p["W"], p["M"], p["c"])
    else:
        raise ValueError(f"unknown stage map kind {kind!r}")
    if mp.hist_dim != hist_dim or mp.m != m:
        raise DimensionMismatch(
            f"stage map shape ({mp.m}, {mp.hist_dim}) does not match expected ({m}, {hist_dim})")
    return mp


class CausalOperator:
    """Per-stage, per-node stage maps over a tree; immutable after construction."""

    def __init__(self, tree, n, m, maps, cf=None):
        self.tree = tree
        self.n = int(n)
        self.m = int(m)
        if len(maps) != tree.stages:
            raise DimensionMismatch("one list of stage maps per stage is required")
        self.maps = []
        for t, stage_list in enumerate(maps, start=1):
            if len(stage_list) != tree.n_at_stage(t):
                raise DimensionMismatch(f"stage {t}: expected {tree.n_at_stage(t)} maps")
            for mp in stage_list:
                if mp.hist_dim != self.n * t or mp.m != self.m:
                    raise DimensionMismatch(
                        f"stage {t}: map shape ({mp.m}, {mp.hist_dim}) != ({self.m}, {self.n * t})")
            self.maps.append(list(stage_list))
        bound = self.certified_jacobian_bound()
        self.cf = bound if cf is None else float(cf)
        if self.cf + 1e-12 < bound and all(mp.kind == "affine" for sl in self.maps for mp in sl):
            raise ValueError(f"declared Jacobian bound {self.cf} is below the exact affine bound {bound}")

    @property
    def stages(self):
        return self.tree.stages

    def map_at(self, t, pos):
        return self.maps[t - 1][pos]

    def certified_jacobian_bound(self):
        return max(mp.jacobian_bound() for stage_list in self.maps for mp in stage_list)

    # -- history assembly --------------------------------------------------

    def _builtin_histories(self, x, t):
        """History matrix (nodes at stage t, n*t) gathered along ancestor paths."""
        tree = self.tree
        cols = [x.stage(l)[tree.ancestor_positions(t, l)] for l in range(1, t + 1)]
        return np.hstack(cols)

    def _relaxed_histories(self, x, t):
        return np.hstack([x.stage(l) for l in range(1, t + 1)])

    def histories(self, x, t):
        return self._builtin_histories(x, t) if x.mode == "builtin" else self._relaxed_histories(x, t)

    # -- evaluation, derivative, adjoint -----------------------------------

    def evaluate(self, x):
        """y_t(node) = f_t(history(node)); output mode follows the input mode."""
        if x.dim != self.n:
            raise DimensionMismatch(f"policy dimension {x.dim} != operator input dimension {self.n}")
        tree = self.tree
        out = []
        for t in range(1, self.stages + 1):
            H = self.histories(x, t)
            vals = np.empty((H.shape[0], self.m))
            if x.mode == "builtin":
                for pos in range(H.shape[0]):
                    vals[pos] = self.maps[t - 1][pos].value(H[pos])
            else:
                groups = tree.stage_groups[t - 1]
                for pos in range(tree.n_at_stage(t)):
                    sel = groups == pos
                    if np.any(sel):
                        vals[sel] = self.maps[t - 1][pos].value_batch(H[sel])
            out.append(vals)
        return AdaptedVector(tree, x.mode, out, copy=False)

    def _jacobians_at(self, x, t):
        """Full (m, n*t) Jacobians of the stage-t maps at the rows of x."""
        H = self.histories(x, t)
        if x.mode == "builtin":
            return [self.maps[t - 1][pos].jacobian(H[pos]) for pos in range(H.shape[0])]
        groups = self.tree.stage_groups[t - 1]
        return [self.maps[t - 1][groups[s]].jacobian(H[s]) for s in range(H.shape[0])]

    def jacobian_block(self, x, t, l, pos):
        """Block d f_t / d x_l at a stage-t node (builtin) or scenario (relaxed)."""
        if l > t:
            raise ValueError(f"block ({t}, {l}) vanishes by causality; request l <= t")
        H = self.histories(x, t)
        if x.mode == "builtin":
            J = self.maps[t - 1][pos].jacobian(H[pos])
        else:
            J = self.maps[t - 1][self.tree.stage_groups[t - 1][pos]].jacobian(H[pos])
        return J[:, (l - 1) * self.n: l * self.n]

    def apply_jacobian(self, x, h):
        """Directional derivative: node-wise Jacobian-vector products."""
        if h.mode != x.mode:
            raise DimensionMismatch("policy and direction must share the storage mode")
        out = []
        for t in range(1, self.stages + 1):
            jacs = self._jacobians_at(x, t)
            Hh = self.histories(h, t)
            out.append(np.array([jacs[i] @ Hh[i] for i in range(len(jacs))]))
        return AdaptedVector(self.tree, x.mode, out, copy=False)

    def apply_adjoint(self, x, psi):
        """Adjoint of the derivative at x applied to a dual staged vector psi."""
        if psi.dim != self.m:
            raise DimensionMismatch("dual vector dimension must match the operator output")
        if psi.mode != x.mode:
            raise DimensionMismatch("policy and dual vector must share the storage mode")
        tree = self.tree
        n = self.n
        if x.mode == "relaxed":
            out = [np.zeros((tree.n_scenarios, n)) for _ in range(self.stages)]
            for t in range(1, self.stages + 1):
                jacs = self._jacobians_at(x, t)
                pt = psi.stage(t)
                for s in range(tree.n_scenarios):
                    contrib = jacs[s].T @ pt[s]
                    for l in range(1, t + 1):
                        out[l - 1][s] += contrib[(l - 1) * n: l * n]
            return AdaptedVector(tree, "relaxed", out, copy=False)

        out = [np.zeros((tree.n_at_stage(l), n)) for l in range(1, self.stages + 1)]
        for t in range(1, self.stages + 1):
            jacs = self._jacobians_at(x, t)
            pt = psi.stage(t)
            probs_t = tree.stage_probs[t - 1]
            stacked = np.array([jacs[i].T @ pt[i] for i in range(len(jacs))])
            for l in range(1, t + 1):
                block = stacked[:, (l - 1) * n: l * n]
                if l == t:
                    out[l - 1] += block
                else:
                    anc = tree.ancestor_positions(t, l)
                    mass = np.bincount(anc, weights=probs_t, minlength=tree.n_at_stage(l))
                    acc = np.zeros((tree.n_at_stage(l), n))
                    np.add.at(acc, anc, probs_t[:, None] * block)
                    out[l - 1] += acc / mass[:, None]
        return AdaptedVector(tree, "builtin", out, copy=False)


@dataclass
class JacobianCheckReport:
    """Finite-difference validation of the analytic directional derivative."""

    taus: list
    max_error_by_tau: list          # central-difference errors, worst over directions
    forward_error_by_tau: list      # one-sided quotient errors, worst over directions
    max_error: float                # central error at the smallest step
    threshold: float
    passed: bool
    directions: int = 0

    def to_json_dict(self):
        return {
            "taus": list(self.taus),
            "max_error_by_tau": list(self.max_error_by_tau),
            "forward_error_by_tau": list(self.forward_error_by_tau),
            "max_error": self.max_error,
            "threshold": self.threshold,
            "passed": self.passed,
            "directions": self.directions,
        }


def fd_check_jacobian(F, x, directions, taus=(1e-3, 1e-4, 1e-5), tol_scale=1e-6):
    """Compare symmetric difference quotients of F against its derivative.

    The pass criterion is the central-quotient error at the smallest step:
    max over directions of the p=2 norm of
    (F(x + tau h) - F(x - tau h)) / (2 tau) - F'(x) h, required to stay below
    ``tol_scale * (1 + |h|)``. One-sided quotient errors are reported as well
    so the decay of (F(x + tau h) - F(x) - tau F'(x) h) / tau is visible.
    """
    taus = sorted(taus, reverse=True)
    directions = list(directions)
    base = F.evaluate(x)
    jhs = [F.apply_jacobian(x, h) for h in directions]
    hnorms = [lp_norm(h, 2) for h in directions]
    central = []
    forward = []
    passed = True
    for tau in taus:
        worst_c = 0.0
        worst_f = 0.0
        for h, jh, hn in zip(directions, jhs, hnorms):
            plus = F.evaluate(x + tau * h)
            minus = F.evaluate(x + (-tau) * h)
            err_c = lp_norm((1.0 / (2 * tau)) * (plus - minus) - jh, 2)
            err_f = lp_norm((1.0 / tau) * (plus - base) - jh, 2)
            worst_c = max(worst_c, err_c)
            worst_f = max(worst_f, err_f)
            if tau == taus[-1] and err_c > tol_scale * (1.0 + hn):
                passed = False
        central.append(worst_c)
        forward.append(worst_f)
    threshold = tol_scale * (1.0 + min(hnorms, default=0.0))
    return JacobianCheckReport(
        taus=list(taus), max_error_by_tau=central, forward_error_by_tau=forward,
        max_error=central[-1], threshold=threshold, passed=passed,
        directions=len(directions),
    )
