"""Node-wise convex sets: projection, distance, normal cones, polar cones.

Supported kinds: box (with explicit +/-inf bounds), polyhedron (G z <= h),
ball, singleton, orthant (per-coordinate sign pattern), subspace (basis),
and conegen (finitely generated cone, produced as the polar of a polyhedral
cone). Polyhedral projections use the exact least-distance reduction to
nonnegative least squares, which is an active-set method and terminates with
machine-precision residuals at desk scale.
"""

from __future__ import annotations

import numpy as np
from scipy import optimize as sciopt
from scipy.linalg import null_space

from . import _kernels as kernels
from .errors import DimensionMismatch

MEMBERSHIP_TOL = 1e-9
_ACTIVE_TOL = 1e-9

ORTHANT_SIGNS = ("+", "-", "0", "free")


def _as_rows(z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    return z, False


class ConvexSet:
    """Base class: a closed convex subset of R^d."""

    kind = "abstract"

    def __init__(self, dim):
        self.dim = int(dim)

    def _check_dim(self, z):
        if z.shape[-1] != self.dim:
            raise DimensionMismatch(f"{self.kind} set of dimension {self.dim} got point of size {z.shape[-1]}")

    def project(self, z):
        """Euclidean projection of a point (d,) or batch (N, d) onto the set."""
        rows, squeeze = _as_rows(z)
        self._check_dim(rows)
        out = self._project_rows(rows)
        return out[0] if squeeze else out

    def distance(self, z):
        """Euclidean distance to the set; vectorized like :meth:`project`."""
        rows, squeeze = _as_rows(z)
        self._check_dim(rows)
        out = self._distance_rows(rows)
        return float(out[0]) if squeeze else out

    def _distance_rows(self, rows):
        diff = rows - self._project_rows(rows)
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def contains(self, z, tol=MEMBERSHIP_TOL):
        return bool(np.all(self.distance(z) <= tol))

    def normal_cone_residual(self, x, v, active_tol=_ACTIVE_TOL):
        """Distance from ``v`` to the normal cone of the set at ``x`` (x must be in the set)."""
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        self._check_dim(x[None, :])
        d = self.distance(x)
        if d > MEMBERSHIP_TOL:
            raise ValueError(f"point is not in the set (distance {d:.3e})")
        return self._normal_residual(x, v, active_tol)

    def is_cone(self):
        return False

    def polar(self):
        raise ValueError(f"{self.kind} descriptor is not a supported cone")

    def to_json_dict(self):
        raise NotImplementedError


class Box(ConvexSet):
    """Axis-aligned box; bounds may be +/-inf componentwise."""

    kind = "box"

    def __init__(self, lower, upper):
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise DimensionMismatch("box bounds must be 1-D arrays of equal length")
        if np.any(lower > upper):
            raise ValueError("box requires lower <= upper componentwise")
        super().__init__(lower.size)
        self.lower = lower
        self.upper = upper

    def _project_rows(self, rows):
        return kernels.box_project(rows, self.lower, self.upper)

    def _distance_rows(self, rows):
        return kernels.box_distance(rows, self.lower, self.upper)

    def _normal_residual(self, x, v, active_tol):
        acc = 0.0
        for i in range(self.dim):
            at_lo = x[i] <= self.lower[i] + active_tol
            at_hi = x[i] >= self.upper[i] - active_tol
            if at_lo and at_hi:
                continue  # degenerate interval: normal component is free
            if at_hi:
                acc += min(v[i], 0.0) ** 2
            elif at_lo:
                acc += max(v[i], 0.0) ** 2
            else:
                acc += v[i] ** 2
        return float(np.sqrt(acc))

    def is_cone(self):
        lo_ok = np.all((self.lower == 0.0) | np.isneginf(self.lower))
        hi_ok = np.all((self.upper == 0.0) | np.isposinf(self.upper))
        return bool(lo_ok and hi_ok)

    def polar(self):
        if not self.is_cone():
            raise ValueError("box is not a cone (bounds must be 0 or +/-inf)")
        lo = np.where(np.isposinf(self.upper), -np.inf, 0.0)
        hi = np.where(np.isneginf(self.lower), np.inf, 0.0)
        # a free coordinate (both bounds infinite) polarizes to {0}
        free = np.isneginf(self.lower) & np.isposinf(self.upper)
        lo[free] = 0.0
        hi[free] = 0.0
        return Box(lo, hi)

    def to_json_dict(self):
        enc = lambda b: [("inf" if np.isposinf(v) else "-inf" if np.isneginf(v) else float(v)) for v in b]
        return {"kind": "box", "lower": enc(self.lower), "upper": enc(self.upper)}


class Ball(ConvexSet):
    kind = "ball"

    def __init__(self, center, radius):
        center = np.asarray(center, dtype=np.float64)
        if radius < 0:
            raise ValueError("ball radius must be nonnegative")
        super().__init__(center.size)
        self.center = center
        self.radius = float(radius)

    def _project_rows(self, rows):
        return kernels.ball_project(rows, self.center, self.radius)

    def _distance_rows(self, rows):
        return kernels.ball_distance(rows, self.center, self.radius)

    def _normal_residual(self, x, v, active_tol):
        r = np.linalg.norm(x - self.center)
        if self.radius == 0.0 or r < self.radius - active_tol:
            if self.radius == 0.0:
                return 0.0  # singleton: every vector is normal
            return float(np.linalg.norm(v))
        u = (x - self.center) / r
        coef = max(float(v @ u), 0.0)
        return float(np.linalg.norm(v - coef * u))

    def to_json_dict(self):
        return {"kind": "ball", "center": [float(c) for c in self.center], "radius": self.radius}


class Singleton(ConvexSet):
    kind = "singleton"

    def __init__(self, point):
        point = np.asarray(point, dtype=np.float64)
        super().__init__(point.size)
        self.point = point

    def _project_rows(self, rows):
        return np.broadcast_to(self.point, rows.shape).copy()

    def _normal_residual(self, x, v, active_tol):
        return 0.0

    def is_cone(self):
        return bool(np.all(self.point == 0.0))

    def polar(self):
        if not self.is_cone():
            raise ValueError("a singleton is a cone only at the origin")
        return Orthant(("free",) * self.dim)

    def to_json_dict(self):
        return {"kind": "singleton", "point": [float(c) for c in self.point]}


class Orthant(ConvexSet):
    """Product of half-lines/lines: '+' means >= 0, '-' means <= 0, '0' pins to zero, 'free' is R."""

    kind = "orthant"

    def __init__(self, signs):
        signs = tuple(signs)
        for s in signs:
            if s not in ORTHANT_SIGNS:
                raise ValueError(f"orthant sign must be one of {ORTHANT_SIGNS}, got {s!r}")
        super().__init__(len(signs))
        self.signs = signs
        lo = np.array([0.0 if s in ("+", "0") else -np.inf for s in signs])
        hi = np.array([0.0 if s in ("-", "0") else np.inf for s in signs])
        self._box = Box(lo, hi)

    def _project_rows(self, rows):
        return self._box._project_rows(rows)

    def _distance_rows(self, rows):
        return self._box._distance_rows(rows)

    def _normal_residual(self, x, v, active_tol):
        acc = 0.0
        for i, s in enumerate(self.signs):
            if s == "0":
                continue
            if s == "free" or abs(x[i]) > active_tol:
                acc += v[i] ** 2
            elif s == "+":
                acc += max(v[i], 0.0) ** 2
            else:
                acc += min(v[i], 0.0) ** 2
        return float(np.sqrt(acc))

    def is_cone(self):
        return True

    def polar(self):
        flip = {"+": "-", "-": "+", "0": "free", "free": "0"}
        return Orthant(tuple(flip[s] for s in self.signs))

    def to_json_dict(self):
        return {"kind": "orthant", "signs": list(self.signs)}


class Subspace(ConvexSet):
    """Linear subspace spanned by the columns of ``basis`` (orthonormalized on entry)."""

    kind = "subspace"

    def __init__(self, basis, dim=None):
        basis = np.asarray(basis, dtype=np.float64)
        if basis.size == 0:
            if dim is None:
                raise ValueError("empty basis needs an explicit ambient dimension")
            basis = np.zeros((int(dim), 0))
        if basis.ndim != 2:
            raise DimensionMismatch("subspace basis must be a (d, k) array")
        super().__init__(basis.shape[0])
        if basis.shape[1]:
            q, r = np.linalg.qr(basis)
            keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
            self.basis = np.ascontiguousarray(q[:, keep])
        else:
            self.basis = basis

    def _project_rows(self, rows):
        if self.basis.shape[1] == 0:
            return np.zeros_like(rows)
        return (rows @ self.basis) @ self.basis.T

    def _normal_residual(self, x, v, active_tol):
        # normal cone of a subspace is its orthogonal complement
        if self.basis.shape[1] == 0:
            return 0.0
        return float(np.linalg.norm(self.basis.T @ v))

    def is_cone(self):
        return True

    def polar(self):
        if self.basis.shape[1] == 0:
            return Subspace(np.eye(self.dim))
        comp = null_space(self.basis.T)
        return Subspace(comp if comp.size else np.zeros((self.dim, 0)), dim=self.dim)

    def to_json_dict(self):
        return {"kind": "subspace", "basis": [[float(v) for v in row] for row in self.basis]}


def _ldp(G, h):
    """Least-distance program: minimize ||z|| subject to G z >= h.

    Reduction to nonnegative least squares (an exact active-set method).
    Returns (z, feasible).
    """
    m, d = G.shape
    E = np.vstack([G.T, h[None, :]])
    f = np.zeros(d + 1)
    f[-1] = 1.0
    u, _ = sciopt.nnls(E, f)
    r = E @ u - f
    rn = float(np.linalg.norm(r))
    if rn <= 1e-12:
        return np.zeros(d), False
    z = -r[:-1] / r[-1]
    return z, True


class Polyhedron(ConvexSet):
    """Polyhedron {z : G z <= h}; intended for desk-scale dimensions."""

    kind = "polyhedron"

    def __init__(self, G, h, check_nonempty=False):
        G = np.asarray(G, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        if G.ndim != 2 or h.ndim != 1 or G.shape[0] != h.size:
            raise DimensionMismatch("polyhedron requires G (m, d) and h (m,)")
        super().__init__(G.shape[1])
        self.G = G
        self.h = h
        if check_nonempty and not self.feasible_point_exists():
            raise ValueError("polyhedron is empty")

    def feasible_point_exists(self):
        res = sciopt.linprog(np.zeros(self.dim), A_ub=self.G, b_ub=self.h,
                             bounds=[(None, None)] * self.dim, method="highs")
        return bool(res.success)

    def _project_one(self, z):
        slack = self.h - self.G @ z
        if np.all(slack >= 0.0):
            return z.copy()
        w, feasible = _ldp(-self.G, -slack)
        if not feasible:
            raise ValueError("projection failed: polyhedron appears empty")
        p = z + w
        # polish on the identified face for a machine-precision residual
        scale = 1.0 + np.abs(self.h).max(initial=0.0)
        active = np.flatnonzero(self.G @ p >= self.h - 1e-7 * scale)
        if active.size:
            Ga = self.G[active]
            ha = self.h[active]
            # minimize ||q - z|| s.t. Ga q = ha via the KKT system
            kkt = np.block([[np.eye(self.dim), Ga.T], [Ga, np.zeros((active.size, active.size))]])
            rhs = np.concatenate([z, ha])
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            q = sol[: self.dim]
            mu = sol[self.dim:]
            if np.all(self.G @ q <= self.h + 1e-9 * scale) and np.all(mu >= -1e-9):
                if np.linalg.norm(q - z) <= np.linalg.norm(w) + 1e-12:
                    return q
        return p

    def _project_rows(self, rows):
        return np.array([self._project_one(r) for r in rows])

    def _normal_residual(self, x, v, active_tol):
        scale = 1.0 + np.abs(self.h).max(initial=0.0)
        active = np.flatnonzero(self.G @ x >= self.h - active_tol * scale)
        if active.size == 0:
            return float(np.linalg.norm(v))
        _, res = sciopt.nnls(self.G[active].T, v)
        return float(res)

    def is_cone(self):
        return bool(np.all(self.h == 0.0))

    def polar(self):
        if not self.is_cone():
            raise ValueError("polyhedron is a cone only when h = 0")
        return ConeHull(self.G.T)

    def to_json_dict(self):
        return {"kind": "polyhedron", "G": [[float(v) for v in row] for row in self.G],
                "h": [float(v) for v in self.h]}


class ConeHull(ConvexSet):
    """Finitely generated cone {sum_j mu_j g_j : mu >= 0}; generators are columns."""

    kind = "conegen"

    def __init__(self, generators):
        generators = np.asarray(generators, dtype=np.float64)
        if generators.ndim != 2:
            raise DimensionMismatch("generators must be a (d, k) array")
        super().__init__(generators.shape[0])
        self.generators = generators

    def _polar_polyhedron(self):
        return Polyhedron(self.generators.T, np.zeros(self.generators.shape[1]))

    def _project_rows(self, rows):
        # Moreau decomposition against the polar polyhedral cone
        polar_proj = self._polar_polyhedron()._project_rows(rows)
        return rows - polar_proj

    def _normal_residual(self, x, v, active_tol):
        # N_C(x) = C^polar intersected with {v : v . x = 0}
        polar = self._polar_polyhedron()
        d = polar.distance(v)
        return float(np.hypot(d, abs(v @ x) / max(1.0, np.linalg.norm(x))))

    def is_cone(self):
        return True

    def polar(self):
        return self._polar_polyhedron()

    def to_json_dict(self):
        return {"kind": "conegen", "generators": [[float(v) for v in row] for row in self.generators]}


def _dec_bound(v):
    if v == "inf":
        return np.inf
    if v == "-inf":
        return -np.inf
    return float(v)


def set_from_json(d):
    kind = d.get("kind")
    if kind == "box":
        return Box([_dec_bound(v) for v in d["lower"]], [_dec_bound(v) for v in d["upper"]])
    if kind == "ball":
        return Ball(d["center"], d["radius"])
    if kind == "singleton":
        return Singleton(d["point"])
    if kind == "orthant":
        return Orthant(d["signs"])
    if kind == "subspace":
        basis = np.asarray(d["basis"], dtype=float)
        return Subspace(basis, dim=d.get("dim", basis.shape[0] if basis.ndim == 2 else None))
    if kind == "polyhedron":
        return Polyhedron(d["G"], d["h"])
    if kind == "conegen":
        return ConeHull(d["generators"])
    raise ValueError(f"unknown set kind {kind!r}")


def polar_pointwise(cone):
    """Exact polar of a cone descriptor; double polar returns the original set."""
    return cone.polar()


def cones_equal(a, b, rng=None, samples=64, tol=1e-9):
    """Set equality test for cones via projections of sampled points."""
    if a.dim != b.dim:
        return False
    rng = np.random.default_rng(0) if rng is None else rng
    pts = rng.standard_normal((samples, a.dim)) * 3.0
    pa = a.project(pts)
    pb = b.project(pts)
    return bool(np.max(np.abs(pa - pb)) <= tol)


class SetFamily:
    """One convex set per tree node (all stages), keyed by node id.

    Stage-t measurability is structural: relaxed-mode access resolves a
    scenario to its stage-t ancestor's set.
    """

    def __init__(self, tree, by_id):
        self.tree = tree
        self.by_id = dict(by_id)
        dims = set()
        for t in range(1, tree.stages + 1):
            for nid in tree.stage_ids(t):
                if int(nid) not in self.by_id:
                    raise ValueError(f"set family is missing node {int(nid)}")
                dims.add(self.by_id[int(nid)].dim)
        if len(dims) != 1:
            raise DimensionMismatch(f"set family mixes dimensions {sorted(dims)}")
        self.dim = dims.pop()

    @classmethod
    def uniform(cls, tree, descriptor):
        return cls(tree, {int(nid): descriptor for nid in tree.ids})

    @classmethod
    def per_stage(cls, tree, stage_descriptors):
        by_id = {}
        for t in range(1, tree.stages + 1):
            for nid in tree.stage_ids(t):
                by_id[int(nid)] = stage_descriptors[t - 1]
        return cls(tree, by_id)

    def at_stage(self, t):
        """Sets of the stage-t nodes, in canonical node order."""
        return [self.by_id[int(nid)] for nid in self.tree.stage_ids(t)]

    def at_scenarios(self, t):
        """Stage-t sets resolved per scenario (the relaxed-mode view)."""
        stage_sets = self.at_stage(t)
        return [stage_sets[pos] for pos in self.tree.stage_groups[t - 1]]

    def distance_stage(self, values, t, mode):
        """Per-row distances of stage-t values to their node-wise sets."""
        sets_ = self.at_stage(t) if mode == "builtin" else self.at_scenarios(t)
        return np.array([sets_[i].distance(values[i]) for i in range(len(sets_))])

    def to_json_dict(self):
        return {str(nid): s.to_json_dict() for nid, s in sorted(self.by_id.items())}

    @classmethod
    def from_json_dict(cls, tree, d):
        return cls(tree, {int(k): set_from_json(v) for k, v in d.items()})


class PolarCheckReport:
    """Outcome of the sampled node-wise polar verification."""

    def __init__(self, samples, max_violation, worst_case):
        self.samples = samples
        self.max_violation = max_violation
        self.worst_case = worst_case

    @property
    def passed(self):
        return self.max_violation <= 1e-12

    def to_json_dict(self):
        return {"samples": self.samples, "max_violation": self.max_violation,
                "worst_case": self.worst_case, "passed": self.passed}


def verify_decomposable_polar(family, samples=100, seed=0):
    """Check that node-wise polars characterize the polar of a decomposable cone.

    For sampled stage-adapted duals y, membership node by node
    (y(node) in K(node)^polar) must coincide with the functional test
    sup {<y, x> : x in K, node-supported, |x| <= 1} <= 0. Both quantities
    equal the norm of the projection of y(node) onto K(node), computed here
    through independent code paths (polar descriptor vs. direct projection).
    """
    tree = family.tree
    rng = np.random.default_rng(seed)
    max_violation = 0.0
    worst = None
    polars = {nid: s.polar() for nid, s in family.by_id.items()}
    for _ in range(samples):
        t = int(rng.integers(1, tree.stages + 1))
        ids = tree.stage_ids(t)
        y = rng.standard_normal((ids.size, family.dim)) * 2.0
        for i, nid in enumerate(ids):
            cone = family.by_id[int(nid)]
            # route 1: distance to the polar descriptor
            d_polar = polars[int(nid)].distance(y[i])
            # route 2: support of y over the unit ball of the cone = ||P_cone(y)||
            support = float(np.linalg.norm(cone.project(y[i])))
            viol = abs(d_polar - support)
            if viol > max_violation:
                max_violation = viol
                worst = {"stage": t, "node": int(nid), "difference": viol}
            if d_polar <= 1e-12 < support - 1e-12:
                # claimed member of the polar but a witness x in K with <y, x> > 0 exists
                max_violation = max(max_violation, support)
                worst = {"stage": t, "node": int(nid), "difference": support}
    return PolarCheckReport(samples, float(max_violation), worst)
