"""Instance files, canonical JSON, and seeded instance generation.

Every artifact (instance, policy, certificate, report) serializes to a
canonical JSON form: sorted keys, compact separators, floats rendered with
17 significant digits. Canonical serialization is byte-stable under
parse/serialize round trips, so fixtures can be compared byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .causal import AffineMap, BilinearMap, CausalOperator, SmoothMap, stage_map_from_json
from .errors import SchemaError
from .model import CausalInstance
from .objectives import (CVaRObjective, ExpectedObjective, LinearCost, QuadraticCost,
                         objective_from_json)
from .optimality import MultiplierCertificate
from .sets import Box, Polyhedron, SetFamily, set_from_json
from .tree import AdaptedVector, ScenarioTree

FORMAT_VERSION = 1


# -- canonical JSON ---------------------------------------------------------


def _canon(obj, out):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("non-finite floats cannot be serialized; encode bounds as strings")
        out.append(format(v, ".17g"))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise ValueError("canonical JSON requires string keys")
            if i:
                out.append(",")
            out.append(json.dumps(key))
            out.append(":")
            _canon(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _canon(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot canonicalize {type(obj).__name__}")


def canonical_json(obj):
    out = []
    _canon(obj, out)
    return "".join(out)


# -- schema helpers ---------------------------------------------------------


def _need(d, key, pointer):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"{pointer}/{key}", "missing required field")
    return d[key]


def _as_type(value, types, pointer):
    if not isinstance(value, types):
        raise SchemaError(pointer, f"expected {types}, got {type(value).__name__}")
    return value


# -- policies ---------------------------------------------------------------


def policy_to_json(x):
    tree = x.tree
    stages = {}
    for t in range(1, tree.stages + 1):
        keys = tree.stage_ids(t) if x.mode == "builtin" else tree.ids[tree.scenario_nodes]
        stages[str(t)] = {str(int(k)): x.stage(t)[i].tolist() for i, k in enumerate(keys)}
    return {"mode": x.mode, "dim": x.dim, "stages": stages}


def policy_from_json(tree, d, pointer="/policy"):
    mode = _need(d, "mode", pointer)
    if mode not in ("builtin", "relaxed"):
        raise SchemaError(f"{pointer}/mode", f"unknown mode {mode!r}")
    dim = int(_need(d, "dim", pointer))
    stages = _need(d, "stages", pointer)
    vals = []
    for t in range(1, tree.stages + 1):
        block = _need(stages, str(t), f"{pointer}/stages")
        keys = tree.stage_ids(t) if mode == "builtin" else tree.ids[tree.scenario_nodes]
        rows = []
        for k in keys:
            if str(int(k)) not in block:
                raise SchemaError(f"{pointer}/stages/{t}", f"missing node {int(k)}")
            rows.append(block[str(int(k))])
        vals.append(np.asarray(rows, dtype=float).reshape(len(keys), dim))
    return AdaptedVector(tree, mode, vals, copy=False)


# -- instance files -----------------------------------------------------------


@dataclass
class ProblemInstanceFile:
    instance: CausalInstance
    policy: AdaptedVector | None = None
    certificate: MultiplierCertificate | None = None
    version: int = FORMAT_VERSION

    def to_json_dict(self):
        inst = self.instance
        ops = []
        for t in range(1, inst.stages + 1):
            ids = inst.tree.stage_ids(t)
            ops.append({str(int(ids[pos])): inst.operator.map_at(t, pos).to_json_dict()
                        for pos in range(ids.size)})
        d = {
            "format_version": self.version,
            "name": inst.name,
            "tree": inst.tree.to_json_dict(),
            "operator": {"n": inst.n, "m": inst.m, "stages": ops},
            "x_sets": inst.x_sets.to_json_dict(),
            "y_sets": inst.y_sets.to_json_dict(),
            "objective": inst.objective.to_json_dict(),
            "constants": {"cf": inst.cf, "l_phi": inst.l_phi, "recourse_c": inst.recourse_c},
            "policy": None if self.policy is None else policy_to_json(self.policy),
            "certificate": None if self.certificate is None else self.certificate.to_json_dict(),
        }
        return d


def parse_instance_dict(d):
    version = _need(d, "format_version", "")
    if version != FORMAT_VERSION:
        raise SchemaError("/format_version", f"unsupported version {version}")
    try:
        tree = ScenarioTree.from_json_dict(_need(d, "tree", ""))
    except (KeyError, TypeError) as err:
        raise SchemaError("/tree", str(err)) from err
    known = {int(i) for i in tree.ids}

    op = _need(d, "operator", "")
    n = int(_need(op, "n", "/operator"))
    m = int(_need(op, "m", "/operator"))
    stage_blocks = _as_type(_need(op, "stages", "/operator"), list, "/operator/stages")
    if len(stage_blocks) != tree.stages:
        raise SchemaError("/operator/stages", f"expected {tree.stages} stage blocks")
    maps = []
    for t, block in enumerate(stage_blocks, start=1):
        stage_maps = []
        for nid in tree.stage_ids(t):
            key = str(int(nid))
            if key not in block:
                raise SchemaError(f"/operator/stages/{t - 1}", f"missing node {key}")
            stage_maps.append(stage_map_from_json(block[key], n * t, m))
        maps.append(stage_maps)
    cf = d.get("constants", {}).get("cf")
    operator = CausalOperator(tree, n, m, maps, cf=cf)

    for field, dim in (("x_sets", n), ("y_sets", m)):
        block = _need(d, field, "")
        for key in block:
            if int(key) not in known:
                raise SchemaError(f"/{field}/{key}", "references a node that does not exist")
        for nid in known:
            if str(nid) not in block:
                raise SchemaError(f"/{field}", f"missing node {nid}")
    x_sets = SetFamily.from_json_dict(tree, d["x_sets"])
    y_sets = SetFamily.from_json_dict(tree, d["y_sets"])
    if x_sets.dim != n:
        raise SchemaError("/x_sets", f"dimension {x_sets.dim} != operator n {n}")
    if y_sets.dim != m:
        raise SchemaError("/y_sets", f"dimension {y_sets.dim} != operator m {m}")

    objective = objective_from_json(tree, _need(d, "objective", ""))
    consts = _need(d, "constants", "")
    inst = CausalInstance(
        tree=tree, operator=operator, x_sets=x_sets, y_sets=y_sets, objective=objective,
        cf=float(_need(consts, "cf", "/constants")),
        l_phi=float(_need(consts, "l_phi", "/constants")),
        recourse_c=float(_need(consts, "recourse_c", "/constants")),
        name=str(d.get("name", "")),
    )
    policy = None
    if d.get("policy") is not None:
        policy = policy_from_json(tree, d["policy"])
    certificate = None
    if d.get("certificate") is not None:
        certificate = MultiplierCertificate.from_json_dict(tree, d["certificate"], n, m)
    return ProblemInstanceFile(instance=inst, policy=policy, certificate=certificate,
                               version=version)


def parse_instance(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as err:
            raise SchemaError("", f"invalid JSON: {err}") from err
    return parse_instance_dict(d)


def serialize_instance(pif, path=None):
    text = canonical_json(pif.to_json_dict())
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
    return text


# -- generation ---------------------------------------------------------------


@dataclass
class GeneratorSpec:
    seed: int = 0
    stages: int = 3
    branching: tuple = (2, 2)
    n: int = 2
    m: int = 2
    operator_family: str = "affine"       # affine | smooth
    set_family: str = "box"               # box | polyhedron
    objective_family: str = "expected"    # expected | cvar
    recourse_friendly: bool = True
    slack: float = 0.75
    name: str = ""

    def __post_init__(self):
        if len(self.branching) != self.stages - 1:
            raise ValueError("branching needs one factor per non-terminal stage")
        if self.operator_family not in ("affine", "smooth"):
            raise ValueError("operator_family must be affine or smooth")
        if self.set_family not in ("box", "polyhedron"):
            raise ValueError("set_family must be box or polyhedron")
        if self.objective_family not in ("expected", "cvar"):
            raise ValueError("objective_family must be expected or cvar")


def _random_probs(rng, branching):
    weights = []
    next_parent = 0
    parent_count = 1
    for b in branching:
        level = {}
        for _ in range(parent_count):
            w = rng.uniform(0.4, 1.0, size=b)
            level[next_parent] = w.tolist()
            next_parent += 1
        # keys are assigned in construction order of from_branching
        weights.append(level)
        parent_count *= b
    return weights


def _friendly_stage_map(rng, spec, t, hist_dim):
    """History-coupled map with an identity own-stage block, so any target output
    is reachable by the stage decision (the basis of the built-in recourse margin)."""
    n, m = spec.n, spec.m
    A = np.zeros((m, hist_dim))
    for l in range(t - 1):
        A[:, l * n: (l + 1) * n] = rng.uniform(-0.5, 0.5, size=(m, n)) / max(1, t - 1)
    A[:, (t - 1) * n: t * n] = np.eye(m, n)
    b = rng.uniform(-0.2, 0.2, size=m)
    if spec.operator_family == "affine" or t == 1:
        return AffineMap(A, b)
    k = m
    W = rng.uniform(-0.3, 0.3, size=(m, k))
    M = np.zeros((k, hist_dim))
    M[:, : (t - 1) * n] = rng.uniform(-0.5, 0.5, size=(k, (t - 1) * n))
    c = rng.uniform(-0.5, 0.5, size=k)
    name = ("sin", "tanh", "softplus")[t % 3]
    return SmoothMap(name, A, b, W, M, c)


def generate(spec):
    """Deterministic seeded instance; recourse-friendly instances are built so
    the sampled recourse ratios stay at or below one (constant 2 passes)."""
    rng = np.random.default_rng(spec.seed)
    tree = ScenarioTree.from_branching(spec.branching, _random_probs(rng, spec.branching))
    n, m = spec.n, spec.m

    maps = []
    for t in range(1, spec.stages + 1):
        maps.append([_friendly_stage_map(rng, spec, t, n * t) for _ in range(tree.n_at_stage(t))])
    operator = CausalOperator(tree, n, m, maps)

    # reference feasible policy, interior with margin
    ref = AdaptedVector(
        tree, "builtin",
        [rng.uniform(-0.8, 0.8, size=(tree.n_at_stage(t), n)) for t in range(1, spec.stages + 1)],
        copy=False)
    x_by_id = {}
    for t in range(1, spec.stages + 1):
        ids = tree.stage_ids(t)
        for pos, nid in enumerate(ids):
            lo = ref.stage(t)[pos] - spec.slack - 1.0
            hi = ref.stage(t)[pos] + spec.slack + 1.0
            if spec.set_family == "polyhedron" and t == 1:
                G = np.vstack([np.eye(n), -np.eye(n), rng.uniform(-0.4, 0.4, size=(1, n))])
                h = np.concatenate([hi, -lo, [float(G[-1] @ ref.stage(t)[pos]) + 1.0]])
                x_by_id[int(nid)] = Polyhedron(G, h)
            else:
                x_by_id[int(nid)] = Box(lo, hi)
    x_sets = SetFamily(tree, x_by_id)

    yref = operator.evaluate(ref)
    y_by_id = {}
    for t in range(1, spec.stages + 1):
        ids = tree.stage_ids(t)
        for pos, nid in enumerate(ids):
            center = yref.stage(t)[pos]
            if spec.recourse_friendly:
                # wide enough to absorb any decision history inside the X boxes
                margin = spec.slack + _history_margin(operator, x_sets, tree, t, pos, n)
            else:
                margin = spec.slack
            y_by_id[int(nid)] = Box(center - margin, center + margin)
    y_sets = SetFamily(tree, y_by_id)

    costs = [
        [QuadraticCost(np.eye(n), rng.uniform(-1.0, 1.0, size=n)) for _ in range(tree.n_scenarios)]
        for _ in range(spec.stages)
    ]
    if spec.objective_family == "expected":
        objective = ExpectedObjective(tree, costs)
    else:
        objective = CVaRObjective(tree, float(rng.uniform(0.3, 0.9)), costs)
    objective.lipschitz = _lipschitz_bound(objective, x_sets, tree, n, rng)

    inst = CausalInstance(
        tree=tree, operator=operator, x_sets=x_sets, y_sets=y_sets, objective=objective,
        cf=operator.certified_jacobian_bound(), l_phi=objective.lipschitz, recourse_c=2.0,
        name=spec.name or f"generated-{spec.seed}")
    return ProblemInstanceFile(instance=inst, policy=ref)


def _history_margin(operator, x_sets, tree, t, pos, n):
    """Worst-case output shift of the stage map over histories inside the X boxes,
    relative to any fixed history (interval arithmetic on the non-own-stage blocks)."""
    mp = operator.map_at(t, pos)
    if t == 1:
        return 0.5
    width = []
    for l in range(1, t):
        anc = int(tree.ancestor_positions(t, l)[pos])
        s = x_sets.at_stage(l)[anc]
        if isinstance(s, Box):
            width.append(np.where(np.isfinite(s.upper - s.lower), s.upper - s.lower, 4.0))
        else:
            width.append(np.full(s.dim, 4.0))
    w = np.concatenate(width + [np.zeros(n)])
    if isinstance(mp, AffineMap):
        return float((np.abs(mp.A) @ w).max()) if w.size else 0.5
    # smooth maps: bound the nonlinearity by its certified Jacobian norm times the width
    return float(mp.jacobian_bound() * np.linalg.norm(w)) + 0.5


def _lipschitz_bound(objective, x_sets, tree, n, rng):
    from .objectives import audit_lipschitz

    sampled = audit_lipschitz(objective, n, rng, samples=60, radius=3.0)
    return 2.0 * sampled + 1.0


def random_policy(tree, dim, mode, rng, radius=2.0):
    if mode == "builtin":
        vals = [rng.uniform(-radius, radius, size=(tree.n_at_stage(t), dim))
                for t in range(1, tree.stages + 1)]
    else:
        vals = [rng.uniform(-radius, radius, size=(tree.n_scenarios, dim))
                for _ in range(tree.stages)]
    return AdaptedVector(tree, mode, vals, copy=False)
