"""Tree-of-loops input representation for the cost model.

Program features (expression tokens, access matrices, iteration domain rows)
describe the untransformed program; transformation features (the ordered
affine action vectors and the once-only tags) describe the schedule.  The
tree follows the loop hierarchy after fusion, with computations at leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ir import OPS, ProgramIR, post_order_ops
from .transform import ACTION_KINDS, ScheduleState, effective_shared, loop_extents, resolve

MAX_DEPTH = 5
MAX_ACCESSES = 16
MAX_EXPR = 64
MAX_ACTIONS = 8
MAX_DOMAIN_ROWS = 2 * MAX_DEPTH + 4

TOKEN_WIDTH = len(OPS) + 1          # op one-hot plus constant value
ACCESS_WIDTH = 2 + MAX_DEPTH * (MAX_DEPTH + 1)
TRANS_WIDTH = len(ACTION_KINDS) + 3 + 3 + 1
TAGS_WIDTH = 13
LOOP_WIDTH = 8


class LimitExceeded(Exception):
    pass


@dataclass
class CompFeatures:
    name: str
    depth: int
    expr_tokens: list[list[float]]
    access_mats: list[list[float]]
    domain_vec: list[int]
    domain_shape: tuple[int, int]
    trans_vectors: list[list[float]]
    tags_vec: list[float]

    def padded(self) -> dict[str, np.ndarray]:
        """Zero-padded arrays plus validity masks, for the model."""
        acc = np.zeros((MAX_ACCESSES, ACCESS_WIDTH))
        acc_mask = np.zeros(MAX_ACCESSES)
        if self.access_mats:
            acc[: len(self.access_mats)] = self.access_mats
            acc_mask[: len(self.access_mats)] = 1
        dom = np.zeros((MAX_DOMAIN_ROWS, MAX_DEPTH + 1))
        rows, cols = self.domain_shape
        if rows:
            m = np.asarray(self.domain_vec, dtype=np.float64).reshape(rows, cols)
            dom[:rows, : cols - 1] = m[:, :-1]
            dom[:rows, -1] = m[:, -1]
        dom_mask = np.zeros(MAX_DOMAIN_ROWS)
        dom_mask[:rows] = 1
        return {"access": acc, "access_mask": acc_mask, "domain": dom, "domain_mask": dom_mask}

    def to_json(self) -> dict:
        return {
            "name": self.name, "depth": self.depth, "expr_tokens": self.expr_tokens,
            "access_mats": self.access_mats, "domain_vec": self.domain_vec,
            "domain_shape": list(self.domain_shape), "trans_vectors": self.trans_vectors,
            "tags_vec": self.tags_vec,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "CompFeatures":
        return cls(d["name"], d["depth"], d["expr_tokens"], d["access_mats"], d["domain_vec"],
                   tuple(d["domain_shape"]), d["trans_vectors"], d["tags_vec"])


@dataclass
class LoopFeatureNode:
    features: list[float]
    loops: list["LoopFeatureNode"] = field(default_factory=list)
    comps: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"features": self.features, "loops": [l.to_json() for l in self.loops], "comps": self.comps}

    @classmethod
    def from_json(cls, d: Mapping) -> "LoopFeatureNode":
        return cls(d["features"], [cls.from_json(x) for x in d["loops"]], list(d["comps"]))

    def shape_key(self) -> tuple:
        return (tuple(l.shape_key() for l in self.loops), len(self.comps))


@dataclass
class FeatureTree:
    comps: list[CompFeatures]
    roots: list  # LoopFeatureNode or int (a loop-free computation)

    def to_json(self) -> dict:
        return {
            "comps": [c.to_json() for c in self.comps],
            "roots": [r.to_json() if isinstance(r, LoopFeatureNode) else r for r in self.roots],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "FeatureTree":
        return cls([CompFeatures.from_json(c) for c in d["comps"]],
                   [r if isinstance(r, int) else LoopFeatureNode.from_json(r) for r in d["roots"]])

    def shape_key(self) -> tuple:
        return tuple(r.shape_key() if isinstance(r, LoopFeatureNode) else -1 for r in self.roots)

    def has_transformations(self) -> bool:
        if any(c.trans_vectors or any(c.tags_vec) for c in self.comps):
            return True

        def walk(n: LoopFeatureNode) -> bool:
            f = n.features
            return bool(f[2] or f[3] or f[6]) or any(walk(l) for l in n.loops)

        return any(walk(r) for r in self.roots if isinstance(r, LoopFeatureNode))


def _token(e_op: str, value: float | None) -> list[float]:
    v = [0.0] * TOKEN_WIDTH
    v[OPS.index(e_op)] = 1.0
    if e_op == "constant":
        v[-1] = float(value)
    return v


def _expr_tokens(expr) -> list[list[float]]:
    out: list[list[float]] = []

    def walk(n):
        for c in n.children:
            walk(c)
        out.append(_token(n.op, n.value))

    walk(expr)
    return out


def trans_vector(action) -> list[float]:
    v = [0.0] * TRANS_WIDTH
    v[ACTION_KINDS.index(action.kind)] = 1.0
    base = len(ACTION_KINDS)
    for k, l in enumerate(action.levels):
        v[base + k] = float(l + 1)
    if action.kind == "shift":
        v[-1] = float(action.factors[0])
    else:
        for k, f in enumerate(action.factors):
            v[base + 3 + k] = float(f)
    return v


def tags_vector(sched: ScheduleState, name: str) -> list[float]:
    t = sched.tag(name)
    v = [0.0] * TAGS_WIDTH
    if t.parallel is not None:
        v[0], v[1] = 1.0, float(t.parallel + 1)
    if t.tile is not None:
        v[2] = 1.0
        for k, (l, f) in enumerate(zip(t.tile.levels, t.tile.factors)):
            v[3 + k] = float(l + 1)
            v[6 + k] = float(f)
    if t.unroll is not None:
        v[9], v[10] = 1.0, float(t.unroll)
    if name in sched.fusion:
        v[11], v[12] = 1.0, float(sched.fusion[name])
    return v


def featurize(p: ProgramIR, sched: ScheduleState, b: Mapping[str, int] | None = None) -> FeatureTree:
    binding = p.resolve_binding(b)
    comps = []
    for c in p.computations:
        if c.depth > MAX_DEPTH:
            raise LimitExceeded(f"{c.name}: depth {c.depth} exceeds maximum depth {MAX_DEPTH}")
        if len(c.accesses) > MAX_ACCESSES:
            raise LimitExceeded(f"{c.name}: {len(c.accesses)} accesses exceed maximum {MAX_ACCESSES}")
        ntok = len(post_order_ops(c.expr))
        if ntok > MAX_EXPR:
            raise LimitExceeded(f"{c.name}: {ntok} expression tokens exceed maximum {MAX_EXPR}")
        seq = sched.seq(c.name)
        if len(seq) > MAX_ACTIONS:
            raise LimitExceeded(f"{c.name}: {len(seq)} affine actions exceed maximum {MAX_ACTIONS}")
        dom = c.domain.bind(binding)
        if len(dom.rows) > MAX_DOMAIN_ROWS:
            raise LimitExceeded(f"{c.name}: {len(dom.rows)} domain rows exceed maximum {MAX_DOMAIN_ROWS}")
        accs = []
        for a in c.accesses:
            m = a.bound(c.depth, p.symbols, binding)
            if m.shape[0] > MAX_DEPTH:
                raise LimitExceeded(f"{c.name}: buffer rank {m.shape[0]} exceeds maximum {MAX_DEPTH}")
            pad = np.zeros((MAX_DEPTH, MAX_DEPTH + 1))
            pad[: m.shape[0], : c.depth] = m[:, :-1]
            pad[: m.shape[0], -1] = m[:, -1]
            accs.append([float(a.buffer_id), float(a.is_write)] + pad.ravel().tolist())
        comps.append(CompFeatures(
            c.name, c.depth, _expr_tokens(c.expr), accs,
            [int(v) for r in dom.rows for v in r], (len(dom.rows), c.depth + 1),
            [trans_vector(a) for a in seq], tags_vector(sched, c.name),
        ))
    return FeatureTree(comps, _loop_tree(p, sched, binding))


def _loop_tree(p: ProgramIR, sched: ScheduleState, binding) -> list:
    plans = resolve(p, sched)
    shared = effective_shared(p, sched)
    extents = [loop_extents(p, sched, c.id, binding) for c in p.computations]
    roots: list = []
    stack: list[LoopFeatureNode] = []
    for k, c in enumerate(p.computations):
        s = shared[k] if k else 0
        del stack[s:]
        for lvl in range(s, c.depth):
            node = LoopFeatureNode([0.0] * LOOP_WIDTH)
            (stack[-1].loops if stack else roots).append(node)
            stack.append(node)
        if c.depth == 0:
            roots.append(k)
        else:
            stack[c.depth - 1].comps.append(k)
        pl = plans[k]
        for lvl in range(c.depth):
            f = stack[lvl].features
            f[0] = max(f[0], float(extents[k][lvl]))
            f[1] = float(lvl)
            if pl.parallel == lvl:
                f[2] = 1.0
            if pl.tile is not None and lvl in pl.tile.levels:
                fac = pl.tile.factors[pl.tile.levels.index(lvl)]
                f[3], f[4] = 1.0, float(fac)
                f[5] = max(f[5], float(-(-extents[k][lvl] // fac)))
            if pl.unroll is not None and lvl == c.depth - 1:
                f[6], f[7] = 1.0, float(pl.unroll)
        del stack[c.depth:]
    return roots
