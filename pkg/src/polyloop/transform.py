"""Schedules: ordered affine actions plus once-only tags, and the execution
order they induce.

Every computation instance gets a timestamp vector
``[b0, l0, b1, l1, ..., l_{D-1}, b_D]`` where the ``b`` entries are static
positions in the (post-fusion) loop tree and the ``l`` entries are loop
coordinates after the affine map, with tiling turning a band of coordinates
into tile indices followed by intra-tile offsets.  Execution order is the
lexicographic order of timestamps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .poly import AffineSet, NonUnimodular, Unbounded, apply_unimodular, determinant, dim_bounds

TILE_FACTORS = (32, 64, 128)
UNROLL_FACTORS = (4, 8, 16)
ACTION_KINDS = ("interchange", "reversal", "skew2", "skew3", "shift")
IDENTITY_SIGNATURE = "identity"


class TransformError(Exception):
    pass


class LevelOutOfRange(TransformError):
    pass


class PointOutsideDomain(TransformError):
    pass


@dataclass(frozen=True)
class AffineAction:
    kind: str
    levels: tuple[int, ...]
    factors: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise TransformError(f"unknown action kind {self.kind!r}")
        n_levels = {"interchange": 2, "reversal": 1, "skew2": 2, "skew3": 3, "shift": 1}[self.kind]
        n_factors = {"interchange": 0, "reversal": 0, "skew2": 2, "skew3": 3, "shift": 1}[self.kind]
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        object.__setattr__(self, "factors", tuple(int(v) for v in self.factors))
        if len(self.levels) != n_levels or len(self.factors) != n_factors:
            raise TransformError(f"{self.kind} takes {n_levels} levels and {n_factors} factors")
        if len(set(self.levels)) != len(self.levels):
            raise TransformError(f"{self.kind}: repeated level")
        if self.kind in ("skew2", "skew3") and abs(self.factors[-1]) != 1:
            raise NonUnimodular(f"{self.kind}: last factor must be +/-1, got {self.factors[-1]}")

    @classmethod
    def interchange(cls, l1, l2):
        return cls("interchange", (l1, l2))

    @classmethod
    def reversal(cls, l):
        return cls("reversal", (l,))

    @classmethod
    def skew2(cls, l1, l2, f1, f2):
        return cls("skew2", (l1, l2), (f1, f2))

    @classmethod
    def skew3(cls, l1, l2, l3, f1, f2, f3):
        return cls("skew3", (l1, l2, l3), (f1, f2, f3))

    @classmethod
    def shift(cls, l, amount):
        return cls("shift", (l,), (amount,))

    def elementary(self, depth: int) -> tuple[np.ndarray, np.ndarray]:
        """``(E, o)`` such that the action maps ``y -> E y + o``."""
        if any(not 0 <= l < depth for l in self.levels):
            raise LevelOutOfRange(f"{self.kind}{self.levels} outside nest depth {depth}")
        e = np.eye(depth, dtype=np.int64)
        o = np.zeros(depth, dtype=np.int64)
        lv, f = self.levels, self.factors
        if self.kind == "interchange":
            a, b = lv
            e[[a, b]] = e[[b, a]]
        elif self.kind == "reversal":
            e[lv[0], lv[0]] = -1
        elif self.kind in ("skew2", "skew3"):
            # the last level becomes the hyperplane sum_k f_k * y_{levels[k]}
            tgt = lv[-1]
            e[tgt] = 0
            for l, fk in zip(lv, f):
                e[tgt, l] = fk
        else:
            o[lv[0]] = f[0]
        return e, o

    def to_json(self) -> dict:
        d: dict = {"kind": self.kind, "levels": list(self.levels)}
        if self.kind == "shift":
            d["amount"] = self.factors[0]
        elif self.factors:
            d["factors"] = list(self.factors)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "AffineAction":
        if d["kind"] == "shift":
            return cls("shift", tuple(d["levels"]), (d["amount"],))
        return cls(d["kind"], tuple(d["levels"]), tuple(d.get("factors", ())))


@dataclass(frozen=True)
class Tile:
    levels: tuple[int, ...]
    factors: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        object.__setattr__(self, "factors", tuple(int(v) for v in self.factors))
        lv = self.levels
        if not 1 <= len(lv) <= 3 or list(lv) != list(range(lv[0], lv[0] + len(lv))):
            raise TransformError(f"tiling needs 1 to 3 consecutive levels, got {lv}")
        if len(self.factors) != len(lv) or any(f not in TILE_FACTORS for f in self.factors):
            raise TransformError(f"tile factors must be drawn from {TILE_FACTORS}")


@dataclass(frozen=True)
class CompTags:
    parallel: int | None = None
    tile: Tile | None = None
    unroll: int | None = None

    def __post_init__(self):
        if self.unroll is not None and self.unroll not in UNROLL_FACTORS:
            raise TransformError(f"unroll factor must be one of {UNROLL_FACTORS}")

    def is_empty(self) -> bool:
        return self.parallel is None and self.tile is None and self.unroll is None

    def to_json(self) -> dict:
        d: dict = {}
        if self.parallel is not None:
            d["parallel"] = self.parallel
        if self.tile is not None:
            d["tile"] = {"levels": list(self.tile.levels), "factors": list(self.tile.factors)}
        if self.unroll is not None:
            d["unroll"] = {"factor": self.unroll}
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "CompTags":
        tile = d.get("tile")
        unroll = d.get("unroll")
        return cls(
            d.get("parallel"),
            Tile(tuple(tile["levels"]), tuple(tile["factors"])) if tile else None,
            unroll["factor"] if unroll else None,
        )


@dataclass(frozen=True)
class ScheduleState:
    """A schedule as a value.

    ``fusion`` maps a computation name to the depth at which its nest is joined
    with the preceding computation (overriding the original sharing depth).
    ``actions`` maps computation names to their ordered affine sequence.
    """
    fusion: Mapping[str, int] = field(default_factory=dict)
    actions: Mapping[str, tuple[AffineAction, ...]] = field(default_factory=dict)
    tags: Mapping[str, CompTags] = field(default_factory=dict)

    def is_identity(self) -> bool:
        return not self.fusion and not any(self.actions.values()) and all(t.is_empty() for t in self.tags.values())

    def seq(self, name: str) -> tuple[AffineAction, ...]:
        return tuple(self.actions.get(name, ()))

    def tag(self, name: str) -> CompTags:
        return self.tags.get(name, CompTags())

    def with_action(self, names: Sequence[str], action: AffineAction) -> "ScheduleState":
        acts = dict(self.actions)
        for n in names:
            acts[n] = tuple(acts.get(n, ())) + (action,)
        return replace(self, actions=acts)

    def with_fusion(self, joins: Mapping[str, int]) -> "ScheduleState":
        fus = dict(self.fusion)
        fus.update(joins)
        return replace(self, fusion=fus)

    def with_tags(self, names: Sequence[str], **kw) -> "ScheduleState":
        tags = dict(self.tags)
        for n in names:
            cur = tags.get(n, CompTags())
            for k in kw:
                if getattr(cur, k) is not None:
                    raise TransformError(f"{k} applied twice to {n}")
            tags[n] = replace(cur, **kw)
        return replace(self, tags=tags)

    def to_json(self) -> dict:
        return {
            "fusion": [{"comps": [k], "depth": v} for k, v in sorted(self.fusion.items())],
            "actions": {k: [a.to_json() for a in v] for k, v in sorted(self.actions.items()) if v},
            "tags": {k: t.to_json() for k, t in sorted(self.tags.items()) if not t.is_empty()},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ScheduleState":
        fusion = {}
        for g in d.get("fusion", []):
            for name in g["comps"]:
                fusion[name] = int(g["depth"])
        actions = {k: tuple(AffineAction.from_json(a) for a in v) for k, v in d.get("actions", {}).items()}
        tags = {k: CompTags.from_json(v) for k, v in d.get("tags", {}).items()}
        return cls(fusion, actions, tags)


def canonical_signature(sched: ScheduleState) -> str:
    sig = sched.__dict__.get("_signature")
    if sig is None:
        # schedules are values, so the signature is computed once per instance
        sig = IDENTITY_SIGNATURE if sched.is_identity() else json.dumps(sched.to_json(), sort_keys=True, separators=(",", ":"))
        object.__setattr__(sched, "_signature", sig)
    return sig


def compose_matrix(seq: Sequence[AffineAction], depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Product of the elementary maps in application order, plus the
    accumulated offset: ``y = M x + s``."""
    m = np.eye(depth, dtype=np.int64)
    s = np.zeros(depth, dtype=np.int64)
    for a in seq:
        e, o = a.elementary(depth)
        m = e @ m
        s = e @ s + o
    return m, s


# -- resolved per-computation plans -----------------------------------------

@dataclass(frozen=True)
class CompPlan:
    """Everything needed to timestamp one computation's instances."""
    comp: int
    depth: int
    matrix: np.ndarray
    offset: np.ndarray
    beta: tuple[int, ...]
    tile: Tile | None
    parallel: int | None
    unroll: int | None
    slots: tuple  # timestamp layout, see _slots()

    @property
    def width(self) -> int:
        return len(self.slots)

    def loop_position(self, level: int) -> int:
        """Timestamp index of the loop at ``level`` (outer tile loop when tiled)."""
        for i, s in enumerate(self.slots):
            if s[0] in ("coord", "tile") and s[1] == level:
                return i
        raise LevelOutOfRange(f"level {level} not in a depth-{self.depth} nest")

    def coords(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix.T + self.offset

    def timestamps(self, points: np.ndarray, width: int | None = None) -> np.ndarray:
        y = self.coords(points) if self.depth else np.zeros((points.shape[0], 0), dtype=np.int64)
        w = width or self.width
        out = np.zeros((points.shape[0], w), dtype=np.int64)
        for i, s in enumerate(self.slots):
            kind = s[0]
            if kind == "const":
                out[:, i] = s[1]
            elif kind == "coord":
                out[:, i] = y[:, s[1]]
            elif kind == "tile":
                out[:, i] = np.floor_divide(y[:, s[1]], s[2])
            else:
                out[:, i] = np.mod(y[:, s[1]], s[2])
        return out


def _slots(depth: int, beta: Sequence[int], tile: Tile | None) -> tuple:
    slots: list = []
    band = tile.levels if tile else ()
    l = 0
    while l < depth:
        if band and l == band[0]:
            slots.append(("const", beta[l]))
            for j, (lv, f) in enumerate(zip(band, tile.factors)):
                if j:
                    slots.append(("const", 0))
                slots.append(("tile", lv, f))
            for j, (lv, f) in enumerate(zip(band, tile.factors)):
                slots.append(("const", 0 if j == 0 else beta[lv]))
                slots.append(("intra", lv, f))
            l = band[-1] + 1
            continue
        slots.append(("const", beta[l]))
        slots.append(("coord", l))
        l += 1
    slots.append(("const", beta[depth]))
    return tuple(slots)


def effective_shared(p, sched: ScheduleState) -> list[int]:
    out = []
    for k, c in enumerate(p.computations):
        s = sched.fusion.get(c.name, c.shared_depth) if k else 0
        if k and s > min(c.depth, p.computations[k - 1].depth):
            raise TransformError(f"fusion depth {s} of {c.name} exceeds nest depth")
        out.append(int(s))
    return out


def betas(p, sched: ScheduleState) -> list[tuple[int, ...]]:
    shared = effective_shared(p, sched)
    out: list[tuple[int, ...]] = []
    for k, c in enumerate(p.computations):
        d = c.depth
        if k == 0:
            out.append(tuple([0] * (d + 1)))
            continue
        prev = out[-1]
        s = shared[k]
        cur = list(prev[:s]) + [prev[s] + 1] + [0] * (d - s)
        out.append(tuple(cur))
    return out


def resolve(p, sched: ScheduleState) -> list[CompPlan]:
    plans = []
    for c, beta in zip(p.computations, betas(p, sched)):
        m, s = compose_matrix(sched.seq(c.name), c.depth)
        t = sched.tag(c.name)
        if t.tile is not None and t.tile.levels[-1] >= c.depth:
            raise LevelOutOfRange(f"tile levels {t.tile.levels} outside depth {c.depth}")
        if t.parallel is not None and not 0 <= t.parallel < c.depth:
            raise LevelOutOfRange(f"parallel level {t.parallel} outside depth {c.depth}")
        if t.unroll is not None and c.depth == 0:
            raise LevelOutOfRange("cannot unroll a loop-free computation")
        plans.append(CompPlan(c.id, c.depth, m, s, beta, t.tile, t.parallel, t.unroll, _slots(c.depth, beta, t.tile)))
    return plans


def timestamp_width(plans: Sequence[CompPlan]) -> int:
    return max((pl.width for pl in plans), default=1)


def transformed_timestamp(p, sched: ScheduleState, comp: int, point: Sequence[int], binding=None) -> tuple[int, ...]:
    c = p.computations[comp]
    b = p.resolve_binding(binding)
    if not c.domain.contains(point, b):
        raise PointOutsideDomain(f"{tuple(point)} not in the domain of {c.name}")
    plan = resolve(p, sched)[comp]
    pt = np.array([point], dtype=np.int64).reshape(1, c.depth)
    return tuple(int(v) for v in plan.timestamps(pt)[0])


def is_unimodular(m) -> bool:
    return abs(determinant(np.asarray(m).tolist())) == 1


@lru_cache(maxsize=8192)
def _extents(rows: tuple, n: int, m: tuple, s: tuple) -> tuple[int, ...]:
    t = apply_unimodular(AffineSet(n, 0, rows), [list(r) for r in m]).translate(s)
    out = []
    for k in range(n):
        try:
            lo, hi = dim_bounds(t, k)
        except Unbounded:
            lo, hi = 0, -1
        out.append(max(0, hi - lo + 1))
    return tuple(out)


def loop_extents(p, sched: ScheduleState, comp: int, binding=None) -> tuple[int, ...]:
    """Extent of every transformed loop coordinate of a computation."""
    c = p.computations[comp]
    b = p.resolve_binding(binding)
    m, s = compose_matrix(sched.seq(c.name), c.depth)
    dom = c.domain.bind(b)
    return _extents(dom.rows, c.depth, tuple(map(tuple, m.tolist())), tuple(s.tolist()))
