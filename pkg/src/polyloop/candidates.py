"""Children of a search-tree node.

The tree is explored in a fixed sequence of levels::

    FUSION, AFFINE 1..n, then PARALLEL/TILE/UNROLL once per root nest

Root nests are counted on the original program; after fusion a nest index
past the current number of nests only yields the no-op child.  The no-op
child (same schedule, next level) is always first in the returned list.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dependence import Dependence, is_legal
from .ir import ProgramIR
from .transform import (
    TILE_FACTORS,
    UNROLL_FACTORS,
    AffineAction,
    ScheduleState,
    Tile,
    TransformError,
    canonical_signature,
    compose_matrix,
    effective_shared,
    loop_extents,
)

FUSION, AFFINE, PARALLEL, TILE, UNROLL, DONE = "FUSION", "AFFINE", "PARALLEL", "TILE", "UNROLL", "DONE"


class NoValidSkew(Exception):
    pass


@dataclass(frozen=True)
class GenConfig:
    affine_depth: int = 2
    skew_bound: int = 4
    skew_cap: int = 8
    shift_cap: int = 8
    adjacent_interchange_only: bool = False


@dataclass(frozen=True)
class SearchNode:
    sched: ScheduleState
    level: int  # index into level_sequence()
    parent: str | None = None

    @property
    def signature(self) -> str:
        return canonical_signature(self.sched)


def level_sequence(p: ProgramIR, affine_depth: int) -> list[tuple[str, int]]:
    levels = [(FUSION, 0)] + [(AFFINE, k) for k in range(1, affine_depth + 1)]
    for r in range(len(p.root_groups())):
        levels += [(PARALLEL, r), (TILE, r), (UNROLL, r)]
    return levels + [(DONE, 0)]


class CandidateGenerator:
    """Stateless child generation for one program and its dependences."""

    def __init__(self, p: ProgramIR, deps: Sequence[Dependence], b: Mapping[str, int] | None = None,
                 cfg: GenConfig | None = None):
        self.p = p
        self.deps = list(deps)
        self.binding = p.resolve_binding(b)
        self.cfg = cfg or GenConfig()
        self.levels = level_sequence(p, self.cfg.affine_depth)
        self._legal_cache: dict[str, bool] = {}
        self.illegal = 0

    # -- shared helpers -----------------------------------------------------

    def legal(self, sched: ScheduleState) -> bool:
        sig = canonical_signature(sched)
        v = self._legal_cache.get(sig)
        if v is None:
            try:
                v = is_legal(self.deps, sched, self.p, self.binding)
            except TransformError:
                v = False
            self._legal_cache[sig] = v
            self.illegal += not v
        return v

    def groups(self, sched: ScheduleState) -> list[list[int]]:
        return self.p.root_groups(effective_shared(self.p, sched))

    def band_depth(self, sched: ScheduleState, group: Sequence[int]) -> int:
        """Depth of the loops shared by every computation of a root nest."""
        shared = effective_shared(self.p, sched)
        d = min(self.p.computations[c].depth for c in group)
        for c in group[1:]:
            d = min(d, shared[c])
        return d

    def extent(self, sched: ScheduleState, comp: int, level: int) -> int:
        return loop_extents(self.p, sched, comp, self.binding)[level]

    def children(self, node: SearchNode) -> list[SearchNode]:
        kind, k = self.levels[node.level]
        if kind == DONE:
            return []
        sig = node.signature
        if kind == FUSION:
            scheds = self.gen_fusion(node.sched)
        elif kind == AFFINE:
            scheds = self.gen_affine(node.sched)
        else:
            scheds = self.gen_final(node.sched, kind, k)
        out = [SearchNode(node.sched, node.level + 1, sig)]
        seen = {sig}
        for s in scheds:
            cs = canonical_signature(s)
            if cs not in seen:
                seen.add(cs)
                out.append(SearchNode(s, node.level + 1, sig))
        return out

    # -- fusion -------------------------------------------------------------

    def _cross_distances(self, sched: ScheduleState, consumers: set[int]):
        out = []
        for d in self.deps:
            if d.dst_comp in consumers and d.src_comp not in consumers and d.uniform:
                out.append(d)
        return out

    def gen_fusion(self, sched: ScheduleState) -> list[ScheduleState]:
        p = self.p
        groups = p.root_groups()
        if len(groups) < 2:
            return []
        options = []
        for g in range(1, len(groups)):
            first = groups[g][0]
            prev = groups[g - 1][-1]
            maxd = min(p.computations[first].depth, p.computations[prev].depth)
            options.append([0] + list(range(1, maxd + 1)))
        out = []
        for combo in itertools.product(*options):
            if not any(combo):
                continue
            joins = {p.computations[groups[g + 1][0]].name: d for g, d in enumerate(combo) if d}
            cand = sched.with_fusion(joins)
            if self.legal(cand):
                out.append(cand)
                continue
            repaired = self._repair_with_shifts(cand, groups, combo)
            if repaired is not None and self.legal(repaired):
                out.append(repaired)
        return out

    def _repair_with_shifts(self, sched, groups, combo) -> ScheduleState | None:
        """Shift each fused consumer nest by the least amount making every
        cross-nest uniform distance non-negative on the fused levels."""
        p = self.p
        out = sched
        for g, d in enumerate(combo):
            if not d:
                continue
            consumers = set(groups[g + 1])
            deps = self._cross_distances(sched, consumers)
            names = [p.computations[c].name for c in groups[g + 1]]
            for lvl in range(d):
                need = max([0] + [-dep.distance[lvl] for dep in deps if len(dep.distance) > lvl])
                if need > self.cfg.shift_cap:
                    return None
                if need:
                    out = out.with_action(names, AffineAction.shift(lvl, need))
        return out if out is not sched else None

    # -- affine -------------------------------------------------------------

    def _group_distances(self, sched: ScheduleState, group: Sequence[int]):
        """Uniform distances within a nest, mapped through the current matrix."""
        members = set(group)
        out = []
        for d in self.deps:
            if d.src_comp in members and d.dst_comp in members and d.uniform:
                cs = self.p.computations[d.src_comp]
                cd = self.p.computations[d.dst_comp]
                ms, _ = compose_matrix(sched.seq(cs.name), cs.depth)
                md, _ = compose_matrix(sched.seq(cd.name), cd.depth)
                if np.array_equal(ms, md):
                    out.append(tuple(int(v) for v in ms @ np.array(d.distance)))
        return out

    def gen_affine(self, sched: ScheduleState) -> list[ScheduleState]:
        out = []
        for group in self.groups(sched):
            depth = min(self.p.computations[c].depth for c in group)
            if depth == 0:
                continue
            names = [self.p.computations[c].name for c in group]
            acts: list[AffineAction] = []
            for a, b in itertools.combinations(range(depth), 2):
                if not self.cfg.adjacent_interchange_only or b == a + 1:
                    acts.append(AffineAction.interchange(a, b))
            acts += [AffineAction.reversal(l) for l in range(depth)]
            dists = self._group_distances(sched, group)
            for width in (2, 3):
                for start in range(depth - width + 1):
                    levels = tuple(range(start, start + width))
                    try:
                        tuples = skew_params_from_distances(dists, levels, self.cfg.skew_bound, self.cfg.skew_cap)
                    except NoValidSkew:
                        continue
                    for f in tuples:
                        kind = "skew2" if width == 2 else "skew3"
                        acts.append(AffineAction(kind, levels, f))
            for act in acts:
                cand = sched.with_action(names, act)
                if self.legal(cand):
                    out.append(cand)
        return out

    # -- final levels -------------------------------------------------------

    def gen_final(self, sched: ScheduleState, kind: str, r: int) -> list[ScheduleState]:
        groups = self.groups(sched)
        if r >= len(groups):
            return []
        group = groups[r]
        comps = [c for c in group if self.p.computations[c].depth > 0]
        if not comps:
            return []
        names = [self.p.computations[c].name for c in comps]
        band = self.band_depth(sched, group)
        out = []
        try:
            if kind == PARALLEL:
                for lvl in range(band):
                    cand = sched.with_tags(names, parallel=lvl)
                    if self.legal(cand):
                        out.append(cand)
            elif kind == TILE:
                for width in (2, 3):
                    for start in range(band - width + 1):
                        levels = tuple(range(start, start + width))
                        for f in TILE_FACTORS:
                            if any(self.extent(sched, c, l) < f for c in comps for l in levels):
                                continue
                            cand = sched.with_tags(names, tile=Tile(levels, (f,) * width))
                            if self.legal(cand):
                                out.append(cand)
            elif kind == UNROLL:
                for f in UNROLL_FACTORS:
                    if any(self.extent(sched, c, self.p.computations[c].depth - 1) < f for c in comps):
                        continue
                    out.append(sched.with_tags(names, unroll=f))
        except TransformError:
            return []
        return out


# -- skewing factors ----------------------------------------------------------

def _carried_outside(d: Sequence[int], levels: Sequence[int]) -> bool:
    for v in d[: levels[0]]:
        if v:
            return v > 0
    return False


def skew_params_from_distances(dists: Sequence[Sequence[int]], levels: Sequence[int],
                               max_factor: int = 4, cap: int = 8) -> list[tuple[int, ...]]:
    """Skew factor tuples for ``levels``: the last level is replaced by the
    hyperplane ``f . y[levels]``, so the last factor is +/-1 (unimodular)."""
    k = len(levels)
    rel = [tuple(d[l] for l in levels) for d in dists if not _carried_outside(d, levels)]
    if not rel:
        return [(1,) * k]
    ranges = [range(1, max_factor + 1)] + [range(-max_factor, max_factor + 1)] * (k - 2) + [(1, -1)]
    cands = sorted(itertools.product(*ranges), key=lambda f: (sum(abs(x) for x in f), tuple(-x for x in f)))
    legal = [f for f in cands if math.gcd(*f) == 1 and all(np.dot(f, d) >= 0 for d in rel)]
    if not legal:
        raise NoValidSkew(f"no skew within factor bound {max_factor} on levels {tuple(levels)}")
    out = legal[:cap]
    strict = next((f for f in legal if all(np.dot(f, d) > 0 for d in rel)), None)
    if strict is not None and strict not in out:
        out[-1] = strict
    return out


def skew_params(deps: Sequence[Dependence], levels: Sequence[int], matrix=None,
                max_factor: int = 4, cap: int = 8) -> list[tuple[int, ...]]:
    """Skew factors legal against the uniform dependences in ``deps``."""
    dists = []
    for d in deps:
        if d.uniform:
            v = np.array(d.distance)
            dists.append(tuple(int(x) for x in (np.asarray(matrix) @ v if matrix is not None else v)))
    return skew_params_from_distances(dists, levels, max_factor, cap)
