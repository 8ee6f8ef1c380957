"""Memory-based dependence analysis and schedule legality.

Dependences come in two forms.  Small domains are enumerated: every access
to a buffer is expanded into instance events, events touching the same cell
are ordered by original execution time, and each event is linked to its
nearest conflicting predecessor (last writer for reads and writes, next
writer for reads).  The full dependence relation is the transitive closure
of these links, so checking them is equivalent to checking all pairs.  When
all pairs of a group share one difference vector the dependence also carries
that distance.

Large domains are handled symbolically when both accesses use the same
injective subscript map, or when a single statement updates one cell along
a line of its domain (reductions); the dependence is then uniform by
construction and its instance pairs are materialized lazily.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .ir import ProgramIR
from .poly import AffineSet, dim_bounds, enumerate_array, is_empty_rational
from .transform import CompPlan, ScheduleState, resolve

DEFAULT_CAP = 100_000
LEGALITY_ENUM_CAP = 250_000


class DependenceError(Exception):
    pass


class DomainTooLarge(DependenceError):
    pass


@dataclass(eq=False)
class Dependence:
    src_comp: int
    dst_comp: int
    kind: str
    distance: tuple[int, ...] | None
    src_access: int = 0
    dst_access: int = 0
    src_points: np.ndarray | None = None
    dst_points: np.ndarray | None = None
    pair_set: AffineSet | None = None
    _count: int | None = field(default=None, repr=False)

    @property
    def uniform(self) -> bool:
        return self.distance is not None

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.src_points is None:
            src = enumerate_array(self.pair_set)
            self.src_points = src
            self.dst_points = src + np.asarray(self.distance, dtype=np.int64)
        return self.src_points, self.dst_points

    def pair_count(self) -> int:
        """Exact when materialized, otherwise a bounding-box estimate."""
        if self.src_points is not None:
            return int(self.src_points.shape[0])
        if self._count is None:
            n = 1
            for k in range(self.pair_set.num_iters):
                lo, hi = dim_bounds(self.pair_set, k)
                n *= max(0, hi - lo + 1)
            self._count = n
        return self._count

    def describe(self) -> str:
        form = f"UNIFORM{self.distance}" if self.uniform else f"ENUMERATED[{self.pair_count()}]"
        return f"{self.kind} S{self.src_comp}->S{self.dst_comp} {form}"


def _kind(src_write: bool, dst_write: bool) -> str:
    if src_write and dst_write:
        return "output"
    return "flow" if src_write else "anti"


def _identity_plans(p: ProgramIR) -> list[CompPlan]:
    return resolve(p, ScheduleState())


def compute_dependences(p: ProgramIR, b: Mapping[str, int] | None = None, cap: int = DEFAULT_CAP) -> list[Dependence]:
    binding = p.resolve_binding(b)
    plans = _identity_plans(p)
    deps: list[Dependence] = []
    for buf in p.buffers:
        accs = [(c.id, ai, a) for c in p.computations for ai, a in enumerate(c.accesses) if a.buffer_id == buf.id]
        if not any(a.is_write for _, _, a in accs):
            continue
        sizes = {ci: p.points(ci, binding).shape[0] for ci, _, _ in accs}
        if max(sizes.values()) <= cap:
            deps += _enumerated(p, binding, accs, plans)
        else:
            deps += _symbolic(p, binding, accs, plans, cap)
    return deps


def _enumerated(p, binding, accs, plans) -> list[Dependence]:
    width = max(pl.width for pl in plans)
    subs, times, isw, acc_of, inst = [], [], [], [], []
    for idx, (ci, ai, a) in enumerate(accs):
        c = p.computations[ci]
        pts = p.points(ci, binding)
        amap = a.bound(c.depth, p.symbols, binding)
        subs.append(pts @ amap[:, :-1].T + amap[:, -1])
        times.append(plans[ci].timestamps(pts, width))
        n = pts.shape[0]
        isw.append(np.full(n, a.is_write))
        acc_of.append(np.full(n, idx, dtype=np.int64))
        inst.append(np.arange(n, dtype=np.int64))
    sub = np.vstack(subs)
    if sub.shape[0] == 0:
        return []
    tt = np.vstack(times)
    isw_a = np.concatenate(isw)
    acc_a = np.concatenate(acc_of)
    inst_a = np.concatenate(inst)
    cell = np.unique(sub, axis=0, return_inverse=True)[1].reshape(-1)
    keys = [isw_a.astype(np.int64)] + [tt[:, k] for k in reversed(range(width))] + [cell]
    order = np.lexsort(keys)
    c, w, acc, ins = cell[order], isw_a[order], acc_a[order], inst_a[order]
    n = c.shape[0]
    idx = np.arange(n)
    new = np.r_[True, c[1:] != c[:-1]]
    starts = np.flatnonzero(new)
    seg = np.cumsum(new) - 1
    seg_first = starts[seg]
    seg_last = np.r_[starts[1:], n][seg] - 1

    wpos = np.where(w, idx, -1)
    prev_w = np.r_[-1, np.maximum.accumulate(wpos)[:-1]]
    has_prev = prev_w >= seg_first
    wpos2 = np.where(w, idx, n)
    next_w = np.r_[np.minimum.accumulate(wpos2[::-1])[::-1][1:], n]
    has_next = (next_w <= seg_last) & ~w
    comp_of_acc = np.array([ci for ci, _, _ in accs], dtype=np.int64)
    same_inst = np.zeros(n, dtype=bool)
    nw = np.minimum(next_w, n - 1)
    same_inst[has_next] = (comp_of_acc[acc[has_next]] == comp_of_acc[acc[nw[has_next]]]) & (ins[has_next] == ins[nw[has_next]])
    has_next &= ~same_inst

    src_ev = np.concatenate([prev_w[has_prev], idx[has_next]])
    dst_ev = np.concatenate([idx[has_prev], next_w[has_next]])
    if src_ev.size == 0:
        return []
    s_acc, d_acc = acc[src_ev], acc[dst_ev]
    s_ins, d_ins = ins[src_ev], ins[dst_ev]
    edges = np.unique(np.stack([s_acc, d_acc, s_ins, d_ins], axis=1), axis=0)
    out = []
    group_keys, group_idx = np.unique(edges[:, :2], axis=0, return_inverse=True)
    group_idx = group_idx.reshape(-1)
    for g, (sa, da) in enumerate(group_keys):
        rows = edges[group_idx == g]
        sci, sai, sacc = accs[sa]
        dci, dai, dacc = accs[da]
        sp = p.points(sci, binding)[rows[:, 2]]
        dp = p.points(dci, binding)[rows[:, 3]]
        dist = None
        if sp.shape[1] == dp.shape[1]:
            diff = dp - sp
            if (diff == diff[0]).all():
                dist = tuple(int(v) for v in diff[0])
        out.append(Dependence(sci, dci, _kind(sacc.is_write, dacc.is_write), dist, sai, dai, sp, dp))
    return out


def _solve_exact(f: np.ndarray, r: np.ndarray) -> tuple[int, ...] | None:
    """Unique integer solution of ``f d = r`` for full-column-rank ``f``."""
    rows, cols = f.shape
    aug = [[Fraction(int(v)) for v in f[i]] + [Fraction(int(r[i]))] for i in range(rows)]
    piv_row = 0
    pivots = []
    for col in range(cols):
        sel = next((i for i in range(piv_row, rows) if aug[i][col] != 0), None)
        if sel is None:
            return None
        aug[piv_row], aug[sel] = aug[sel], aug[piv_row]
        pv = aug[piv_row][col]
        aug[piv_row] = [v / pv for v in aug[piv_row]]
        for i in range(rows):
            if i != piv_row and aug[i][col] != 0:
                fac = aug[i][col]
                aug[i] = [a - fac * b for a, b in zip(aug[i], aug[piv_row])]
        pivots.append(col)
        piv_row += 1
    if any(aug[i][cols] != 0 for i in range(piv_row, rows)):
        return None
    sol = [aug[i][cols] for i in range(cols)]
    if any(v.denominator != 1 for v in sol):
        return None
    return tuple(int(v) for v in sol)


def _kernel_step(f: np.ndarray, depth: int) -> tuple[int, ...]:
    """Lexicographically positive primitive generator of the integer kernel
    of a rank ``depth - 1`` matrix."""
    rows = [[Fraction(int(v)) for v in r] for r in f]
    pivots = []
    r = 0
    for col in range(depth):
        sel = next((i for i in range(r, len(rows)) if rows[i][col] != 0), None)
        if sel is None:
            continue
        rows[r], rows[sel] = rows[sel], rows[r]
        pv = rows[r][col]
        rows[r] = [v / pv for v in rows[r]]
        for i in range(len(rows)):
            if i != r and rows[i][col] != 0:
                fac = rows[i][col]
                rows[i] = [a - fac * b for a, b in zip(rows[i], rows[r])]
        pivots.append(col)
        r += 1
    free = next(c for c in range(depth) if c not in pivots)
    vec = [Fraction(0)] * depth
    vec[free] = Fraction(1)
    for k, col in enumerate(pivots):
        vec[col] = -rows[k][free]
    scale = math.lcm(*[v.denominator for v in vec])
    ints = [int(v * scale) for v in vec]
    g = math.gcd(*ints)
    ints = [v // g for v in ints]
    if _lex_sign(ints) < 0:
        ints = [-v for v in ints]
    return tuple(ints)


def _lex_sign(v: Sequence[int]) -> int:
    for x in v:
        if x:
            return 1 if x > 0 else -1
    return 0


def _symbolic(p, binding, accs, plans, cap) -> list[Dependence]:
    out = []
    for i in range(len(accs)):
        for j in range(i, len(accs)):
            ci, ai, a1 = accs[i]
            cj, aj, a2 = accs[j]
            if not (a1.is_write or a2.is_write):
                continue
            c1, c2 = p.computations[ci], p.computations[cj]
            m1 = a1.bound(c1.depth, p.symbols, binding)
            m2 = a2.bound(c2.depth, p.symbols, binding)
            f1, f2 = m1[:, :-1], m2[:, :-1]
            too_large = DomainTooLarge(
                f"{c1.name}/{c2.name}: non-uniform accesses to {p.buffers[a1.buffer_id].name} over more than {cap} instances"
            )
            if c1.depth != c2.depth or not np.array_equal(f1, f2):
                raise too_large
            rank = np.linalg.matrix_rank(f1) if f1.size else 0
            if rank < c1.depth:
                # a single statement updating one cell along a line (a
                # reduction): consecutive instances on the line are chained
                if rank < c1.depth - 1 or ci != cj or not np.array_equal(m1[:, -1], m2[:, -1]):
                    raise too_large
                if i == j and not a1.is_write:
                    continue
                g = _kernel_step(f1, c1.depth)
                if i == j:
                    src_a, dst_a, sai, dai = a1, a1, ai, ai
                elif a1.is_write:
                    src_a, dst_a, sai, dai = a1, a2, ai, aj
                else:
                    src_a, dst_a, sai, dai = a2, a1, aj, ai
                dom = c1.domain.bind(binding)
                pair_set = dom.intersect(dom.translate([-v for v in g]))
                if not is_empty_rational(pair_set):
                    out.append(Dependence(ci, ci, _kind(src_a.is_write, dst_a.is_write), g, sai, dai, pair_set=pair_set))
                continue
            if i == j:
                continue  # injective map: an access never conflicts with itself
            delta = _solve_exact(f1, m1[:, -1] - m2[:, -1])
            if delta is None:
                continue
            pl1, pl2 = plans[ci], plans[cj]
            base = np.zeros((1, c1.depth), dtype=np.int64)
            d0 = pl2.timestamps(base + np.array(delta), max(pl1.width, pl2.width))[0] - pl1.timestamps(base, max(pl1.width, pl2.width))[0]
            sign = _lex_sign(d0.tolist())
            if sign == 0:
                continue
            if sign > 0:
                src, dst, sacc, dacc, sai, dai, dist = ci, cj, a1, a2, ai, aj, delta
            else:
                src, dst, sacc, dacc, sai, dai, dist = cj, ci, a2, a1, aj, ai, tuple(-v for v in delta)
            dsrc = p.computations[src].domain.bind(binding)
            ddst = p.computations[dst].domain.bind(binding)
            pair_set = dsrc.intersect(ddst.translate([-v for v in dist]))
            if is_empty_rational(pair_set):
                continue
            out.append(Dependence(src, dst, _kind(sacc.is_write, dacc.is_write), dist, sai, dai, pair_set=pair_set))
    return out


# -- legality ----------------------------------------------------------------

_INF = float("inf")


def _slot_ranges(dep: Dependence, ps: CompPlan, pd: CompPlan):
    """Per-slot range of ``ts_dst(x + d) - ts_src(x)`` for a uniform dep."""
    width = max(ps.width, pd.width)
    sl_s = list(ps.slots) + [("const", 0)] * (width - ps.width)
    sl_d = list(pd.slots) + [("const", 0)] * (width - pd.width)
    delta = np.asarray(dep.distance, dtype=np.int64)
    same_depth = ps.depth == pd.depth
    out = []
    for s, d in zip(sl_s, sl_d):
        if s[0] == "const" and d[0] == "const":
            v = d[1] - s[1]
            out.append((v, v))
            continue
        if s[0] != d[0] or s[0] == "const" or not same_depth or s[1:] != d[1:]:
            out.append((-_INF, _INF))
            continue
        m = s[1]
        if not np.array_equal(ps.matrix[m], pd.matrix[m]):
            out.append((-_INF, _INF))
            continue
        c = int(pd.matrix[m] @ delta + pd.offset[m] - ps.offset[m])
        if s[0] == "coord" or s[0] == "intra":
            out.append((c, c))
        else:
            f = s[2]
            out.append((c // f, -((-c) // f)))
    return out


def _analytic_verdict(dep, ps, pd, par_positions) -> tuple[bool, bool]:
    """(legal, proven).  A legal verdict is always a proof."""
    definite = True
    for i, (lo, hi) in enumerate(_slot_ranges(dep, ps, pd)):
        if lo == 0 and hi == 0:
            continue
        if i in par_positions:
            return False, definite and lo == hi
        if lo > 0:
            return True, True
        if hi < 0:
            return False, definite
        if lo < 0:
            return False, False
        definite = False
    return False, definite


def _par_positions(*plans: CompPlan) -> set[int]:
    return {pl.loop_position(pl.parallel) for pl in plans if pl.parallel is not None}


def dependence_respected(dep: Dependence, plans: Sequence[CompPlan]) -> bool:
    ps, pd = plans[dep.src_comp], plans[dep.dst_comp]
    par = _par_positions(ps, pd)
    if dep.uniform:
        legal, proven = _analytic_verdict(dep, ps, pd, par)
        if proven or dep.pair_count() > LEGALITY_ENUM_CAP:
            return legal
    src, dst = dep.pairs()
    if src.shape[0] == 0:
        return True
    width = max(ps.width, pd.width)
    diff = pd.timestamps(dst, width) - ps.timestamps(src, width)
    nz = diff != 0
    if not nz.any(axis=1).all():
        return False
    first = nz.argmax(axis=1)
    if (diff[np.arange(diff.shape[0]), first] < 0).any():
        return False
    if par and np.isin(first, list(par)).any():
        return False
    return True


def is_legal(deps: Sequence[Dependence], sched: ScheduleState, p: ProgramIR, b: Mapping[str, int] | None = None) -> bool:
    plans = resolve(p, sched)
    return all(dependence_respected(d, plans) for d in deps)


def carried_levels(deps: Sequence[Dependence], sched: ScheduleState, p: ProgramIR, comps: Sequence[int]) -> set[int]:
    """Loop levels (shared by ``comps``) that carry at least one dependence."""
    out = set()
    depth = min(p.computations[c].depth for c in comps)
    names = [p.computations[c].name for c in comps]
    for lvl in range(depth):
        try:
            s = sched.with_tags(names, parallel=lvl)
        except Exception:
            continue
        if not is_legal(deps, s, p):
            out.add(lvl)
    return out
