"""Integer polyhedra: constraint sets, Fourier-Motzkin projection, lattice
enumeration and unimodular maps.

A constraint row ``r`` over ``(iters, syms, 1)`` means ``r . (x, s, 1) >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import gcd
from typing import Mapping, Sequence

import numpy as np

from ._jit import JIT_ENABLED, kernel

COEFF_LIMIT = 1 << 62


class PolyError(Exception):
    pass


class NonUnimodular(PolyError):
    pass


class Unbounded(PolyError):
    pass


class CoefficientOverflow(PolyError):
    pass


class UnboundSymbol(PolyError):
    pass


def _check(v: int) -> int:
    if v > COEFF_LIMIT or v < -COEFF_LIMIT:
        raise CoefficientOverflow(f"coefficient {v} exceeds +/-2^62")
    return v


def _row_gcd_normalize(row: tuple[int, ...]) -> tuple[int, ...] | None:
    """Divide by the gcd of the variable part, flooring the constant.

    Returns None for a trivially true row (all variable coefficients zero and
    a non-negative constant).
    """
    g = 0
    for a in row[:-1]:
        g = gcd(g, a)
    if g == 0:
        return None if row[-1] >= 0 else tuple([0] * (len(row) - 1) + [-1])
    if g == 1:
        return row
    return tuple(a // g for a in row[:-1]) + (row[-1] // g,)


@dataclass(frozen=True)
class AffineSet:
    num_iters: int
    num_syms: int
    rows: tuple[tuple[int, ...], ...]
    symbols: tuple[str, ...] = ()

    def __post_init__(self):
        width = self.num_iters + self.num_syms + 1
        rows = tuple(tuple(_check(int(v)) for v in r) for r in self.rows)
        for r in rows:
            if len(r) != width:
                raise ValueError(f"constraint row {r} has {len(r)} entries, expected {width}")
        if self.symbols and len(self.symbols) != self.num_syms:
            raise ValueError("symbol names do not match num_syms")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "symbols", tuple(self.symbols))

    @property
    def width(self) -> int:
        return self.num_iters + self.num_syms + 1

    @classmethod
    def box(cls, extents: Sequence[int]) -> "AffineSet":
        """``0 <= x_k < extents[k]`` for every k."""
        n = len(extents)
        rows = []
        for k, e in enumerate(extents):
            lo = [0] * (n + 1)
            lo[k] = 1
            hi = [0] * (n + 1)
            hi[k] = -1
            hi[-1] = e - 1
            rows += [tuple(lo), tuple(hi)]
        return cls(n, 0, tuple(rows))

    def bind(self, binding: Mapping[str, int] | None = None) -> "AffineSet":
        """Substitute symbol values into the constant column."""
        if self.num_syms == 0:
            return self
        binding = binding or {}
        if len(self.symbols) != self.num_syms:
            raise UnboundSymbol("set has anonymous symbols; cannot bind by name")
        try:
            vals = [int(binding[s]) for s in self.symbols]
        except KeyError as e:
            raise UnboundSymbol(f"symbol {e.args[0]!r} is not bound") from None
        n = self.num_iters
        rows = []
        for r in self.rows:
            c = r[-1] + sum(a * v for a, v in zip(r[n:-1], vals))
            rows.append(r[:n] + (_check(c),))
        return AffineSet(n, 0, tuple(rows))

    def contains(self, point: Sequence[int], binding: Mapping[str, int] | None = None) -> bool:
        s = self.bind(binding)
        pt = [int(v) for v in point]
        if len(pt) != s.num_iters:
            return False
        return all(sum(a * v for a, v in zip(r[:-1], pt)) + r[-1] >= 0 for r in s.rows)

    def intersect(self, other: "AffineSet") -> "AffineSet":
        if (self.num_iters, self.num_syms) != (other.num_iters, other.num_syms):
            raise ValueError("intersect: mismatched set signatures")
        return AffineSet(self.num_iters, self.num_syms, self.rows + other.rows, self.symbols or other.symbols)

    def translate(self, offset: Sequence[int]) -> "AffineSet":
        """Image of the set under ``x -> x + offset`` (iterators only)."""
        n = self.num_iters
        rows = []
        for r in self.rows:
            c = r[-1] - sum(a * o for a, o in zip(r[:n], offset))
            rows.append(r[:-1] + (c,))
        return AffineSet(n, self.num_syms, tuple(rows), self.symbols)

    def matrix(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.int64).reshape(len(self.rows), self.width)


# -- integer matrices --------------------------------------------------------

def determinant(m) -> int:
    """Exact determinant by Bareiss fraction-free elimination."""
    a = [[int(v) for v in row] for row in m]
    n = len(a)
    if any(len(row) != n for row in a):
        raise ValueError("determinant of a non-square matrix")
    if n == 0:
        return 1
    sign = 1
    prev = 1
    for k in range(n - 1):
        if a[k][k] == 0:
            for i in range(k + 1, n):
                if a[i][k] != 0:
                    a[k], a[i] = a[i], a[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * a[n - 1][n - 1]


def integer_inverse(m) -> list[list[int]]:
    """Inverse of a unimodular matrix, exact over the integers."""
    n = len(m)
    d = determinant(m)
    if abs(d) != 1:
        raise NonUnimodular(f"|det| = {abs(d)} != 1")
    aug = [[Fraction(int(v)) for v in row] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(m)]
    for col in range(n):
        piv = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[piv] = aug[piv], aug[col]
        p = aug[col][col]
        aug[col] = [v / p for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [a - f * b for a, b in zip(aug[r], aug[col])]
    out = []
    for row in aug:
        vals = row[n:]
        assert all(v.denominator == 1 for v in vals)
        out.append([int(v) for v in vals])
    return out


def apply_unimodular(s: AffineSet, m) -> AffineSet:
    """Image ``{m x | x in s}``, obtained by substituting ``x = m^-1 y``."""
    m = [[int(v) for v in row] for row in m]
    n = s.num_iters
    if len(m) != n:
        raise ValueError(f"matrix dimension {len(m)} != set iterators {n}")
    inv = integer_inverse(m)
    rows = []
    for r in s.rows:
        a = r[:n]
        new_a = tuple(_check(sum(a[k] * inv[k][j] for k in range(n))) for j in range(n))
        rows.append(new_a + r[n:])
    return AffineSet(n, s.num_syms, tuple(rows), s.symbols)


# -- Fourier-Motzkin ---------------------------------------------------------

def fm_project(s: AffineSet, dim: int) -> AffineSet:
    """Existentially eliminate iterator ``dim`` (rational shadow, integer-
    tightened per row)."""
    if not 0 <= dim < s.num_iters:
        raise ValueError(f"dim {dim} out of range for {s.num_iters} iterators")
    keep, pos, neg = [], [], []
    for r in s.rows:
        a = r[dim]
        (pos if a > 0 else neg if a < 0 else keep).append(r)
    out = [r[:dim] + r[dim + 1:] for r in keep]
    for p in pos:
        for q in neg:
            cp, cq = p[dim], -q[dim]
            comb = tuple(_check(cq * x + cp * y) for x, y in zip(p, q))
            out.append(comb[:dim] + comb[dim + 1:])
    seen, rows = set(), []
    for r in out:
        r = _row_gcd_normalize(r)
        if r is not None and r not in seen:
            seen.add(r)
            rows.append(r)
    return AffineSet(s.num_iters - 1, s.num_syms, tuple(rows), s.symbols)


def _infeasible_rows(s: AffineSet) -> bool:
    return any(all(a == 0 for a in r[:-1]) and r[-1] < 0 for r in s.rows)


def is_empty_rational(s: AffineSet, binding: Mapping[str, int] | None = None) -> bool:
    """True if the (bound) set has no rational point after integer tightening."""
    t = s.bind(binding)
    while t.num_iters:
        if _infeasible_rows(t):
            return True
        t = fm_project(t, t.num_iters - 1)
    return _infeasible_rows(t)


def _ceil_div(a: int, b: int) -> int:
    return -((-a) // b)


def dim_bounds(s: AffineSet, dim: int, binding: Mapping[str, int] | None = None) -> tuple[int, int]:
    """Integer-rounded bounds of iterator ``dim`` over the rational shadow."""
    t = s.bind(binding)
    # keep `dim` by eliminating every other iterator, highest index first
    for k in reversed(range(t.num_iters)):
        if k != dim:
            t = fm_project(t, k)
            if k < dim:
                dim -= 1
    lo, hi = None, None
    for r in t.rows:
        a, c = r[0], r[-1]
        if a > 0:
            v = _ceil_div(-c, a)
            lo = v if lo is None else max(lo, v)
        elif a < 0:
            v = c // (-a)
            hi = v if hi is None else min(hi, v)
        elif c < 0:
            return 0, -1
    if lo is None or hi is None:
        raise Unbounded(f"iterator {dim} has no finite {'lower' if lo is None else 'upper'} bound")
    return lo, hi


# -- enumeration -------------------------------------------------------------

@lru_cache(maxsize=4096)
def _level_bounds(rows: tuple[tuple[int, ...], ...], n: int):
    """Per-level lower/upper bound rows derived from innermost outward."""
    s = AffineSet(n, 0, rows)
    projections = [None] * n
    t = s
    for k in reversed(range(n)):
        projections[k] = t
        if k:
            t = fm_project(t, k)
    infeasible = _infeasible_rows(s)
    levels = []
    for k in range(n):
        lo_r, hi_r = [], []
        for r in projections[k].rows:
            a = r[k]
            if a > 0:
                lo_r.append(r)
            elif a < 0:
                hi_r.append(r)
            elif all(v == 0 for v in r[:-1]) and r[-1] < 0:
                infeasible = True
        if not lo_r or not hi_r:
            raise Unbounded(f"iterator {k} has no finite {'lower' if not lo_r else 'upper'} bound")

        def pack(rs):
            coef = np.array([r[:k] for r in rs], dtype=np.int64).reshape(len(rs), k)
            const = np.array([r[-1] for r in rs], dtype=np.int64)
            div = np.array([abs(r[k]) for r in rs], dtype=np.int64)
            return coef, const, div

        levels.append((pack(lo_r), pack(hi_r)))
    return infeasible, levels


@kernel(cache=True)
def _expand_level_jit(prefix, lo_coef, lo_const, lo_div, hi_coef, hi_const, hi_div):
    m, k = prefix.shape
    lo = np.empty(m, dtype=np.int64)
    cnt = np.empty(m, dtype=np.int64)
    total = 0
    for p in range(m):
        best_lo = -(1 << 62)
        for r in range(lo_coef.shape[0]):
            v = lo_const[r]
            for j in range(k):
                v += lo_coef[r, j] * prefix[p, j]
            # a*x + v >= 0  ->  x >= ceil(-v / a)
            b = -((v) // lo_div[r])
            if b > best_lo:
                best_lo = b
        best_hi = 1 << 62
        for r in range(hi_coef.shape[0]):
            v = hi_const[r]
            for j in range(k):
                v += hi_coef[r, j] * prefix[p, j]
            b = v // hi_div[r]
            if b < best_hi:
                best_hi = b
        c = best_hi - best_lo + 1
        if c < 0:
            c = 0
        lo[p] = best_lo
        cnt[p] = c
        total += c
    out = np.empty((total, k + 1), dtype=np.int64)
    t = 0
    for p in range(m):
        for q in range(cnt[p]):
            for j in range(k):
                out[t, j] = prefix[p, j]
            out[t, k] = lo[p] + q
            t += 1
    return out


def _expand_level_np(prefix, lo_coef, lo_const, lo_div, hi_coef, hi_const, hi_div):
    m, k = prefix.shape
    v_lo = prefix @ lo_coef.T + lo_const
    lo = (-(v_lo // lo_div)).max(axis=1)
    v_hi = prefix @ hi_coef.T + hi_const
    hi = (v_hi // hi_div).min(axis=1)
    cnt = np.clip(hi - lo + 1, 0, None)
    total = int(cnt.sum())
    starts = np.cumsum(cnt) - cnt
    out = np.empty((total, k + 1), dtype=np.int64)
    out[:, :k] = np.repeat(prefix, cnt, axis=0)
    out[:, k] = np.repeat(lo - starts, cnt) + np.arange(total, dtype=np.int64)
    return out


_expand_level = _expand_level_jit if JIT_ENABLED else _expand_level_np


def enumerate_array(s: AffineSet, binding: Mapping[str, int] | None = None, *, backend: str | None = None) -> np.ndarray:
    """All integer points of ``s`` as an ``(n_points, num_iters)`` int64 array
    in lexicographic order."""
    t = s.bind(binding)
    n = t.num_iters
    infeasible, levels = _level_bounds(t.rows, n)
    if infeasible:
        return np.zeros((0, n), dtype=np.int64)
    expand = _expand_level
    if backend == "numpy":
        expand = _expand_level_np
    elif backend == "numba":
        expand = _expand_level_jit
    pts = np.zeros((1, 0), dtype=np.int64)
    for (lo, hi) in levels:
        pts = expand(pts, lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        if pts.shape[0] == 0:
            return np.zeros((0, n), dtype=np.int64)
    return pts


def enumerate_points(s: AffineSet, binding: Mapping[str, int] | None = None) -> list[tuple[int, ...]]:
    """Lexicographically ordered list of the integer points of ``s``."""
    return [tuple(int(v) for v in row) for row in enumerate_array(s, binding)]


def count_points(s: AffineSet, binding: Mapping[str, int] | None = None) -> int:
    return int(enumerate_array(s, binding).shape[0])
