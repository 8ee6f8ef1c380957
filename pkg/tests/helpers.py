"""Shared fixtures, random generators and brute-force oracles for the tests.

The oracles here deliberately avoid the dependence module: dependent pairs
are found by scanning every pair of instances touching the same cell.
"""
from __future__ import annotations

import json

import numpy as np

from polyloop.poly import AffineSet
from polyloop.ir import ParseError, ValidationError, program_from_dict
from polyloop.transform import TILE_FACTORS, UNROLL_FACTORS, AffineAction, ScheduleState, Tile, resolve


def prog(doc) -> "ProgramIR":
    return program_from_dict(doc)


def chain(n=8):
    """A[i+1] = A[i] + 1 over 0 <= i < n (A read at i-1 relative to the write)."""
    return prog({"symbols": [], "buffers": [{"name": "A", "dims": [n + 1]}], "computations": [{
        "name": "S0", "iterators": ["i"], "domain": [[1, 0], [-1, n - 1]],
        "write": {"buffer": "A", "map": [[1, 1]]},
        "expr": {"op": "add", "args": [{"op": "load", "buffer": "A", "map": [[1, 0]]}, {"op": "constant", "value": 1}]}}]})


def jacobi(t=8, n=10):
    """A[t][i] = A[t-1][i-1] + A[t-1][i+1] over 1 <= t < T, 1 <= i < N-1."""
    return prog({"symbols": [], "buffers": [{"name": "A", "dims": [t, n]}], "computations": [{
        "name": "S0", "iterators": ["t", "i"],
        "domain": [[1, 0, -1], [-1, 0, t - 1], [0, 1, -1], [0, -1, n - 2]],
        "write": {"buffer": "A", "map": [[1, 0, 0], [0, 1, 0]]},
        "expr": {"op": "add", "args": [
            {"op": "load", "buffer": "A", "map": [[1, 0, -1], [0, 1, -1]]},
            {"op": "load", "buffer": "A", "map": [[1, 0, -1], [0, 1, 1]]}]}}]})


TRIANGULAR_DOC = {
    "symbols": [{"name": "N", "value": 4}],
    "buffers": [{"name": "A", "dims": ["N", "N"]}],
    "computations": [{
        "name": "S0", "iterators": ["i", "j"],
        # i >= 0, N-1-i >= 0, j >= 0, i-1-j >= 0  (columns: i, j, N, 1)
        "domain": [[1, 0, 0, 0], [-1, 0, 1, -1], [0, 1, 0, 0], [1, -1, 0, -1]],
        "write": {"buffer": "A", "map": [[1, 0, 0, 0], [0, 1, 0, 0]]},
        "expr": {"op": "constant", "value": 1.0}}]}


def triangular(n=4):
    doc = json.loads(json.dumps(TRIANGULAR_DOC))
    doc["symbols"][0]["value"] = n
    return prog(doc)


def pointwise2(n=8, m=8, shared=0):
    """Two 2-deep nests: B = A * 2, then C = B + 1 (producer/consumer)."""
    box = [[1, 0, 0], [-1, 0, n - 1], [0, 1, 0], [0, -1, m - 1]]
    ident = [[1, 0, 0], [0, 1, 0]]
    return prog({"symbols": [], "buffers": [{"name": "A", "dims": [n, m]}, {"name": "B", "dims": [n, m]},
                                            {"name": "C", "dims": [n, m]}],
                 "computations": [
                     {"name": "S0", "iterators": ["i", "j"], "domain": box, "write": {"buffer": "B", "map": ident},
                      "expr": {"op": "mul", "args": [{"op": "load", "buffer": "A", "map": ident}, {"op": "constant", "value": 2}]}},
                     {"name": "S1", "iterators": ["i", "j"], "domain": box, "write": {"buffer": "C", "map": ident},
                      "shared_depth": shared,
                      "expr": {"op": "add", "args": [{"op": "load", "buffer": "B", "map": ident}, {"op": "constant", "value": 1}]}}]})


# -- random programs ---------------------------------------------------------------

BUF_DIM = 16


def _subscript(rng, d):
    """One subscript row of an access: an iterator (or a sum of two) plus a
    small offset.  Iterators range over [1, 6], so values stay in [0, 14]."""
    row = [0] * (d + 1)
    if d and rng.random() < 0.85:
        row[int(rng.integers(d))] += 1
        if d > 1 and rng.random() < 0.15:
            row[int(rng.integers(d))] += 1
            row[d] = int(rng.integers(-2, 1))
            return row
    row[d] = int(rng.integers(-1, 2)) + (0 if any(row[:d]) else 2)
    return row


def random_program_doc(rng, max_instances=4096, max_comps=3, max_depth=3, max_extent=6):
    nb = int(rng.integers(1, 4))
    ranks = [int(rng.integers(0, 3)) for _ in range(nb)]
    buffers = [{"name": f"B{k}", "dims": [BUF_DIM] * r} for k, r in enumerate(ranks)]
    comps = []
    total = 0
    prev_depth = None
    for c in range(int(rng.integers(1, max_comps + 1))):
        d = int(rng.integers(0, max_depth + 1))
        ext = [int(rng.integers(2, max_extent + 1)) for _ in range(d)]
        size = int(np.prod(ext)) if d else 1
        if total + size > max_instances:
            break
        total += size
        dom = []
        for l, e in enumerate(ext):
            r = [0] * (d + 1)
            r[l], r[d] = 1, -1
            dom.append(r)
            r = [0] * (d + 1)
            r[l], r[d] = -1, e
            dom.append(r)
        if d >= 2 and rng.random() < 0.25:
            # triangular: x_1 <= x_0
            r = [0] * (d + 1)
            r[0], r[1] = 1, -1
            dom.append(r)

        def access(buf, d=d):
            return {"buffer": buffers[buf]["name"], "map": [_subscript(rng, d) for _ in range(ranks[buf])]}

        def expr(depth=0):
            if depth >= 2 or rng.random() < 0.35:
                if rng.random() < 0.2:
                    return {"op": "constant", "value": float(round(rng.uniform(0.5, 1.5), 3))}
                return {"op": "load", **access(int(rng.integers(nb)))}
            op = ["add", "mul", "sub", "max", "min", "add"][int(rng.integers(6))]
            return {"op": op, "args": [expr(depth + 1), expr(depth + 1)]}

        wb = int(rng.integers(nb))
        entry = {"name": f"S{c}", "iterators": [f"x{l}" for l in range(d)], "domain": dom,
                 "write": access(wb), "expr": expr()}
        if rng.random() < 0.3:
            entry["expr"] = {"op": "add", "args": [{"op": "load", **entry["write"]}, entry["expr"]]}
        if prev_depth is not None and d and prev_depth and rng.random() < 0.3:
            entry["shared_depth"] = int(rng.integers(1, min(d, prev_depth) + 1))
        prev_depth = d
        comps.append(entry)
    if not comps:
        comps.append({"name": "S0", "iterators": [], "domain": [], "write": {"buffer": "B0", "map": [[2]] * ranks[0]},
                      "expr": {"op": "constant", "value": 1.0}})
    return {"name": "rand", "symbols": [], "buffers": buffers, "computations": comps}


def random_program(rng, **kw):
    while True:
        try:
            return prog(random_program_doc(rng, **kw))
        except (ParseError, ValidationError):
            continue


def random_action(rng, depth):
    kinds = ["interchange", "reversal", "skew2", "skew3", "shift"]
    while True:
        k = kinds[int(rng.integers(len(kinds)))]
        if k == "interchange" and depth >= 2:
            a, b = sorted(rng.choice(depth, 2, replace=False).tolist())
            return AffineAction.interchange(a, b)
        if k == "reversal" and depth >= 1:
            return AffineAction.reversal(int(rng.integers(depth)))
        if k == "skew2" and depth >= 2:
            l = int(rng.integers(depth - 1))
            return AffineAction.skew2(l, l + 1, int(rng.integers(1, 4)), int(rng.choice([-1, 1])))
        if k == "skew3" and depth >= 3:
            l = int(rng.integers(depth - 2))
            return AffineAction.skew3(l, l + 1, l + 2, int(rng.integers(1, 3)), int(rng.integers(-2, 3)),
                                      int(rng.choice([-1, 1])))
        if k == "shift" and depth >= 1:
            return AffineAction.shift(int(rng.integers(depth)), int(rng.integers(-2, 3)))
        if depth == 0:
            return None


def random_schedule(rng, p, max_actions=3):
    s = ScheduleState()
    comps = p.computations
    joins = {}
    for k in range(1, len(comps)):
        lim = min(comps[k].depth, comps[k - 1].depth)
        if lim and rng.random() < 0.3:
            joins[comps[k].name] = int(rng.integers(0, lim + 1))
    if joins:
        s = s.with_fusion(joins)
    for c in comps:
        for _ in range(int(rng.integers(0, max_actions + 1))):
            a = random_action(rng, c.depth)
            if a is not None:
                s = s.with_action([c.name], a)
        kw = {}
        if c.depth and rng.random() < 0.4:
            kw["parallel"] = int(rng.integers(c.depth))
        if c.depth and rng.random() < 0.2:
            n = int(rng.integers(1, min(3, c.depth) + 1))
            l0 = int(rng.integers(0, c.depth - n + 1))
            kw["tile"] = Tile(tuple(range(l0, l0 + n)), tuple(int(rng.choice(TILE_FACTORS)) for _ in range(n)))
        if c.depth and rng.random() < 0.2:
            kw["unroll"] = int(rng.choice(UNROLL_FACTORS))
        if kw:
            s = s.with_tags([c.name], **kw)
    return s


# -- brute-force oracles -------------------------------------------------------------

def _cells(p, comp, pts, acc):
    m = np.asarray(acc.bound(comp.depth, p.symbols, p.resolve_binding(None)), dtype=np.int64)
    if pts.shape[0] == 0:
        return np.zeros((0, m.shape[0]), dtype=np.int64)
    return pts @ m[:, :-1].T + m[:, -1]


def original_keys(p):
    """Original execution-order key layout per computation, rebuilt from the
    loop sharing: [b0, x0, b1, x1, ..., b_d] with b the sibling position."""
    counters = [0] * 16
    prev = None
    out = []
    for k, c in enumerate(p.computations):
        s = c.shared_depth if k else 0
        if prev is not None:
            s = min(s, prev[0], c.depth)
        beta = list(prev[1][:s]) if prev is not None else []
        counters[s] += 1
        for l in range(s + 1, len(counters)):
            counters[l] = 0
        beta.append(counters[s])
        beta += [0] * (c.depth - s)
        out.append(beta)
        prev = (c.depth, beta)
    return out


def _events(p):
    """Per accessed cell: arrays of (comp, point, is_write) events."""
    betas = original_keys(p)
    dmax = max((c.depth for c in p.computations), default=0)
    width = 2 * dmax + 1
    rows = []
    for c in p.computations:
        pts = p.points(c.id)
        key = np.zeros((pts.shape[0], width), dtype=np.int64)
        for l in range(c.depth):
            key[:, 2 * l] = betas[c.id][l]
            key[:, 2 * l + 1] = pts[:, l]
        key[:, 2 * c.depth] = betas[c.id][c.depth]
        for acc in c.accesses:
            cells = _cells(p, c, pts, acc)
            for i in range(pts.shape[0]):
                rows.append(((acc.buffer_id,) + tuple(int(v) for v in cells[i]), c.id, i, acc.is_write, key[i]))
    groups = {}
    for cell, comp, inst, w, key in rows:
        groups.setdefault(cell, []).append((comp, inst, w, key))
    return groups


def oracle_legal(p, sched) -> bool:
    """Brute force: every pair of instances touching one cell (one of them
    writing), ordered by original execution, must keep its order under the
    schedule, and must not be split across iterations of a parallel loop."""
    plans = resolve(p, sched)
    width = max(pl.width for pl in plans)
    par = np.array([pl.loop_position(pl.parallel) if pl.parallel is not None else -1 for pl in plans])
    ts_all = [pl.timestamps(p.points(c.id), width) for pl, c in zip(plans, p.computations)]
    for evs in _events(p).values():
        if len(evs) < 2:
            continue
        comp = np.array([e[0] for e in evs])
        inst = np.array([e[1] for e in evs])
        w = np.array([e[2] for e in evs])
        if not w.any():
            continue
        key = np.stack([e[3] for e in evs])
        order = np.lexsort(key.T[::-1])
        comp, inst, w, key = comp[order], inst[order], w[order], key[order]
        ts = np.stack([ts_all[c][i] for c, i in zip(comp, inst)])
        n = len(evs)
        for i in range(n - 1):
            j = np.arange(i + 1, n)
            same = (comp[j] == comp[i]) & (inst[j] == inst[i])
            sel = j[(w[i] | w[j]) & ~same]
            if sel.size == 0:
                continue
            d = ts[sel] - ts[i]
            nz = d != 0
            if not nz.any(axis=1).all():
                return False
            first = nz.argmax(axis=1)
            if (d[np.arange(sel.size), first] < 0).any():
                return False
            if ((first == par[comp[i]]) | (first == par[comp[sel]])).any():
                return False
    return True


def brute_points(rows, n, lo=-13, hi=13):
    """Lattice scan of {x : rows . (x, 1) >= 0} over a box of candidate values."""
    import itertools

    r = np.asarray(rows, dtype=np.int64).reshape(-1, n + 1)
    out = []
    for x in itertools.product(range(lo, hi + 1), repeat=n):
        v = np.r_[np.array(x, dtype=np.int64), 1]
        if (r @ v >= 0).all():
            out.append(tuple(x))
    return out


def replay_reachable(p, target, deps, affine_depth=3, gen_cfg=None) -> bool:
    """Walk the candidate tree from the root, following only children that
    agree with ``target`` so far, until ``target`` itself is reached."""
    from dataclasses import replace

    from polyloop.candidates import CandidateGenerator, GenConfig, SearchNode
    from polyloop.transform import canonical_signature

    gen = CandidateGenerator(p, deps, cfg=replace(gen_cfg or GenConfig(), affine_depth=affine_depth))
    goal = canonical_signature(target)

    def compatible(s):
        if any(target.fusion.get(k) != v for k, v in s.fusion.items()):
            return False
        for c in p.computations:
            seq, full = s.seq(c.name), target.seq(c.name)
            if full[: len(seq)] != seq:
                return False
            t, want = s.tag(c.name), target.tag(c.name)
            for f in ("parallel", "tile", "unroll"):
                if getattr(t, f) is not None and getattr(t, f) != getattr(want, f):
                    return False
        return True

    stack = [SearchNode(type(target)(), 0)]
    seen = set()
    while stack:
        node = stack.pop()
        if node.signature == goal:
            return True
        key = (node.signature, node.level)
        if key in seen:
            continue
        seen.add(key)
        stack += [c for c in gen.children(node) if compatible(c.sched)]
    return False


def has_reduction(p) -> bool:
    """True when some computation reads the very cell it writes."""
    return any(r.rows == c.write.rows and r.buffer_id == c.write.buffer_id for c in p.computations for r in c.reads)


def random_set(rng, max_dims=3, max_extent=12):
    """A bounded box with up to two extra random affine cuts."""
    n = int(rng.integers(1, max_dims + 1))
    rows = []
    for k in range(n):
        lo = int(rng.integers(-3, 3))
        hi = lo + int(rng.integers(0, max_extent))
        r = [0] * (n + 1)
        r[k], r[n] = 1, -lo
        rows.append(r)
        r = [0] * (n + 1)
        r[k], r[n] = -1, hi
        rows.append(r)
    for _ in range(int(rng.integers(0, 3))):
        r = [int(v) for v in rng.integers(-2, 3, size=n)] + [int(rng.integers(-4, 8))]
        rows.append(r)
    return AffineSet(n, 0, tuple(map(tuple, rows)))


def random_unimodular(rng, n, length=4):
    """A product of random interchange, reversal and skew matrices."""
    m = np.eye(n, dtype=np.int64)
    for _ in range(length):
        e = np.eye(n, dtype=np.int64)
        kind = int(rng.integers(3))
        if kind == 0 and n > 1:
            a, b = rng.choice(n, 2, replace=False)
            e[[a, b]] = e[[b, a]]
        elif kind == 1:
            k = int(rng.integers(n))
            e[k, k] = -1
        elif n > 1:
            a, b = rng.choice(n, 2, replace=False)
            e[a, b] = int(rng.integers(-3, 4))
        m = e @ m
    return m
