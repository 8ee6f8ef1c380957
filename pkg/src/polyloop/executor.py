"""Reference interpreter for (program, schedule) pairs.

Instances of all computations are sorted by transformed timestamp and run
through the bytecode kernels in :mod:`polyloop.kernels`.  Two cost modes:

* ``wallclock``: median of R timed executions; loops marked parallel split
  their iterations into contiguous blocks run on a thread pool;
* ``abstract``: a deterministic op-count model (integer arithmetic in
  sixteenths, so unroll amortization stays exact).
"""
from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels
from .ir import ProgramIR, post_order_ops
from .transform import ScheduleState, canonical_signature, resolve

ABSTRACT = "abstract"
WALLCLOCK = "wallclock"

OP_COST = {"load": 4, "store": 4, "add": 1, "sub": 1, "mul": 3, "div": 12, "min": 2, "max": 2, "constant": 0}
UNIT = 16  # abstract cost is tracked in 1/16 units
LOOP_CONTROL = 1


class ExecError(Exception):
    pass


class OutOfBoundsAccess(ExecError):
    pass


class NonFiniteValue(ExecError):
    pass


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("LOOPER_THREADS", "4")))
    except ValueError:
        return 4


@dataclass(frozen=True)
class ExecConfig:
    mode: str = ABSTRACT
    repetitions: int = 5
    threads: int = field(default_factory=default_threads)
    seed: int = 0
    parallel_overhead: int = 1000
    backend: str | None = None  # None follows LOOPER_JIT

    def __post_init__(self):
        if self.mode not in (ABSTRACT, WALLCLOCK):
            raise ValueError(f"unknown exec mode {self.mode!r}")
        if self.mode == WALLCLOCK and self.repetitions % 2 == 0:
            raise ValueError("repetitions must be odd in wallclock mode")
        if self.threads < 1 or self.repetitions < 1:
            raise ValueError("threads and repetitions must be positive")

    def key(self) -> tuple:
        return (self.mode, self.repetitions, self.threads, self.seed, self.parallel_overhead)


@dataclass
class ExecReport:
    checksums: dict[str, str]
    cost: float
    instances: int
    mode: str
    buffers: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {"checksums": self.checksums, "cost": self.cost, "instances": self.instances, "mode": self.mode}


def _order(p: ProgramIR, sched: ScheduleState, binding):
    plans = resolve(p, sched)
    width = max(pl.width for pl in plans)
    pts = [p.points(c.id, binding) for c in p.computations]
    ts = np.vstack([pl.timestamps(x, width) for pl, x in zip(plans, pts)]) if pts else np.zeros((0, width), np.int64)
    comp_of = np.concatenate([np.full(x.shape[0], k, dtype=np.int64) for k, x in enumerate(pts)])
    inst = np.concatenate([np.arange(x.shape[0], dtype=np.int64) for x in pts])
    order = np.lexsort([ts[:, k] for k in reversed(range(width))]) if ts.shape[0] else np.zeros(0, np.int64)
    return plans, ts[order], comp_of[order], inst[order]


def _segments(plans, ts, comp_of, threads):
    """Sequential ranges and parallel loop entries of the ordered stream."""
    n = ts.shape[0]
    if n == 0:
        return []
    ppos = np.array([pl.loop_position(pl.parallel) if pl.parallel is not None else -1 for pl in plans], dtype=np.int64)
    pos = ppos[comp_of]
    if (pos < 0).all():
        return [(0, n, None)]
    diff = ts[1:] != ts[:-1]
    first = np.where(diff.any(axis=1), diff.argmax(axis=1), ts.shape[1])
    same_entry = (pos[1:] == pos[:-1]) & (pos[1:] >= 0) & (first >= pos[1:])
    starts = np.flatnonzero(np.r_[True, ~same_entry])
    ends = np.r_[starts[1:], n]
    segs = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        pp = int(pos[s])
        if pp < 0:
            if segs and segs[-1][2] is None:
                segs[-1] = (segs[-1][0], e, None)
            else:
                segs.append((s, e, None))
            continue
        it = ts[s:e, pp]
        change = np.flatnonzero(np.r_[True, it[1:] != it[:-1]])
        n_iter = change.shape[0]
        w = min(threads, n_iter)
        groups = np.array_split(np.arange(n_iter), w)
        iter_start = np.r_[change, e - s]
        blocks = [(s + int(iter_start[g[0]]), s + int(iter_start[g[-1] + 1])) for g in groups]
        segs.append((s, e, blocks))
    return segs


def _bytecode(p: ProgramIR):
    comps = p.computations
    codes = []
    consts: list[float] = []
    for c in comps:
        ops, args = [], []
        read_k = 0

        def walk(e):
            nonlocal read_k
            for ch in e.children:
                walk(ch)
            ops.append(kernels.OPCODES[e.op])
            if e.op == "load":
                args.append(read_k)
                read_k += 1
            elif e.op == "constant":
                args.append(len(consts))
                consts.append(float(e.value))
            else:
                args.append(0)

        walk(c.expr)
        codes.append((ops, args))
    width = max((len(o) for o, _ in codes), default=1)
    ops_a = np.zeros((len(comps), width), dtype=np.int64)
    args_a = np.zeros((len(comps), width), dtype=np.int64)
    lens = np.zeros(len(comps), dtype=np.int64)
    for k, (o, a) in enumerate(codes):
        ops_a[k, : len(o)] = o
        args_a[k, : len(a)] = a
        lens[k] = len(o)
    return ops_a, args_a, lens, np.array(consts or [0.0], dtype=np.float64)


def _layout(p: ProgramIR, binding):
    offsets, extents = [], []
    off = 0
    for b in p.buffers:
        ext = b.extents(binding)
        offsets.append(off)
        extents.append(ext)
        off += int(np.prod(ext, dtype=np.int64)) if ext else 1
    return offsets, extents, off


def _addresses(p: ProgramIR, binding, comp_of, inst, offsets, extents):
    n = comp_of.shape[0]
    max_acc = max(len(c.accesses) for c in p.computations)
    addr = np.zeros((n, max_acc), dtype=np.int64)
    for c in p.computations:
        sel = np.flatnonzero(comp_of == c.id)
        if sel.size == 0:
            continue
        pts = p.points(c.id, binding)[inst[sel]]
        for k, a in enumerate(c.accesses):
            m = a.bound(c.depth, p.symbols, binding)
            sub = pts @ m[:, :-1].T + m[:, -1]
            ext = np.array(extents[a.buffer_id], dtype=np.int64)
            bad = ((sub < 0) | (sub >= ext)).any(axis=1) if ext.size else np.zeros(sub.shape[0], bool)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise OutOfBoundsAccess(
                    f"{c.name}{tuple(int(v) for v in pts[i])}: subscript {tuple(int(v) for v in sub[i])} "
                    f"outside {p.buffers[a.buffer_id].name}{tuple(int(v) for v in ext)}"
                )
            if ext.size:
                strides = np.r_[np.cumprod(ext[::-1])[::-1][1:], 1]
                flat = sub @ strides
            else:
                flat = np.zeros(sub.shape[0], dtype=np.int64)
            addr[sel, k] = offsets[a.buffer_id] + flat
    return addr


def _init_memory(p: ProgramIR, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.5, 1.5, size=size)


def _instance_units(p: ProgramIR, plans) -> np.ndarray:
    out = np.zeros(len(p.computations), dtype=np.int64)
    for c, pl in zip(p.computations, plans):
        body = OP_COST["store"] + sum(OP_COST[o] for o in post_order_ops(c.expr))
        ctrl = UNIT * LOOP_CONTROL // (pl.unroll or 1) if c.depth else 0
        out[c.id] = UNIT * body + ctrl
    return out


def _abstract_cost(p, plans, comp_of, segments, overhead) -> float:
    units = _instance_units(p, plans)[comp_of]
    cum = np.r_[0, np.cumsum(units)]
    total = 0
    for s, e, blocks in segments:
        if blocks is None:
            total += int(cum[e] - cum[s])
        else:
            total += max(int(cum[be] - cum[bs]) for bs, be in blocks) + UNIT * overhead
    return total / UNIT


def _prepare(p: ProgramIR, sched: ScheduleState, b, threads: int):
    binding = p.resolve_binding(b)
    plans, ts, comp_of, inst = _order(p, sched, binding)
    return binding, plans, comp_of, inst, _segments(plans, ts, comp_of, threads)


def _execute(mem, comp_of, addr, code, segments, threads, backend, pool=None):
    ops, args, lens, consts = code
    for s, e, blocks in segments:
        if blocks is None or pool is None or len(blocks) == 1:
            kernels.exec_range(mem, comp_of, addr, ops, args, lens, consts, s, e, backend=backend)
        else:
            futs = [pool.submit(kernels.exec_range, mem, comp_of, addr, ops, args, lens, consts, bs, be, backend)
                    for bs, be in blocks]
            for f in futs:
                f.result()


def run(p: ProgramIR, sched: ScheduleState, b: Mapping[str, int] | None = None, cfg: ExecConfig | None = None) -> ExecReport:
    cfg = cfg or ExecConfig()
    binding, plans, comp_of, inst, segments = _prepare(p, sched, b, cfg.threads)
    offsets, extents, size = _layout(p, binding)
    n = comp_of.shape[0]
    addr = _addresses(p, binding, comp_of, inst, offsets, extents) if n else np.zeros((0, 1), np.int64)
    code = _bytecode(p)
    init = _init_memory(p, size, cfg.seed)
    if cfg.mode == ABSTRACT:
        mem = init.copy()
        _execute(mem, comp_of, addr, code, segments, 1, cfg.backend)
        cost = _abstract_cost(p, plans, comp_of, segments, cfg.parallel_overhead)
    else:
        times = []
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for _ in range(cfg.repetitions):
                mem = init.copy()
                t0 = time.perf_counter_ns()
                _execute(mem, comp_of, addr, code, segments, cfg.threads, cfg.backend, pool if cfg.threads > 1 else None)
                times.append(time.perf_counter_ns() - t0)
        cost = float(np.median(times))
    bufs = {}
    sums = {}
    for bf, off, ext in zip(p.buffers, offsets, extents):
        size_b = int(np.prod(ext, dtype=np.int64)) if ext else 1
        arr = mem[off: off + size_b].reshape(ext) if ext else mem[off: off + 1].copy()
        if not np.isfinite(arr).all():
            raise NonFiniteValue(f"buffer {bf.name} holds non-finite values after execution")
        bufs[bf.name] = arr
        sums[bf.name] = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
    return ExecReport(sums, cost, int(n), cfg.mode, bufs)


def schedule_cost(p: ProgramIR, sched: ScheduleState, b=None, cfg: ExecConfig | None = None) -> float:
    """Cost of a schedule; ABSTRACT mode skips value execution entirely."""
    cfg = cfg or ExecConfig()
    if cfg.mode == WALLCLOCK:
        return run(p, sched, b, cfg).cost
    _, plans, comp_of, _, segments = _prepare(p, sched, b, cfg.threads)
    return _abstract_cost(p, plans, comp_of, segments, cfg.parallel_overhead)


def identity_cost(p: ProgramIR, b=None, cfg: ExecConfig | None = None) -> float:
    cfg = cfg or ExecConfig()
    binding = p.resolve_binding(b)
    key = ("idcost", tuple(sorted(binding.items())), cfg.key())
    if key not in p._cache:
        p._cache[key] = schedule_cost(p, ScheduleState(), binding, cfg)
    return p._cache[key]


def measure_speedup(p: ProgramIR, sched: ScheduleState, b=None, cfg: ExecConfig | None = None) -> float:
    cfg = cfg or ExecConfig()
    base = identity_cost(p, b, cfg)
    if canonical_signature(sched) == "identity" and cfg.mode == ABSTRACT:
        return 1.0
    cost = schedule_cost(p, sched, b, cfg)
    if cost <= 0:
        return 1.0 if base <= 0 else float("inf")
    return base / cost


def outputs_match(a: ExecReport, b: ExecReport, rtol: float = 1e-9) -> bool:
    """Exact checksum match, or elementwise closeness for reassociated values."""
    if a.checksums == b.checksums:
        return True
    return all(np.allclose(a.buffers[k], b.buffers[k], rtol=rtol, atol=0) for k in a.buffers)
