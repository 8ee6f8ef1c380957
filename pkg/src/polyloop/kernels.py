"""Interpreter kernels.

Every computation body is compiled to a small post-order bytecode.  The
instance stream (already sorted into execution order) is described by
``comp_of[n]`` and an address table ``addr[n, k]`` whose column 0 is the
store address and column ``1 + r`` the address of read ``r``.

Two interchangeable backends execute a range of the stream:

* :func:`exec_range_jit` walks instances one by one (numba when enabled);
* :func:`exec_range_np` splits the range into hazard-free blocks (no
  instance reads or overwrites a cell stored earlier in the same block) and
  evaluates each block with whole-array numpy operations.

Both apply the same floating-point operations per instance in the same
order, so their results are bit-identical.
"""
from __future__ import annotations

import numpy as np

from ._jit import JIT_ENABLED, kernel

OP_LOAD, OP_CONST, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_MIN, OP_MAX = range(8)
OPCODES = {"load": OP_LOAD, "constant": OP_CONST, "add": OP_ADD, "sub": OP_SUB,
           "mul": OP_MUL, "div": OP_DIV, "min": OP_MIN, "max": OP_MAX}


@kernel(nogil=True, cache=True, error_model="numpy")
def exec_range_jit(mem, comp_of, addr, ops, args, lens, consts, start, end):
    stack = np.empty(ops.shape[1] + 1, dtype=np.float64)
    for n in range(start, end):
        c = comp_of[n]
        sp = 0
        for k in range(lens[c]):
            op = ops[c, k]
            if op == 0:
                stack[sp] = mem[addr[n, 1 + args[c, k]]]
                sp += 1
            elif op == 1:
                stack[sp] = consts[args[c, k]]
                sp += 1
            else:
                b = stack[sp - 1]
                a = stack[sp - 2]
                sp -= 1
                if op == 2:
                    r = a + b
                elif op == 3:
                    r = a - b
                elif op == 4:
                    r = a * b
                elif op == 5:
                    r = a / b
                elif op == 6:
                    r = a if a <= b else b
                else:
                    r = a if a >= b else b
                stack[sp - 1] = r
        mem[addr[n, 0]] = stack[0]


def hazard_blocks(comp_of, addr, nreads, start, end) -> list[int]:
    """Split ``[start, end)`` into maximal blocks free of in-block RAW/WAW.

    Returns the block boundaries (start, b1, ..., end).
    """
    n = end - start
    if n <= 0:
        return [start, end]
    rng = np.arange(start, end)
    nr = nreads[comp_of[rng]]
    width = addr.shape[1]
    cols = np.arange(width)
    valid = cols[None, :] <= nr[:, None]
    pos = np.broadcast_to(rng[:, None], (n, width))[valid]
    cell = addr[start:end][valid]
    isw = np.broadcast_to(cols[None, :] == 0, (n, width))[valid]
    order = np.lexsort((isw, pos, cell))
    c, p, w = cell[order], pos[order], isw[order]
    m = c.shape[0]
    idx = np.arange(m)
    new = np.r_[True, c[1:] != c[:-1]]
    seg_first = np.flatnonzero(new)[np.cumsum(new) - 1]
    wpos = np.where(w, idx, -1)
    prev_w = np.r_[-1, np.maximum.accumulate(wpos)[:-1]]
    ok = prev_w >= seg_first
    conflict_with = np.full(m, -1, dtype=np.int64)
    # a read of the cell an instance itself stores is never a hazard here,
    # reads of an instance are gathered before its store
    pw = p[np.maximum(prev_w, 0)]
    ok &= pw != p
    conflict_with[ok] = pw[ok]
    prev_conf = np.full(n, -1, dtype=np.int64)
    np.maximum.at(prev_conf, p - start, conflict_with)
    bounds = [start]
    s = start
    pc = prev_conf.tolist()
    for i in range(n):
        if pc[i] >= s:
            s = start + i
            bounds.append(s)
    bounds.append(end)
    return bounds


def _eval_block(mem, comp_of, addr, ops, args, lens, consts, s, e):
    cs = comp_of[s:e]
    out_addr = addr[s:e, 0]
    vals = np.empty(e - s, dtype=np.float64)
    for c in np.unique(cs):
        sel = np.flatnonzero(cs == c)
        rows = addr[s:e][sel]
        stack = []
        for k in range(lens[c]):
            op = ops[c, k]
            if op == OP_LOAD:
                stack.append(mem[rows[:, 1 + args[c, k]]])
            elif op == OP_CONST:
                stack.append(np.full(sel.shape[0], consts[args[c, k]]))
            else:
                b = stack.pop()
                a = stack.pop()
                if op == OP_ADD:
                    r = a + b
                elif op == OP_SUB:
                    r = a - b
                elif op == OP_MUL:
                    r = a * b
                elif op == OP_DIV:
                    with np.errstate(divide="ignore"):
                        r = a / b
                elif op == OP_MIN:
                    r = np.where(a <= b, a, b)
                else:
                    r = np.where(a >= b, a, b)
                stack.append(r)
        vals[sel] = stack[0]
    mem[out_addr] = vals


def exec_range_np(mem, comp_of, addr, ops, args, lens, consts, start, end, nreads=None):
    if nreads is None:
        nreads = _nreads(ops, lens)
    bounds = hazard_blocks(comp_of, addr, nreads, start, end)
    # overflow is left to the caller's finiteness check, as in the jitted kernel
    with np.errstate(over="ignore", invalid="ignore"):
        for s, e in zip(bounds[:-1], bounds[1:]):
            if e > s:
                _eval_block(mem, comp_of, addr, ops, args, lens, consts, s, e)


def _nreads(ops, lens):
    out = np.zeros(ops.shape[0], dtype=np.int64)
    for c in range(ops.shape[0]):
        out[c] = int(np.sum(ops[c, : lens[c]] == OP_LOAD))
    return out


def exec_range(mem, comp_of, addr, ops, args, lens, consts, start, end, backend=None):
    use_jit = JIT_ENABLED if backend is None else backend == "numba"
    if use_jit:
        # without numba this is plain Python on numpy scalars, which warn on overflow
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            exec_range_jit(mem, comp_of, addr, ops, args, lens, consts, start, end)
    else:
        exec_range_np(mem, comp_of, addr, ops, args, lens, consts, start, end)
