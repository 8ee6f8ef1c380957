"""Program model and the JSON program format.

A program is an ordered list of computations.  Each computation owns an
iteration domain, one write access, the read accesses appearing in its
expression, and a ``shared_depth``: how many outer loops it shares with the
preceding computation in the original loop structure (0 starts a new nest).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .poly import AffineSet, PolyError, Unbounded, dim_bounds, enumerate_array

OPS = ("add", "sub", "mul", "div", "min", "max", "load", "constant")
BINARY_OPS = ("add", "sub", "mul", "div", "min", "max")


class ParseError(Exception):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{msg} (line {line}, column {col})")
        self.line = line
        self.col = col


class ValidationError(Exception):
    pass


@dataclass(frozen=True)
class Buffer:
    id: int
    name: str
    dims: tuple
    elem_kind: str = "f64"

    def extents(self, binding: Mapping[str, int]) -> tuple[int, ...]:
        return tuple(int(binding[d]) if isinstance(d, str) else int(d) for d in self.dims)


@dataclass(frozen=True)
class AccessMatrix:
    buffer_id: int
    rows: tuple[tuple[int, ...], ...]
    is_write: bool = False

    def bound(self, num_iters: int, symbols: Sequence[str], binding: Mapping[str, int]) -> np.ndarray:
        """``(dims, num_iters + 1)`` integer map with symbols substituted."""
        vals = [int(binding[s]) for s in symbols]
        out = np.zeros((len(self.rows), num_iters + 1), dtype=np.int64)
        for k, r in enumerate(self.rows):
            out[k, :num_iters] = r[:num_iters]
            out[k, -1] = r[-1] + sum(a * v for a, v in zip(r[num_iters:-1], vals))
        return out


@dataclass(frozen=True)
class ExprNode:
    op: str
    children: tuple["ExprNode", ...] = ()
    access: AccessMatrix | None = None
    value: float | None = None

    def loads(self) -> list[AccessMatrix]:
        """Load accesses in post-order."""
        if self.op == "load":
            return [self.access]
        out = []
        for c in self.children:
            out += c.loads()
        return out


def post_order_ops(e: ExprNode) -> list[str]:
    out: list[str] = []

    def walk(n):
        for c in n.children:
            walk(c)
        out.append(n.op)

    walk(e)
    return out


@dataclass(frozen=True)
class Computation:
    id: int
    name: str
    iterators: tuple[str, ...]
    domain: AffineSet
    write: AccessMatrix
    reads: tuple[AccessMatrix, ...]
    expr: ExprNode
    shared_depth: int = 0

    @property
    def depth(self) -> int:
        return self.domain.num_iters

    @property
    def accesses(self) -> tuple[AccessMatrix, ...]:
        return (self.write,) + self.reads


@dataclass(frozen=True)
class LoopNode:
    """A loop at ``level``; ``children`` holds LoopNodes and computation indices
    in execution order."""
    level: int
    children: tuple


def build_loop_tree(depths: Sequence[int], shared: Sequence[int]) -> tuple:
    """Loop forest from per-computation depths and sharing depths."""
    roots: list = []
    # stack[l] is the children list of the open loop at level l-1 (stack[0] = roots)
    stack: list[list] = [roots]
    for k, (d, s) in enumerate(zip(depths, shared)):
        if k == 0:
            s = 0
        del stack[s + 1:]
        for lvl in range(s, d):
            node_children: list = []
            stack[lvl].append((lvl, node_children))
            stack.append(node_children)
        stack[d].append(k)
        del stack[d + 1:]

    def freeze(items):
        out = []
        for it in items:
            if isinstance(it, tuple):
                out.append(LoopNode(it[0], freeze(it[1])))
            else:
                out.append(it)
        return tuple(out)

    return freeze(roots)


@dataclass(frozen=True)
class ProgramIR:
    buffers: tuple[Buffer, ...]
    computations: tuple[Computation, ...]
    symbols: tuple[str, ...]
    binding: Mapping[str, int]
    loop_tree: tuple = ()
    name: str = "program"
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def comp_index(self, name: str) -> int:
        for c in self.computations:
            if c.name == name:
                return c.id
        raise KeyError(name)

    def buffer(self, name_or_id) -> Buffer:
        for b in self.buffers:
            if b.name == name_or_id or b.id == name_or_id:
                return b
        raise KeyError(name_or_id)

    def resolve_binding(self, b: Mapping[str, int] | None) -> dict[str, int]:
        out = dict(self.binding)
        if b:
            out.update({k: int(v) for k, v in b.items()})
        missing = [s for s in self.symbols if s not in out]
        if missing:
            raise ValidationError(f"unbound symbols: {missing}")
        return out

    def root_groups(self, shared: Sequence[int] | None = None) -> list[list[int]]:
        """Computation indices grouped by outermost nest."""
        shared = [c.shared_depth for c in self.computations] if shared is None else shared
        groups: list[list[int]] = []
        for k, s in enumerate(shared):
            if k == 0 or s == 0:
                groups.append([k])
            else:
                groups[-1].append(k)
        return groups

    def points(self, comp: int, b: Mapping[str, int] | None = None) -> np.ndarray:
        """Cached lexicographic lattice points of a computation's domain."""
        binding = self.resolve_binding(b)
        key = ("pts", comp, tuple(sorted(binding.items())))
        pts = self._cache.get(key)
        if pts is None:
            pts = enumerate_array(self.computations[comp].domain, binding)
            pts.setflags(write=False)
            self._cache[key] = pts
        return pts

    def instance_count(self, b: Mapping[str, int] | None = None) -> int:
        return sum(self.points(k, b).shape[0] for k in range(len(self.computations)))


# -- JSON format -------------------------------------------------------------

def _rows(v: Any, width: int, where: str) -> tuple[tuple[int, ...], ...]:
    if not isinstance(v, list):
        raise ValidationError(f"{where}: expected a list of rows")
    out = []
    for r in v:
        if not isinstance(r, list) or any(not isinstance(x, int) or isinstance(x, bool) for x in r):
            raise ValidationError(f"{where}: rows must be lists of integers")
        if len(r) != width:
            raise ValidationError(f"{where}: row width {len(r)} != num_iters + num_syms + 1 = {width}")
        out.append(tuple(r))
    return tuple(out)


def program_from_dict(doc: Mapping[str, Any]) -> ProgramIR:
    if not isinstance(doc, Mapping):
        raise ValidationError("program document must be a JSON object")
    try:
        sym_entries = doc.get("symbols", [])
        symbols = tuple(s["name"] for s in sym_entries)
        binding = {s["name"]: int(s["value"]) for s in sym_entries if "value" in s}
        buf_entries = doc["buffers"]
        comp_entries = doc["computations"]
    except (KeyError, TypeError) as e:
        raise ValidationError(f"missing or malformed top-level field: {e}") from None
    if len(set(symbols)) != len(symbols):
        raise ValidationError("duplicate symbol names")
    if any(v < 0 for v in binding.values()):
        raise ValidationError("symbol values must be non-negative")

    buffers = []
    by_name: dict[str, int] = {}
    for i, b in enumerate(buf_entries):
        dims = tuple(b.get("dims", []))
        for d in dims:
            if isinstance(d, str) and d not in symbols:
                raise ValidationError(f"buffer {b.get('name')}: unknown symbol {d!r} in dims")
        name = b["name"]
        if name in by_name:
            raise ValidationError(f"duplicate buffer name {name!r}")
        by_name[name] = i
        buffers.append(Buffer(i, name, dims))

    ns = len(symbols)
    comps = []
    names = set()
    for ci, c in enumerate(comp_entries):
        try:
            cname = c["name"]
            iters = tuple(c.get("iterators", []))
            ni = len(iters)
            width = ni + ns + 1
            where = f"computation {cname}"
            domain = AffineSet(ni, ns, _rows(c.get("domain", []), width, where + " domain"), symbols)

            def access(a, is_write, w=where, width=width):
                bname = a["buffer"]
                if bname not in by_name:
                    raise ValidationError(f"{w}: unknown buffer {bname!r}")
                bid = by_name[bname]
                rows = _rows(a.get("map", []), width, f"{w} access to {bname}")
                if len(rows) != len(buffers[bid].dims):
                    raise ValidationError(f"{w}: access to {bname} has {len(rows)} subscripts, buffer has {len(buffers[bid].dims)} dims")
                return AccessMatrix(bid, rows, is_write)

            def expr(e, w=where):
                op = e.get("op")
                if op not in OPS:
                    raise ValidationError(f"{w}: unknown expression op {op!r}")
                if op == "load":
                    return ExprNode("load", access=access(e, False))
                if op == "constant":
                    return ExprNode("constant", value=float(e["value"]))
                args = e.get("args", [])
                if len(args) != 2:
                    raise ValidationError(f"{w}: op {op} needs 2 args, got {len(args)}")
                return ExprNode(op, tuple(expr(a) for a in args))

            write = access(c["write"], True)
            body = expr(c["expr"])
            shared = int(c.get("shared_depth", 0))
        except (KeyError, TypeError, AttributeError) as e:
            raise ValidationError(f"computation #{ci}: missing or malformed field {e}") from None
        if cname in names:
            raise ValidationError(f"duplicate computation name {cname!r}")
        names.add(cname)
        comps.append(Computation(ci, cname, iters, domain, write, tuple(body.loads()), body, shared))

    for k, c in enumerate(comps):
        if k == 0 and c.shared_depth:
            raise ValidationError("first computation cannot share loops")
        if k and c.shared_depth > min(c.depth, comps[k - 1].depth):
            raise ValidationError(f"computation {c.name}: shared_depth exceeds a neighbouring nest depth")
        if c.shared_depth < 0:
            raise ValidationError(f"computation {c.name}: negative shared_depth")

    tree = build_loop_tree([c.depth for c in comps], [c.shared_depth for c in comps])
    p = ProgramIR(tuple(buffers), tuple(comps), symbols, binding, tree, str(doc.get("name", "program")))
    validate(p)
    return p


def validate(p: ProgramIR) -> None:
    ids = [b.id for b in p.buffers]
    if ids != list(range(len(ids))):
        raise ValidationError("buffer ids must be dense 0..B-1")
    for c in p.computations:
        width = c.depth + len(p.symbols) + 1
        if not c.write.is_write:
            raise ValidationError(f"{c.name}: write access must have is_write set")
        for a in c.accesses:
            if any(len(r) != width for r in a.rows):
                raise ValidationError(f"{c.name}: access row width mismatch")
        if list(c.reads) != c.expr.loads():
            raise ValidationError(f"{c.name}: reads must match loads of expr")
        _check_expr(c.expr, c.name)
    binding = p.binding
    if all(s in binding for s in p.symbols):
        for c in p.computations:
            try:
                for k in range(c.depth):
                    dim_bounds(c.domain, k, binding)
            except Unbounded as e:
                raise ValidationError(f"{c.name}: domain is unbounded ({e})") from None
            except PolyError as e:
                raise ValidationError(f"{c.name}: {e}") from None
    leaves = _leaves(p.loop_tree)
    if leaves != list(range(len(p.computations))):
        raise ValidationError("loop_tree leaves must biject with computations in order")


def _check_expr(e: ExprNode, where: str):
    if e.op in ("load", "constant"):
        if e.children:
            raise ValidationError(f"{where}: {e.op} must be a leaf")
        if e.op == "load" and e.access is None:
            raise ValidationError(f"{where}: load without access")
        return
    if len(e.children) != 2:
        raise ValidationError(f"{where}: {e.op} must have arity 2")
    for ch in e.children:
        _check_expr(ch, where)


def _leaves(tree) -> list[int]:
    out = []
    for it in tree:
        if isinstance(it, LoopNode):
            out += _leaves(it.children)
        else:
            out.append(it)
    return out


def parse_program(text: str) -> ProgramIR:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, e.lineno, e.colno) from None
    return program_from_dict(doc)


def load_program(path) -> ProgramIR:
    with open(path) as f:
        return parse_program(f.read())


def program_to_dict(p: ProgramIR) -> dict:
    def access(a: AccessMatrix) -> dict:
        return {"buffer": p.buffers[a.buffer_id].name, "map": [list(r) for r in a.rows]}

    def expr(e: ExprNode) -> dict:
        if e.op == "load":
            return {"op": "load", **access(e.access)}
        if e.op == "constant":
            return {"op": "constant", "value": e.value}
        return {"op": e.op, "args": [expr(c) for c in e.children]}

    syms = []
    for s in p.symbols:
        entry: dict = {"name": s}
        if s in p.binding:
            entry["value"] = p.binding[s]
        syms.append(entry)
    comps = []
    for c in p.computations:
        d = {
            "name": c.name,
            "iterators": list(c.iterators),
            "domain": [list(r) for r in c.domain.rows],
            "write": access(c.write),
            "expr": expr(c.expr),
        }
        if c.shared_depth:
            d["shared_depth"] = c.shared_depth
        comps.append(d)
    return {
        "name": p.name,
        "symbols": syms,
        "buffers": [{"name": b.name, "dims": list(b.dims)} for b in p.buffers],
        "computations": comps,
    }


def serialize_program(p: ProgramIR, indent: int | None = None) -> str:
    return json.dumps(program_to_dict(p), indent=indent, sort_keys=False)
