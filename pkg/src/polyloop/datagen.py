"""Random synthetic programs and search-driven labelled datasets.

Programs chain one to three loop nests drawn from a few basic computation
patterns.  The dataset records every schedule the beam search evaluates,
labelled with the interpreter speedup.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .candidates import GenConfig as SearchGenConfig
from .cost_model.training import DataFormatError, split_programs
from .dependence import compute_dependences
from .executor import ExecConfig, measure_speedup
from .features import FeatureTree, featurize
from .ir import ProgramIR, program_from_dict, program_to_dict
from .search import beam_search
from .transform import IDENTITY_SIGNATURE, ScheduleState, canonical_signature

log = logging.getLogger(__name__)

FORMAT = "polyloop-dataset"
FORMAT_VERSION = 1
FAMILIES = ("pointwise", "stencil", "reduction", "matmul", "triangular")
EXTENTS = (16, 32, 64, 128)


@dataclass(frozen=True)
class GenConfig:
    program_count: int = 10
    seed: int = 0
    min_nests: int = 1
    max_nests: int = 3
    min_depth: int = 1
    max_depth: int = 4
    extents: tuple = EXTENTS
    families: tuple = FAMILIES
    max_instances: int = 16_384
    schedules_per_program: int = 60
    chain_probability: float = 0.6

    def to_json(self) -> dict:
        d = asdict(self)
        d["extents"] = list(self.extents)
        d["families"] = list(self.families)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


# -- program construction ---------------------------------------------------------

class _Builder:
    """Accumulates buffers and computations of one program document."""

    def __init__(self, name: str):
        self.name = name
        self.buffers: list[dict] = []
        self.comps: list[dict] = []

    def buffer(self, prefix: str, dims: Sequence[int]) -> str:
        name = f"{prefix}{len(self.buffers)}"
        self.buffers.append({"name": name, "dims": [int(d) for d in dims]})
        return name

    def dims(self, name: str) -> list[int]:
        return next(b["dims"] for b in self.buffers if b["name"] == name)

    def add(self, iters, domain, write, expr):
        self.comps.append({"name": f"S{len(self.comps)}", "iterators": list(iters), "domain": domain,
                           "write": write, "expr": expr})

    def doc(self) -> dict:
        return {"name": self.name, "symbols": [], "buffers": self.buffers, "computations": self.comps}


def _box(d: int, lo: Sequence[int], hi: Sequence[int]) -> list[list[int]]:
    """Rows for lo[l] <= x_l <= hi[l]."""
    rows = []
    for l in range(d):
        e = [0] * (d + 1)
        e[l], e[d] = 1, -lo[l]
        rows.append(e)
        e = [0] * (d + 1)
        e[l], e[d] = -1, hi[l]
        rows.append(e)
    return rows


def _map(d: int, dims: Sequence[int], offsets: Sequence[int] | None = None) -> list[list[int]]:
    """Access rows selecting iterators ``dims`` plus constant offsets."""
    offsets = offsets or [0] * len(dims)
    rows = []
    for l, o in zip(dims, offsets):
        r = [0] * (d + 1)
        if l is not None:
            r[l] = 1
        r[d] = o
        rows.append(r)
    return rows


def _load(buf, d, dims, offsets=None):
    return {"op": "load", "buffer": buf, "map": _map(d, dims, offsets)}


def _const(v):
    return {"op": "constant", "value": float(v)}


def _bin(op, a, b):
    return {"op": op, "args": [a, b]}


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = _bin("add", out, t)
    return out


def _pointwise(bld: _Builder, rng, ext, src):
    d = len(ext)
    inp = src if src is not None and bld.dims(src) == list(ext) else bld.buffer("I", ext)
    out = bld.buffer("B", ext)
    x = _load(inp, d, range(d))
    kind = int(rng.integers(4))
    c = _const(round(float(rng.uniform(0.5, 2.0)), 3))
    expr = [_bin("mul", x, c), _bin("add", x, c), _bin("mul", x, x), _bin("max", x, c)][kind]
    bld.add([f"i{l}" for l in range(d)], _box(d, [0] * d, [e - 1 for e in ext]),
            {"buffer": out, "map": _map(d, range(d))}, expr)
    return out


def _stencil(bld: _Builder, rng, ext, src):
    d = len(ext)
    iters = [f"i{l}" for l in range(d)]
    variant = int(rng.integers(3)) if d >= 2 else 0
    if variant == 0:
        # out-of-place neighbourhood average on the last one or two dims
        inp = src if src is not None and bld.dims(src) == list(ext) else bld.buffer("I", ext)
        out = bld.buffer("B", ext)
        sp = list(range(max(0, d - 2), d))
        lo = [1 if l in sp else 0 for l in range(d)]
        hi = [e - 2 if l in sp else e - 1 for l, e in enumerate(ext)]
        terms = [_load(inp, d, range(d))]
        for l in sp:
            for o in (-1, 1):
                terms.append(_load(inp, d, range(d), [o if k == l else 0 for k in range(d)]))
        expr = _bin("mul", _sum(terms), _const(round(1.0 / len(terms), 6)))
        bld.add(iters, _box(d, lo, hi), {"buffer": out, "map": _map(d, range(d))}, expr)
        return out
    out = bld.buffer("A", ext)
    if variant == 1:
        # in place over time: A[t][x] = f(A[t-1][x-1], A[t-1][x+1])
        lo = [1] + [1] * (d - 1)
        hi = [ext[0] - 1] + [e - 2 for e in ext[1:]]
        terms = []
        for o in (-1, 1):
            terms.append(_load(out, d, range(d), [-1] + [o if k == d - 1 else 0 for k in range(1, d)]))
        expr = _bin("mul", _sum(terms), _const(0.5))
    else:
        # in place wavefront: A[x][y] = f(A[x-1][y], A[x][y-1])
        lo = [0] * (d - 2) + [1, 1]
        hi = [e - 1 for e in ext]
        terms = [_load(out, d, range(d), [0] * (d - 2) + [-1, 0]), _load(out, d, range(d), [0] * (d - 2) + [0, -1])]
        expr = _bin("mul", _sum(terms), _const(0.5))
    bld.add(iters, _box(d, lo, hi), {"buffer": out, "map": _map(d, range(d))}, expr)
    return out


def _reduction(bld: _Builder, rng, ext, src):
    d = max(2, len(ext))
    ext = list(ext[:d])
    inp = src if src is not None and bld.dims(src) == ext else bld.buffer("I", ext)
    out = bld.buffer("R", ext[:-1])
    acc = _load(out, d, range(d - 1))
    op = "add" if rng.random() < 0.7 else "max"
    expr = _bin(op, acc, _load(inp, d, range(d)))
    bld.add([f"i{l}" for l in range(d)], _box(d, [0] * d, [e - 1 for e in ext]),
            {"buffer": out, "map": _map(d, range(d - 1))}, expr)
    return out


def _matmul(bld: _Builder, rng, ext, src):
    ni, nj, nk = ext[0], ext[1], ext[2]
    a = src if src is not None and bld.dims(src) == [ni, nk] else bld.buffer("I", [ni, nk])
    b = bld.buffer("I", [nk, nj])
    c = bld.buffer("C", [ni, nj])
    expr = _bin("add", _load(c, 3, [0, 1]), _bin("mul", _load(a, 3, [0, 2]), _load(b, 3, [2, 1])))
    bld.add(["i", "j", "k"], _box(3, [0, 0, 0], [ni - 1, nj - 1, nk - 1]), {"buffer": c, "map": _map(3, [0, 1])}, expr)
    return c


def _triangular(bld: _Builder, rng, ext, src):
    n = min(ext[0], ext[1])
    inp = src if src is not None and bld.dims(src) == [n, n] else bld.buffer("I", [n, n])
    # 0 <= i <= n-1, 0 <= j, j <= i
    dom = [[1, 0, 0], [-1, 0, n - 1], [0, 1, 0], [1, -1, 0]]
    if rng.random() < 0.5:
        out = bld.buffer("R", [n])
        expr = _bin("add", _load(out, 2, [0]), _load(inp, 2, [0, 1]))
        bld.add(["i", "j"], dom, {"buffer": out, "map": _map(2, [0])}, expr)
    else:
        out = bld.buffer("B", [n, n])
        expr = _bin("mul", _load(inp, 2, [0, 1]), _const(round(float(rng.uniform(0.5, 2.0)), 3)))
        bld.add(["i", "j"], dom, {"buffer": out, "map": _map(2, [0, 1])}, expr)
    return out


_PATTERNS = {"pointwise": _pointwise, "stencil": _stencil, "reduction": _reduction,
             "matmul": _matmul, "triangular": _triangular}
_DEPTHS = {"pointwise": (1, 4), "stencil": (1, 3), "reduction": (2, 3), "matmul": (3, 3), "triangular": (2, 2)}


def _fit_extents(rng, cfg: GenConfig, depth: int, budget: int) -> list[int] | None:
    choices = sorted(cfg.extents)
    idx = [int(rng.integers(len(choices))) for _ in range(depth)]
    while int(np.prod([choices[i] for i in idx])) > budget:
        k = max(range(depth), key=lambda l: (idx[l], -l))
        if idx[k] == 0:
            return None
        idx[k] -= 1
    return [choices[i] for i in idx]


def gen_program(cfg: GenConfig, index: int) -> ProgramIR:
    """The ``index``-th program of the stream defined by ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, index])
    name = f"p{cfg.seed:04d}-{index:05d}"
    n_nests = int(rng.integers(cfg.min_nests, cfg.max_nests + 1))
    budget = cfg.max_instances // n_nests
    bld = _Builder(name)
    prev = None
    ext_all = None
    for _ in range(n_nests):
        fam = cfg.families[int(rng.integers(len(cfg.families)))]
        lo, hi = _DEPTHS[fam]
        lo, hi = max(lo, cfg.min_depth), min(hi, cfg.max_depth)
        if lo > hi:
            lo = hi = _DEPTHS[fam][0]
        depth = int(rng.integers(lo, hi + 1))
        ext = _fit_extents(rng, cfg, max(depth, 3 if fam == "matmul" else depth), budget)
        while ext is None:
            depth -= 1
            ext = _fit_extents(rng, cfg, depth, budget) if depth >= 1 else [min(cfg.extents)]
        if ext_all is not None and rng.random() < cfg.chain_probability:
            # reuse the previous nest's extents so the nests line up
            ext = (ext_all + ext)[: len(ext)] if len(ext_all) >= len(ext) else ext_all + ext[len(ext_all):]
            if int(np.prod(ext)) > budget:
                ext = _fit_extents(rng, cfg, len(ext), budget) or ext
        src = prev if prev is not None and rng.random() < cfg.chain_probability else None
        prev = _PATTERNS[fam](bld, rng, ext, src)
        ext_all = list(ext)
    return program_from_dict(bld.doc())


def gen_programs(cfg: GenConfig) -> list[ProgramIR]:
    return [gen_program(cfg, i) for i in range(cfg.program_count)]


# -- dataset ---------------------------------------------------------------------

@dataclass
class Datapoint:
    pid: str
    features: FeatureTree
    schedule: ScheduleState
    speedup: float
    mode: str

    def to_json(self) -> dict:
        return {"pid": self.pid, "features": self.features.to_json(), "schedule": self.schedule.to_json(),
                "speedup": self.speedup, "mode": self.mode}

    @classmethod
    def from_json(cls, d: Mapping) -> "Datapoint":
        try:
            dp = cls(str(d["pid"]), FeatureTree.from_json(d["features"]), ScheduleState.from_json(d["schedule"]),
                     float(d["speedup"]), str(d["mode"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"malformed datapoint: {e!r}") from None
        if not dp.speedup > 0:
            raise DataFormatError(f"datapoint {dp.pid}: non-positive speedup {dp.speedup}")
        if dp.mode not in ("abstract", "wallclock"):
            raise DataFormatError(f"datapoint {dp.pid}: unknown mode {dp.mode!r}")
        return dp

    def triple(self) -> tuple:
        return self.pid, self.features, self.speedup


@dataclass(frozen=True)
class SearchSettings:
    beam: int = 3
    affine_depth: int = 2
    max_beam: int = 64
    max_affine_depth: int = 3
    gen: SearchGenConfig = field(default_factory=SearchGenConfig)


class _Recorder:
    """Evaluator wrapper that keeps every schedule it scores."""
    concurrent_safe = False

    def __init__(self, cfg: ExecConfig, seen: dict):
        self.cfg = cfg
        self.seen = seen

    def __call__(self, p, sched, b=None):
        sig = canonical_signature(sched)
        if sig not in self.seen:
            self.seen[sig] = (sched, measure_speedup(p, sched, b, self.cfg))
        return self.seen[sig][1]


def label_program(p: ProgramIR, target: int, search: SearchSettings, exec_cfg: ExecConfig) -> list[Datapoint]:
    """Search-driven labels for one program, widening the beam and then the
    affine depth until ``target`` distinct schedules were evaluated or the
    candidate tree is exhausted.  Overshoot is subsampled back to ``target``."""
    deps = compute_dependences(p)
    seen: dict = {}
    rec = _Recorder(exec_cfg, seen)
    K, n = search.beam, search.affine_depth
    before = -1
    while True:
        beam_search(p, rec, K=K, n=n, deps=deps, gen_cfg=search.gen)
        if len(seen) >= target:
            break
        grew = len(seen) > before
        before = len(seen)
        if grew and K < search.max_beam:
            K = min(K * 2, search.max_beam)
        elif n < search.max_affine_depth:
            # a wider beam found nothing new: this depth is exhausted
            n += 1
            before = -1
        else:
            break
    sigs = sorted(seen)
    if len(sigs) > target:
        # keep the identity and a reproducible sample of the rest
        rng = np.random.default_rng(int.from_bytes(hashlib.sha256(p.name.encode()).digest()[:8], "little"))
        head = [s for s in sigs if s == IDENTITY_SIGNATURE][:target]
        rest = [s for s in sigs if s != IDENTITY_SIGNATURE]
        keep = rng.choice(len(rest), target - len(head), replace=False).tolist()
        sigs = sorted(head + [rest[k] for k in keep])
    out = []
    for sig in sigs:
        sched, s = seen[sig]
        out.append(Datapoint(p.name, featurize(p, sched), sched, float(s), exec_cfg.mode))
    return out


def gen_dataset(programs: Iterable[ProgramIR], target: int = 60, search: SearchSettings | None = None,
                exec_cfg: ExecConfig | None = None) -> list[Datapoint]:
    search = search or SearchSettings()
    exec_cfg = exec_cfg or ExecConfig()
    records: list[Datapoint] = []
    for p in programs:
        try:
            records += label_program(p, target, search, exec_cfg)
        except Exception as e:  # a bad program never aborts the batch
            log.warning("skipping program %s: %s", p.name, e)
    return records


def header(cfg: GenConfig | None, exec_cfg: ExecConfig) -> dict:
    return {"format": FORMAT, "version": FORMAT_VERSION, "config_hash": cfg.digest() if cfg else None,
            "config": cfg.to_json() if cfg else None, "mode": exec_cfg.mode}


def _line(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def write_dataset(path, records: Sequence[Datapoint], head: dict) -> None:
    with open(path, "w") as f:
        f.write(_line(head) + "\n")
        for r in sorted(records, key=lambda r: r.pid):
            f.write(_line(r.to_json()) + "\n")


def read_dataset(path) -> tuple[dict, list[Datapoint]]:
    with open(path) as f:
        lines = [l for l in f.read().splitlines() if l.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty dataset file")
    try:
        head = json.loads(lines[0])
    except ValueError:
        raise DataFormatError(f"{path}: unreadable header line") from None
    if head.get("format") != FORMAT:
        raise DataFormatError(f"{path}: not a {FORMAT} file")
    if head.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"{path}: dataset version {head.get('version')}, expected {FORMAT_VERSION}")
    out = []
    for k, l in enumerate(lines[1:], start=2):
        try:
            out.append(Datapoint.from_json(json.loads(l)))
        except ValueError as e:
            raise DataFormatError(f"{path}:{k}: {e}") from None
    return head, out


def _worker(args) -> str:
    worker, docs, target, search, exec_cfg, shard_dir = args
    programs = [program_from_dict(d) for d in docs]
    recs = gen_dataset(programs, target, search, exec_cfg)
    path = os.path.join(shard_dir, f"shard-{worker}.jsonl")
    with open(path, "w") as f:
        for r in recs:
            f.write(_line(r.to_json()) + "\n")
    return path


def build_dataset(cfg: GenConfig, path, *, search: SearchSettings | None = None, exec_cfg: ExecConfig | None = None,
                  workers: int = 1, programs: Sequence[ProgramIR] | None = None) -> list[Datapoint]:
    """Generate programs, label them, and write the merged JSONL to ``path``.
    With ``workers > 1`` programs are distributed round-robin over worker
    processes writing ``shard-{worker}.jsonl`` files next to ``path``."""
    search = search or SearchSettings()
    exec_cfg = exec_cfg or ExecConfig()
    programs = list(programs) if programs is not None else gen_programs(cfg)
    target = cfg.schedules_per_program
    if workers <= 1:
        records = gen_dataset(programs, target, search, exec_cfg)
    else:
        shard_dir = os.path.dirname(os.path.abspath(path))
        jobs = [(w, [program_to_dict(p) for p in programs[w::workers]], target, search, exec_cfg, shard_dir)
                for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            shards = list(pool.map(_worker, jobs))
        records = []
        for s in shards:
            with open(s) as f:
                records += [Datapoint.from_json(json.loads(l)) for l in f if l.strip()]
    records.sort(key=lambda r: r.pid)
    write_dataset(path, records, header(cfg, exec_cfg))
    return records


def write_programs(path, programs: Sequence[ProgramIR]) -> None:
    with open(path, "w") as f:
        for p in programs:
            f.write(_line(program_to_dict(p)) + "\n")


def read_programs(path) -> list[ProgramIR]:
    with open(path) as f:
        return [program_from_dict(json.loads(l)) for l in f if l.strip()]


def split_dataset(records: Sequence[Datapoint], val_fraction: float = 0.1, seed: int = 0):
    """Program-disjoint (train, validation) partition."""
    tr, va = split_programs([r.pid for r in records], val_fraction, seed)
    return [r for r in records if r.pid in tr], [r for r in records if r.pid in va]
