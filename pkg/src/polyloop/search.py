"""Level-synchronous beam search over the candidate tree, plus an exhaustive
reference search over the same tree."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol

from .candidates import CandidateGenerator, GenConfig, SearchNode
from .dependence import compute_dependences
from .executor import ExecConfig, measure_speedup
from .ir import ProgramIR
from .transform import IDENTITY_SIGNATURE, ScheduleState

log = logging.getLogger(__name__)


class EvaluatorFailure(Exception):
    def __init__(self, msg: str, partial: "BeamResult | None" = None):
        super().__init__(msg)
        self.partial = partial


class Evaluator(Protocol):
    concurrent_safe: bool

    def __call__(self, p: ProgramIR, sched: ScheduleState, b: Mapping[str, int] | None) -> float: ...


class ExecEvaluator:
    """Speedup measured by the interpreter (timing runs are serialized)."""
    concurrent_safe = False

    def __init__(self, cfg: ExecConfig | None = None):
        self.cfg = cfg or ExecConfig()

    def __call__(self, p, sched, b=None) -> float:
        return measure_speedup(p, sched, b, self.cfg)


class ModelEvaluator:
    """Speedup predicted by the cost model."""
    concurrent_safe = True

    def __init__(self, weights):
        self.weights = weights

    def __call__(self, p, sched, b=None) -> float:
        from .cost_model import predict
        from .features import featurize

        return predict(self.weights, featurize(p, sched, b))


@dataclass
class BeamResult:
    best_schedule: ScheduleState
    best_score: float
    trace: list = field(default_factory=list)  # per level: [(signature, score)]
    stats: dict = field(default_factory=dict)

    def to_json(self, timing: bool = False) -> dict:
        stats = dict(self.stats)
        if not timing:
            stats.pop("wall_time_s", None)
        return {
            "best_schedule": self.best_schedule.to_json(),
            "best_score": self.best_score,
            "trace": [{"level": lvl, "nodes": [{"signature": s, "score": v} for s, v in nodes]} for lvl, nodes in self.trace],
            "stats": stats,
        }


class _Scorer:
    def __init__(self, p, evaluator, binding, threads):
        self.p, self.evaluator, self.binding = p, evaluator, binding
        self.threads = threads
        self.scores: dict[str, float] = {}
        self.evaluated = 0

    def score_all(self, nodes: list[SearchNode]) -> list[float]:
        todo = {}
        for n in nodes:
            sig = n.signature
            if sig not in self.scores and sig not in todo:
                todo[sig] = n.sched
        items = list(todo.items())
        if self.threads > 1 and getattr(self.evaluator, "concurrent_safe", False) and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                vals = list(pool.map(lambda it: self._one(it[1]), items))
        else:
            vals = [self._one(s) for _, s in items]
        for (sig, _), v in zip(items, vals):
            self.scores[sig] = v
        self.evaluated += len(items)
        return [self.scores[n.signature] for n in nodes]

    def _one(self, sched):
        v = float(self.evaluator(self.p, sched, self.binding))
        if not v > 0:
            raise ValueError(f"evaluator returned non-positive score {v}")
        return v


def _best(scores: Mapping[str, float]) -> tuple[str, float]:
    sig = min(scores, key=lambda s: (-scores[s], s))
    return sig, scores[sig]


def beam_search(p: ProgramIR, evaluator: Callable, K: int = 3, n: int = 2, b: Mapping[str, int] | None = None, *,
                deps=None, gen_cfg: GenConfig | None = None, threads: int = 1) -> BeamResult:
    if K < 1:
        raise ValueError("beam width must be at least 1")
    t0 = time.perf_counter()
    binding = p.resolve_binding(b)
    deps = compute_dependences(p, binding) if deps is None else deps
    gen = CandidateGenerator(p, deps, binding, replace(gen_cfg or GenConfig(), affine_depth=n))
    scorer = _Scorer(p, evaluator, binding, threads)
    by_sig: dict[str, ScheduleState] = {}
    trace: list = []
    stats = {"generated": 0, "pruned_visited": 0, "pruned_illegal": 0, "evaluated": 0}

    def result() -> BeamResult:
        stats["evaluated"] = scorer.evaluated
        stats["pruned_illegal"] = gen.illegal
        stats["wall_time_s"] = time.perf_counter() - t0
        if scorer.scores:
            sig, score = _best(scorer.scores)
            return BeamResult(by_sig[sig], score, trace, dict(stats))
        return BeamResult(ScheduleState(), float("nan"), trace, dict(stats))

    root = SearchNode(ScheduleState(), 0, None)
    by_sig[IDENTITY_SIGNATURE] = root.sched
    try:
        (s0,) = scorer.score_all([root])
        trace.append(("ROOT", [(IDENTITY_SIGNATURE, s0)]))
        beam = [root]
        visited = {(IDENTITY_SIGNATURE, 0)}
        while beam:
            children = []
            for node in beam:
                for ch in gen.children(node):
                    stats["generated"] += 1
                    key = (ch.signature, ch.level)
                    if key in visited:
                        stats["pruned_visited"] += 1
                        continue
                    visited.add(key)
                    children.append(ch)
            if not children:
                break
            vals = scorer.score_all(children)
            kind, k = gen.levels[children[0].level - 1]
            trace.append((f"{kind}{k}", [(c.signature, v) for c, v in zip(children, vals)]))
            for c in children:
                by_sig.setdefault(c.signature, c.sched)
            ranked = sorted(zip(children, vals), key=lambda cv: (-cv[1], cv[0].signature))
            beam = [c for c, _ in ranked[:K]]
    except Exception as e:
        partial = result()
        raise EvaluatorFailure(f"evaluation failed: {e}", partial) from e
    return result()


def exhaustive_search(p: ProgramIR, evaluator: Callable, n: int = 2, b: Mapping[str, int] | None = None, *,
                      deps=None, gen_cfg: GenConfig | None = None, max_nodes: int | None = None) -> BeamResult:
    """Evaluate every node of the candidate tree (depth-first)."""
    binding = p.resolve_binding(b)
    deps = compute_dependences(p, binding) if deps is None else deps
    gen = CandidateGenerator(p, deps, binding, replace(gen_cfg or GenConfig(), affine_depth=n))
    scores: dict[str, float] = {}
    by_sig: dict[str, ScheduleState] = {}
    visited = set()
    stack = [SearchNode(ScheduleState(), 0, None)]
    count = 0
    while stack:
        node = stack.pop()
        key = (node.signature, node.level)
        if key in visited:
            continue
        visited.add(key)
        count += 1
        if max_nodes is not None and count > max_nodes:
            raise ValueError(f"tree exceeds {max_nodes} nodes")
        sig = node.signature
        if sig not in scores:
            scores[sig] = float(evaluator(p, node.sched, binding))
            by_sig[sig] = node.sched
        stack.extend(reversed(gen.children(node)))
    sig, score = _best(scores)
    return BeamResult(by_sig[sig], score, [], {"nodes": count, "evaluated": len(scores)})


def tree_shape(p: ProgramIR, n: int = 2, b=None, *, deps=None, gen_cfg: GenConfig | None = None,
               max_nodes: int = 100_000) -> tuple[int, int]:
    """(node count, widest level) of the full candidate tree."""
    binding = p.resolve_binding(b)
    deps = compute_dependences(p, binding) if deps is None else deps
    gen = CandidateGenerator(p, deps, binding, replace(gen_cfg or GenConfig(), affine_depth=n))
    level = [SearchNode(ScheduleState(), 0, None)]
    visited = {(IDENTITY_SIGNATURE, 0)}
    total, width = 1, 1
    while level:
        nxt = []
        for node in level:
            for ch in gen.children(node):
                key = (ch.signature, ch.level)
                if key not in visited:
                    visited.add(key)
                    nxt.append(ch)
        total += len(nxt)
        width = max(width, len(nxt))
        if total > max_nodes:
            break
        level = nxt
    return total, width
