"""End-to-end flows shared by the command line and the acceptance tests."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

from .candidates import GenConfig
from .dependence import compute_dependences
from .executor import ExecConfig, measure_speedup
from .ir import ProgramIR
from .search import BeamResult, ExecEvaluator, ModelEvaluator, beam_search


@dataclass
class AutoscheduleResult:
    program: str
    evaluator: str
    result: BeamResult
    measured: float
    predicted: float | None
    wall_time_s: float

    def to_json(self, timing: bool = False) -> dict:
        out = {"program": self.program, "evaluator": self.evaluator, "measured_speedup": self.measured,
               "predicted_speedup": self.predicted, "search": self.result.to_json(timing)}
        if timing:
            out["wall_time_s"] = self.wall_time_s
        return out


def autoschedule(p: ProgramIR, *, evaluator: str = "exec", weights=None, beam: int = 3, affine_depth: int = 2,
                 exec_cfg: ExecConfig | None = None, b: Mapping[str, int] | None = None, deps=None,
                 gen_cfg: GenConfig | None = None, threads: int = 1) -> AutoscheduleResult:
    exec_cfg = exec_cfg or ExecConfig()
    deps = compute_dependences(p, b) if deps is None else deps
    if evaluator == "model":
        if weights is None:
            raise ValueError("the model evaluator needs weights")
        ev = ModelEvaluator(weights)
    elif evaluator == "exec":
        ev = ExecEvaluator(exec_cfg)
    else:
        raise ValueError(f"unknown evaluator {evaluator!r}")
    t0 = time.perf_counter()
    res = beam_search(p, ev, K=beam, n=affine_depth, b=b, deps=deps, gen_cfg=gen_cfg, threads=threads)
    wall = time.perf_counter() - t0
    if evaluator == "exec":
        measured, predicted = res.best_score, None
    else:
        measured, predicted = measure_speedup(p, res.best_schedule, b, exec_cfg), res.best_score
    return AutoscheduleResult(p.name, evaluator, res, float(measured), predicted, wall)


@dataclass
class CompareRow:
    program: str
    model_speedup: float
    exec_speedup: float
    ratio: float
    model_time_s: float
    exec_time_s: float

    @property
    def time_ratio(self) -> float:
        return self.exec_time_s / self.model_time_s if self.model_time_s > 0 else math.inf


def geomean(xs: Sequence[float]) -> float:
    return math.exp(sum(math.log(x) for x in xs) / len(xs)) if xs else float("nan")


def compare_programs(programs: Sequence[ProgramIR], weights, *, beam: int = 3, affine_depth: int = 2,
                     exec_cfg: ExecConfig | None = None, gen_cfg: GenConfig | None = None) -> list[CompareRow]:
    """Model-guided versus execution-guided search, program by program.  The
    model-guided pick is re-measured with the interpreter for the ratio."""
    exec_cfg = exec_cfg or ExecConfig()
    rows = []
    for p in programs:
        deps = compute_dependences(p)
        m = autoschedule(p, evaluator="model", weights=weights, beam=beam, affine_depth=affine_depth,
                         exec_cfg=exec_cfg, deps=deps, gen_cfg=gen_cfg)
        e = autoschedule(p, evaluator="exec", beam=beam, affine_depth=affine_depth, exec_cfg=exec_cfg,
                         deps=deps, gen_cfg=gen_cfg)
        rows.append(CompareRow(p.name, m.measured, e.measured, m.measured / e.measured, m.wall_time_s, e.wall_time_s))
    return rows


def compare_summary(rows: Sequence[CompareRow]) -> dict:
    ratios = [r.ratio for r in rows]
    times = [r.time_ratio for r in rows]
    return {
        "programs": len(rows),
        "geomean_ratio": geomean(ratios),
        "median_ratio": statistics.median(ratios) if ratios else float("nan"),
        "geomean_time_ratio": geomean(times),
    }
