import json

import numpy as np
import pytest

from helpers import chain, jacobi, random_program, triangular
from polyloop.executor import ExecConfig
from polyloop.search import (
    EvaluatorFailure,
    ExecEvaluator,
    beam_search,
    exhaustive_search,
    tree_shape,
)
from polyloop.transform import IDENTITY_SIGNATURE

EXEC = ExecEvaluator(ExecConfig(threads=4))


def test_wide_beam_equals_exhaustive():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(40):
        p = random_program(rng)
        total, width = tree_shape(p, 1)
        if total > 200:
            continue
        ex = exhaustive_search(p, EXEC, n=1)
        bs = beam_search(p, EXEC, K=width, n=1)
        assert bs.best_score == ex.best_score
        assert bs.stats["evaluated"] == ex.stats["evaluated"]
        checked += 1
    assert checked >= 10


def test_identity_floor_on_sequential_chain():
    # extents below every unroll factor, no parallel loop, nothing to fuse
    res = beam_search(chain(3), EXEC, K=3)
    assert res.best_schedule.is_identity()
    assert res.best_score == 1.0


def test_beam_keeps_at_most_k_survivors():
    p = jacobi(8, 10)
    res = beam_search(p, EXEC, K=3)
    assert res.trace[0] == ("ROOT", [(IDENTITY_SIGNATURE, 1.0)])
    parents = [IDENTITY_SIGNATURE]
    for level, nodes in res.trace[1:]:
        # children come from at most K beam parents; the no-op child of each
        # parent carries the parent's signature
        assert len({s for s, _ in nodes} & set(parents)) <= 3
        ranked = sorted(nodes, key=lambda sv: (-sv[1], sv[0]))
        parents = [s for s, _ in ranked[:3]]
    assert res.best_score == max(v for _, nodes in res.trace for _, v in nodes)
    assert res.best_score >= 1.0


def test_monotone_in_beam_width():
    p = triangular(40)
    ex = exhaustive_search(p, EXEC, n=1)
    scores = [beam_search(p, EXEC, K=k, n=1).best_score for k in (1, 3, 8)]
    assert all(s <= ex.best_score for s in scores)
    assert scores[-1] >= scores[0]


def test_deterministic_trace():
    p = jacobi(8, 10)
    a = json.dumps(beam_search(p, EXEC, K=3).to_json(), sort_keys=True)
    b = json.dumps(beam_search(p, EXEC, K=3).to_json(), sort_keys=True)
    assert a == b


def test_threaded_scoring_is_deterministic():
    from polyloop.search import ModelEvaluator
    from polyloop.cost_model import init_weights

    ev = ModelEvaluator(init_weights(0))
    p = jacobi(6, 8)
    a = beam_search(p, ev, K=3, threads=1).to_json()
    b = beam_search(p, ev, K=3, threads=4).to_json()
    assert a == b


def test_evaluator_failure_keeps_partial_trace():
    calls = []

    def bad(p, s, b):
        calls.append(1)
        if len(calls) > 3:
            raise RuntimeError("boom")
        return 1.0

    with pytest.raises(EvaluatorFailure) as ei:
        beam_search(jacobi(6, 8), bad, K=3)
    assert ei.value.partial is not None
    assert ei.value.partial.trace[0][0] == "ROOT"


def test_invalid_beam_width():
    with pytest.raises(ValueError):
        beam_search(chain(4), EXEC, K=0)
