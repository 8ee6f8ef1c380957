import json

import numpy as np
import pytest

from helpers import jacobi, pointwise2, prog, random_program, random_schedule, triangular
from polyloop.features import (
    MAX_ACTIONS,
    FeatureTree,
    LimitExceeded,
    LoopFeatureNode,
    featurize,
    trans_vector,
)
from polyloop.transform import ACTION_KINDS, AffineAction, ScheduleState, Tile, canonical_signature


def _tree_json(t):
    return json.dumps(t.to_json(), sort_keys=True)


def test_triangular_domain_vec():
    c = featurize(triangular(4), ScheduleState()).comps[0]
    assert c.domain_shape == (4, 3)
    assert np.array(c.domain_vec).reshape(4, 3).tolist() == [[1, 0, 0], [-1, 0, 3], [0, 1, 0], [1, -1, -1]]


def test_empty_schedule_has_no_transformation_content():
    t = featurize(pointwise2(4, 4), ScheduleState())
    assert all(c.trans_vectors == [] and not any(c.tags_vec) for c in t.comps)
    assert not t.has_transformations()


def test_action_order_preserved():
    seq = [AffineAction.interchange(0, 1), AffineAction.skew2(0, 1, 1, 1)]
    s = ScheduleState()
    for a in seq:
        s = s.with_action(["S0"], a)
    tv = featurize(jacobi(), s).comps[0].trans_vectors
    assert tv == [trans_vector(a) for a in seq]
    kinds = [int(np.argmax(v[: len(ACTION_KINDS)])) for v in tv]
    assert kinds == [ACTION_KINDS.index("interchange"), ACTION_KINDS.index("skew2")]


def test_domain_is_the_original_domain():
    p = jacobi()
    s = ScheduleState().with_action(["S0"], AffineAction.skew2(0, 1, 1, 1))
    assert featurize(p, s).comps[0].domain_vec == featurize(p, ScheduleState()).comps[0].domain_vec


def test_loop_features_reflect_tags():
    p = pointwise2(64, 64, shared=2)
    s = ScheduleState().with_tags(["S0", "S1"], parallel=0, tile=Tile((0, 1), (32, 32)), unroll=4)
    t = featurize(p, s)
    (root,) = t.roots
    assert root.features[:8] == [64.0, 0.0, 1.0, 1.0, 32.0, 2.0, 0.0, 0.0]
    (inner,) = root.loops
    assert inner.comps == [0, 1]
    assert inner.features[6:] == [1.0, 4.0]
    assert t.has_transformations()


def test_tree_shape_mirrors_fusion():
    p = pointwise2(4, 4)
    assert len(featurize(p, ScheduleState()).roots) == 2
    assert len(featurize(p, ScheduleState().with_fusion({"S1": 1})).roots) == 1


def test_injective_over_random_pairs():
    rng = np.random.default_rng(0)
    pairs = 0
    while pairs < 500:
        p = random_program(rng)
        a, b = random_schedule(rng, p), random_schedule(rng, p)
        if canonical_signature(a) == canonical_signature(b):
            continue
        try:
            fa, fb = featurize(p, a), featurize(p, b)
        except LimitExceeded:
            continue
        assert _tree_json(fa) != _tree_json(fb)
        pairs += 1


def test_json_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = random_program(rng)
        t = featurize(p, random_schedule(rng, p))
        assert _tree_json(FeatureTree.from_json(json.loads(_tree_json(t)))) == _tree_json(t)


def test_padding_masks():
    c = featurize(jacobi(), ScheduleState()).comps[0]
    d = c.padded()
    assert d["access_mask"].sum() == 3
    assert d["domain_mask"].sum() == 4
    assert not d["access"][3:].any() and not d["domain"][4:].any()


def test_limits():
    s = ScheduleState()
    for _ in range(MAX_ACTIONS + 1):
        s = s.with_action(["S0"], AffineAction.reversal(0))
    with pytest.raises(LimitExceeded, match="affine actions"):
        featurize(jacobi(), s)
    deep = prog({"buffers": [{"name": "A", "dims": []}], "computations": [{
        "name": "S0", "iterators": [f"i{k}" for k in range(6)],
        "domain": [[int(k == j) for j in range(6)] + [0] for k in range(6)]
                  + [[-int(k == j) for j in range(6)] + [1] for k in range(6)],
        "write": {"buffer": "A", "map": []}, "expr": {"op": "constant", "value": 1.0}}]})
    with pytest.raises(LimitExceeded, match="depth"):
        featurize(deep, ScheduleState())
    expr = {"op": "constant", "value": 1.0}
    for _ in range(40):
        expr = {"op": "add", "args": [expr, {"op": "constant", "value": 1.0}]}
    big = prog({"buffers": [{"name": "A", "dims": []}], "computations": [{
        "name": "S0", "iterators": [], "domain": [], "write": {"buffer": "A", "map": []}, "expr": expr}]})
    with pytest.raises(LimitExceeded, match="expression tokens"):
        featurize(big, ScheduleState())


def test_loop_free_computation_is_a_root_leaf():
    p = prog({"buffers": [{"name": "A", "dims": []}], "computations": [{
        "name": "S0", "iterators": [], "domain": [], "write": {"buffer": "A", "map": []},
        "expr": {"op": "constant", "value": 2.0}}]})
    t = featurize(p, ScheduleState())
    assert t.roots == [0]
    assert not any(isinstance(r, LoopFeatureNode) for r in t.roots)
