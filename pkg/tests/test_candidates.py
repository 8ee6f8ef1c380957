import math

import numpy as np
import pytest

from helpers import chain, jacobi, oracle_legal, pointwise2, prog, random_program
from polyloop.candidates import (
    AFFINE,
    DONE,
    FUSION,
    PARALLEL,
    TILE,
    UNROLL,
    CandidateGenerator,
    GenConfig,
    NoValidSkew,
    SearchNode,
    level_sequence,
    skew_params,
    skew_params_from_distances,
)
from polyloop.dependence import compute_dependences, is_legal
from polyloop.transform import AffineAction, ScheduleState, canonical_signature


def gen(p, **kw):
    return CandidateGenerator(p, compute_dependences(p), cfg=GenConfig(**kw) if kw else None)


def shifted_pair(n=8, off=1):
    """S1 reads B[i + off] produced by S0 at iteration i + off."""
    box = [[1, 0], [-1, n - 1]]
    return prog({"buffers": [{"name": "A", "dims": [n + 2]}, {"name": "B", "dims": [n + 2]}, {"name": "C", "dims": [n + 2]}],
                 "computations": [
                     {"name": "S0", "iterators": ["i"], "domain": box, "write": {"buffer": "B", "map": [[1, 0]]},
                      "expr": {"op": "load", "buffer": "A", "map": [[1, 0]]}},
                     {"name": "S1", "iterators": ["i"], "domain": box, "write": {"buffer": "C", "map": [[1, 0]]},
                      "expr": {"op": "load", "buffer": "B", "map": [[1, off]]}}]})


def box2(n, m):
    return prog({"buffers": [{"name": "A", "dims": [n, m]}], "computations": [{
        "name": "S0", "iterators": ["i", "j"], "domain": [[1, 0, 0], [-1, 0, n - 1], [0, 1, 0], [0, -1, m - 1]],
        "write": {"buffer": "A", "map": [[1, 0, 0], [0, 1, 0]]}, "expr": {"op": "constant", "value": 1.0}}]})


def test_fusion_of_independent_nests():
    p = pointwise2(6, 6)
    g = gen(p)
    kids = g.children(SearchNode(ScheduleState(), 0))
    depths = sorted(k.sched.fusion.get("S1", 0) for k in kids)
    assert depths == [0, 1, 2]
    assert all(oracle_legal(p, k.sched) for k in kids)


def test_fusion_repaired_with_minimal_shift():
    p = shifted_pair()
    g = gen(p)
    (d,) = g.deps
    assert d.distance == (-1,)
    fused = g.gen_fusion(ScheduleState())
    assert len(fused) == 1
    assert fused[0].fusion == {"S1": 1}
    assert fused[0].seq("S1") == (AffineAction.shift(0, 1),)
    assert oracle_legal(p, fused[0])
    assert not oracle_legal(p, ScheduleState().with_fusion({"S1": 1}))


def test_shift_cap_prunes_fusion():
    assert gen(shifted_pair(off=3), shift_cap=2).gen_fusion(ScheduleState()) == []
    assert len(gen(shifted_pair(off=3), shift_cap=3).gen_fusion(ScheduleState())) == 1


def test_single_nest_only_noop_fusion():
    g = gen(jacobi())
    assert g.gen_fusion(ScheduleState()) == []
    kids = g.children(SearchNode(ScheduleState(), 0))
    assert len(kids) == 1 and kids[0].sched.is_identity()


def test_affine_counts_depth2():
    p = box2(8, 8)
    g = gen(p)
    kids = g.gen_affine(ScheduleState())
    kinds = [k.seq("S0")[0].kind for k in kids]
    # no dependences: one interchange, two reversals, the default skew
    assert kinds.count("interchange") == 1
    assert kinds.count("reversal") == 2
    assert kinds.count("skew2") == len(skew_params([], (0, 1))) == 1
    assert len(g.children(SearchNode(ScheduleState(), 1))) == len(kids) + 1


def test_affine_depth1_only_reversal():
    g = gen(pointwise_line := prog({"buffers": [{"name": "A", "dims": [4]}], "computations": [{
        "name": "S0", "iterators": ["i"], "domain": [[1, 0], [-1, 3]],
        "write": {"buffer": "A", "map": [[1, 0]]}, "expr": {"op": "constant", "value": 1.0}}]}))
    assert [k.seq("S0") for k in g.gen_affine(ScheduleState())] == [(AffineAction.reversal(0),)]
    assert pointwise_line.computations[0].depth == 1


def test_affine_exhausted_after_n_levels():
    p = jacobi()
    g = gen(p, affine_depth=2)
    levels = level_sequence(p, 2)
    assert levels[:3] == [(FUSION, 0), (AFFINE, 1), (AFFINE, 2)]
    assert levels[3:] == [(PARALLEL, 0), (TILE, 0), (UNROLL, 0), (DONE, 0)]
    assert g.children(SearchNode(ScheduleState(), len(levels) - 1)) == []


def test_affine_children_are_legal_and_distinct():
    rng = np.random.default_rng(0)
    for _ in range(30):
        p = random_program(rng)
        g = gen(p)
        node = SearchNode(ScheduleState(), 1)
        kids = g.children(node)
        sigs = [k.signature for k in kids]
        assert len(set(sigs)) == len(sigs)
        assert kids[0].sched.is_identity()
        assert all(is_legal(g.deps, k.sched, p) for k in kids)
        for k in kids[1:]:
            assert sum(len(k.sched.seq(c.name)) for c in p.computations) >= 1


def _check_tuples(dists, levels, tuples):
    for f in tuples:
        assert math.gcd(*f) == 1 and f[0] >= 1 and abs(f[-1]) == 1
        for d in dists:
            assert np.dot(f, [d[l] for l in levels]) >= 0


def test_skew_params_jacobi():
    p = jacobi()
    deps = compute_dependences(p)
    tuples = skew_params(deps, (0, 1))
    assert (1, 1) in tuples and len(tuples) <= 8
    _check_tuples([(1, 1), (1, -1)], (0, 1), tuples)
    # (1, 1) makes every transformed inner distance non-negative
    assert all(np.dot((1, 1), d) >= 0 for d in [(1, 1), (1, -1)])


def test_skew_params_no_deps_and_inner_distance():
    assert skew_params([], (0, 1)) == [(1, 1)]
    tuples = skew_params_from_distances([(0, 1)], (0, 1))
    assert (1, 1) in tuples and all(f[0] >= 1 for f in tuples)
    _check_tuples([(0, 1)], (0, 1), tuples)


def test_skew_params_random_properties():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(2, 4))
        dists = [tuple(int(v) for v in rng.integers(-2, 3, size=k)) for _ in range(int(rng.integers(1, 4)))]
        dists = [d for d in dists if any(d) and next(v for v in d if v) > 0]
        try:
            tuples = skew_params_from_distances(dists, tuple(range(k)))
        except NoValidSkew:
            continue
        _check_tuples(dists, tuple(range(k)), tuples)


def test_no_valid_skew():
    with pytest.raises(NoValidSkew):
        skew_params_from_distances([(0, 1), (0, -1)], (0, 1))


def test_final_parallel_candidates():
    g = gen(box2(64, 64))
    par = g.gen_final(ScheduleState(), PARALLEL, 0)
    assert sorted(s.tag("S0").parallel for s in par) == [0, 1]
    p = jacobi()
    g = gen(p)
    skewed = ScheduleState().with_action(["S0"], AffineAction.skew2(0, 1, 1, 1))
    assert [s.tag("S0").parallel for s in g.gen_final(skewed, PARALLEL, 0)] == [1]


def test_final_tile_and_unroll_pruning():
    g = gen(box2(16, 16))
    assert g.gen_final(ScheduleState(), TILE, 0) == []
    assert sorted(s.tag("S0").unroll for s in g.gen_final(ScheduleState(), UNROLL, 0)) == [4, 8, 16]
    g = gen(box2(64, 64))
    assert sorted(s.tag("S0").tile.factors for s in g.gen_final(ScheduleState(), TILE, 0)) == [(32, 32), (64, 64)]


def test_sequential_chain_has_no_parallel_candidate():
    assert gen(chain(8)).gen_final(ScheduleState(), PARALLEL, 0) == []


def test_no_child_repeats_an_ancestor():
    p = jacobi(6, 8)
    g = gen(p)
    frontier = [SearchNode(ScheduleState(), 0)]
    seen_paths = {frontier[0].signature: set()}
    while frontier:
        nxt = []
        for node in frontier[:20]:
            anc = seen_paths.get(node.signature, set()) | {node.signature}
            for k in g.children(node)[1:]:
                assert k.signature not in anc
                seen_paths[k.signature] = anc
                nxt.append(k)
        frontier = nxt
