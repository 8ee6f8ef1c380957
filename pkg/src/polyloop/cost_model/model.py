"""The recursive speedup model and its weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..features import (
    ACCESS_WIDTH,
    LOOP_WIDTH,
    MAX_ACCESSES,
    MAX_DEPTH,
    MAX_DOMAIN_ROWS,
    TAGS_WIDTH,
    TOKEN_WIDTH,
    TRANS_WIDTH,
    FeatureTree,
    LoopFeatureNode,
)
from . import autodiff as ad

VERSION = 1
STATIC_WIDTH = MAX_DOMAIN_ROWS * (MAX_DEPTH + 1) + MAX_ACCESSES * ACCESS_WIDTH + TAGS_WIDTH + MAX_ACCESSES + MAX_DOMAIN_ROWS

DEFAULT_DIMS = {"embed": 64, "hidden": 128, "fc": 180}


class EnvelopeExceeded(Exception):
    pass


@dataclass
class ModelWeights:
    dims: dict
    params: dict[str, np.ndarray]
    seed: int = 0
    version: int = VERSION

    def copy(self) -> "ModelWeights":
        return ModelWeights(dict(self.dims), {k: v.copy() for k, v in self.params.items()}, self.seed, self.version)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _shapes(dims: dict) -> dict[str, tuple[int, ...]]:
    e, h, f = dims["embed"], dims["hidden"], dims["fc"]
    out: dict[str, tuple[int, ...]] = {}

    def lstm(name, nin):
        out[f"{name}.W"] = (nin + h, 4 * h)
        out[f"{name}.b"] = (4 * h,)

    def mlp(name, nin, nout):
        widths = [nin, f, f, nout]
        for k in range(3):
            out[f"{name}.{k}.W"] = (widths[k], widths[k + 1])
            out[f"{name}.{k}.b"] = (widths[k + 1],)

    lstm("affine_lstm", TRANS_WIDTH)
    lstm("expr_lstm", TOKEN_WIDTH)
    mlp("comp_fc", STATIC_WIDTH + 2 * h, e)
    lstm("loop_lstm_loops", e)
    lstm("loop_lstm_comps", e)
    mlp("loop_fc", 2 * h + LOOP_WIDTH, e)
    lstm("roots_lstm", e)
    mlp("regress_fc", h, 1)
    return out


def init_weights(seed: int = 0, dims: dict | None = None) -> ModelWeights:
    dims = dict(DEFAULT_DIMS if dims is None else dims)
    rng = np.random.default_rng(seed)
    params = {}
    h = dims["hidden"]
    for name, shape in _shapes(dims).items():
        if name.endswith(".W"):
            # Glorot for the recurrent cells, He for the ELU stacks
            fan = shape[0] + shape[1] if "lstm" in name else shape[0]
            lim = np.sqrt(6.0 / fan)
            params[name] = rng.uniform(-lim, lim, size=shape)
        else:
            b = np.zeros(shape)
            if "lstm" in name:
                b[h: 2 * h] = 1.0  # forget gate
            params[name] = b
    # start with near-zero predictions
    params["regress_fc.2.b"][:] = -5.0
    for k in params:
        params[k] = params[k].astype(np.float32).astype(np.float64)
    return ModelWeights(dims, params, seed)


# -- input tensors --------------------------------------------------------------

def _slog(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def static_vector(c) -> np.ndarray:
    d = c.padded()
    return np.concatenate([
        _slog(d["domain"]).ravel(), _slog(d["access"]).ravel(), _slog(c.tags_vec),
        d["access_mask"], d["domain_mask"],
    ])


def loop_vector(n: LoopFeatureNode) -> np.ndarray:
    return _slog(n.features)


def tree_key(t: FeatureTree) -> tuple:
    return (len(t.comps),) + t.shape_key()


class SeqTable:
    """Deduplicated variable-length sequences, padded on demand."""

    def __init__(self, width: int):
        self.width = width
        self.index: dict[tuple, int] = {}
        self.seqs: list[np.ndarray] = []

    def add(self, seq) -> int:
        key = tuple(tuple(float(v) for v in s) for s in seq)
        k = self.index.get(key)
        if k is None:
            k = len(self.seqs)
            self.index[key] = k
            self.seqs.append(np.asarray(seq, dtype=np.float64).reshape(len(seq), self.width))
        return k

    def batch(self, ids) -> tuple[list[np.ndarray], list[np.ndarray]]:
        seqs = [self.seqs[i] for i in ids]
        steps = max((s.shape[0] for s in seqs), default=0)
        xs, masks = [], []
        for t in range(steps):
            x = np.zeros((len(seqs), self.width))
            m = np.zeros(len(seqs))
            for r, s in enumerate(seqs):
                if t < s.shape[0]:
                    x[r] = s[t]
                    m[r] = 1.0
            xs.append(x)
            masks.append(m)
        return xs, masks


@dataclass
class Encoded:
    """A featurized tree reduced to arrays and sequence-table ids."""
    key: tuple
    static: np.ndarray          # (C, STATIC_WIDTH)
    expr_ids: list[int]
    trans_ids: list[int]
    loops: list                 # per loop node in pre-order: (feature vec)
    structure: tuple = field(default=())


def _structure(roots) -> tuple:
    """Nested description of the tree with pre-order loop numbers."""
    counter = [0]

    def walk(n: LoopFeatureNode):
        k = counter[0]
        counter[0] += 1
        return ("loop", k, tuple(walk(l) for l in n.loops), tuple(n.comps))

    return tuple(walk(r) if isinstance(r, LoopFeatureNode) else ("comp", r) for r in roots)


def _loop_feats(roots) -> list[np.ndarray]:
    out = []

    def walk(n):
        out.append(loop_vector(n))
        for l in n.loops:
            walk(l)

    for r in roots:
        if isinstance(r, LoopFeatureNode):
            walk(r)
    return out


def encode(t: FeatureTree, expr_table: SeqTable, trans_table: SeqTable) -> Encoded:
    static = np.stack([static_vector(c) for c in t.comps]) if t.comps else np.zeros((0, STATIC_WIDTH))
    return Encoded(
        tree_key(t), static,
        [expr_table.add(c.expr_tokens) for c in t.comps],
        [trans_table.add(c.trans_vectors) if c.trans_vectors else -1 for c in t.comps],
        _loop_feats(t.roots), _structure(t.roots),
    )


# -- forward pass -----------------------------------------------------------------

class Net:
    """Parameters wrapped as autodiff leaves."""

    def __init__(self, w: ModelWeights):
        self.w = w
        self.p = {k: ad.param(v) for k, v in w.params.items()}
        self.h = w.dims["hidden"]

    def lstm(self, name: str, xs: list, masks: list, n: int) -> ad.Tensor:
        hc = ad.const(np.zeros((n, 2 * self.h)))
        wt, bt = self.p[f"{name}.W"], self.p[f"{name}.b"]
        for x, m in zip(xs, masks):
            x = x if isinstance(x, ad.Tensor) else ad.const(x)
            new = ad.lstm_cell(x, hc, wt, bt)
            hc = new if m is None else ad.blend(m, new, hc)
        return ad.cols(hc, 0, self.h)

    def mlp(self, name: str, x: ad.Tensor, final_act: bool = False) -> ad.Tensor:
        for k in range(3):
            x = ad.linear(x, self.p[f"{name}.{k}.W"], self.p[f"{name}.{k}.b"])
            if k < 2 or final_act:
                x = ad.elu(x)
        return x

    def forward(self, batch: list[Encoded], expr_table: SeqTable, trans_table: SeqTable) -> ad.Tensor:
        """Predicted speedups (B, 1) for a batch of same-shaped trees."""
        B = len(batch)
        C = batch[0].static.shape[0]
        if any(e.key != batch[0].key for e in batch):
            raise ValueError("batch mixes tree shapes")
        comp_emb = None
        if C:
            # expression and affine encoders run once per distinct sequence
            e_ids = [e.expr_ids[c] for e in batch for c in range(C)]
            uniq_e, inv_e = np.unique(e_ids, return_inverse=True)
            xs, ms = expr_table.batch(uniq_e.tolist())
            expr_emb = ad.rows(self.lstm("expr_lstm", xs, ms, len(uniq_e)), inv_e.reshape(-1))
            t_ids = [e.trans_ids[c] for e in batch for c in range(C)]
            present = sorted({i for i in t_ids if i >= 0})
            if present:
                xs, ms = trans_table.batch(present)
                enc = self.lstm("affine_lstm", xs, ms, len(present))
                zero = ad.const(np.zeros((1, self.h)))
                table = ad.concat_rows([zero, enc])
                pos = {i: k + 1 for k, i in enumerate(present)}
                idx = [pos.get(i, 0) for i in t_ids]
                aff_emb = ad.rows(table, idx)
            else:
                aff_emb = ad.const(np.zeros((B * C, self.h)))
            static = ad.const(np.concatenate([e.static for e in batch], axis=0))
            comp_emb = self.mlp("comp_fc", ad.concat([static, aff_emb, expr_emb]))

        def comp_rows(c):
            return ad.rows(comp_emb, np.arange(B) * C + c)

        loop_feats = [np.stack(fs) for fs in zip(*[e.loops for e in batch])] if batch[0].loops else []

        def loop(node) -> ad.Tensor:
            _, k, loops, comps = node
            if comps:
                hc = self.lstm("loop_lstm_comps", [comp_rows(c) for c in comps], [None] * len(comps), B)
            else:
                hc = ad.const(np.zeros((B, self.h)))
            if loops:
                hl = self.lstm("loop_lstm_loops", [loop(l) for l in loops], [None] * len(loops), B)
            else:
                hl = ad.const(np.zeros((B, self.h)))
            return self.mlp("loop_fc", ad.concat([hc, hl, ad.const(loop_feats[k])]))

        roots = [loop(r) if r[0] == "loop" else comp_rows(r[1]) for r in batch[0].structure]
        hr = self.lstm("roots_lstm", roots, [None] * len(roots), B)
        return ad.softplus(self.mlp("regress_fc", hr))
