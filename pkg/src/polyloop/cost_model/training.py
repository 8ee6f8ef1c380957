"""Inference, MAPE training with Adam, metrics and gradient checking."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from ..features import (
    MAX_ACCESSES,
    MAX_ACTIONS,
    MAX_DEPTH,
    MAX_EXPR,
    TOKEN_WIDTH,
    TRANS_WIDTH,
    FeatureTree,
)
from . import autodiff as ad
from .model import DEFAULT_DIMS, Encoded, EnvelopeExceeded, ModelWeights, Net, SeqTable, encode, init_weights

log = logging.getLogger(__name__)


class NonPositiveTarget(ValueError):
    pass


class DataFormatError(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    def __init__(self, msg: str, last_good: ModelWeights, history: list):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


class EmptyGroup(ValueError):
    pass


# -- inference ------------------------------------------------------------------

def _check_envelope(t: FeatureTree) -> None:
    for c in t.comps:
        if c.depth > MAX_DEPTH or len(c.access_mats) > MAX_ACCESSES or len(c.expr_tokens) > MAX_EXPR \
                or len(c.trans_vectors) > MAX_ACTIONS:
            raise EnvelopeExceeded(f"computation {c.name} is outside the model input envelope")


def predict_many(w: ModelWeights, trees: Sequence[FeatureTree]) -> np.ndarray:
    if not trees:
        return np.zeros(0)
    for t in trees:
        _check_envelope(t)
    et, tt = SeqTable(TOKEN_WIDTH), SeqTable(TRANS_WIDTH)
    enc = [encode(t, et, tt) for t in trees]
    net = Net(w)
    out = np.zeros(len(trees))
    for idx in _group(enc):
        out[idx] = net.forward([enc[i] for i in idx], et, tt).data[:, 0]
    return out


def predict(w: ModelWeights, t: FeatureTree) -> float:
    return float(predict_many(w, [t])[0])


def _group(enc: Sequence[Encoded]) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, e in enumerate(enc):
        groups.setdefault(e.key, []).append(i)
    return [groups[k] for k in sorted(groups, key=repr)]


# -- loss and metrics -------------------------------------------------------------

def mape_loss(pred: Sequence[float], target: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("prediction and target lengths differ")
    if t.size == 0:
        raise ValueError("empty batch")
    if (t <= 0).any():
        raise NonPositiveTarget("targets must be strictly positive")
    return float(np.mean(np.abs(p - t) / t))


def ndcg(pred: Sequence[float], target: Sequence[float]) -> float:
    """nDCG with linear gain (relevance = measured speedup) and log2 discount."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if t.size == 0:
        raise EmptyGroup("nDCG of an empty group")
    disc = 1.0 / np.log2(np.arange(2, t.size + 2))
    order = np.lexsort((np.arange(p.size), -p))
    dcg = float(np.sum(t[order] * disc))
    idcg = float(np.sum(np.sort(t)[::-1] * disc))
    return dcg / idcg if idcg > 0 else 1.0


def metrics(pred: Sequence[float], target: Sequence[float], groups: Sequence) -> dict:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if t.size == 0:
        raise EmptyGroup("no datapoints to evaluate")
    g = np.asarray(groups)
    if t.size > 1 and np.ptp(p) > 0 and np.ptp(t) > 0:
        rho = float(spearmanr(p, t).statistic)
    else:
        rho = 1.0 if np.array_equal(np.argsort(p, kind="stable"), np.argsort(t, kind="stable")) else 0.0
    scores = [ndcg(p[g == k], t[g == k]) for k in sorted(set(g.tolist()))]
    return {"mape": mape_loss(p, t), "spearman": rho, "ndcg": float(np.mean(scores))}


def evaluate(w: ModelWeights, data: Sequence) -> dict:
    """``data`` holds (program id, FeatureTree, measured speedup) triples."""
    if not data:
        raise EmptyGroup("no datapoints to evaluate")
    pred = predict_many(w, [d[1] for d in data])
    return metrics(pred, [d[2] for d in data], [d[0] for d in data])


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    lr_schedule: str = "cosine"  # or "constant"
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    val_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def split_programs(pids: Sequence, val_fraction: float, seed: int) -> tuple[set, set]:
    """Program-disjoint train/validation split."""
    uniq = sorted(set(pids))
    if len(uniq) < 2 and val_fraction > 0:
        raise DataFormatError("a program-disjoint split needs at least two programs")
    rng = np.random.default_rng(seed)
    perm = [uniq[i] for i in rng.permutation(len(uniq))]
    n_val = max(1, int(round(len(uniq) * val_fraction))) if val_fraction > 0 else 0
    return set(perm[n_val:]), set(perm[:n_val])


class _Adam:
    def __init__(self, cfg: TrainConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        c = self.cfg
        self.t += 1
        b1t = 1 - c.beta1 ** self.t
        b2t = 1 - c.beta2 ** self.t
        for k in sorted(params):
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] -= lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.eps)


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


def _batches(idx: list[int], enc: Sequence[Encoded], size: int, rng) -> list[list[int]]:
    by_key: dict[tuple, list[int]] = {}
    for i in idx:
        by_key.setdefault(enc[i].key, []).append(i)
    out = []
    for k in sorted(by_key, key=repr):
        members = by_key[k]
        members = [members[j] for j in rng.permutation(len(members))]
        out += [members[s: s + size] for s in range(0, len(members), size)]
    return [out[j] for j in rng.permutation(len(out))]


def _round32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def train(cfg: TrainConfig, data: Sequence, init: ModelWeights | None = None, *,
          split: tuple[set, set] | None = None, on_epoch=None) -> tuple[ModelWeights, list[dict]]:
    """Train on (pid, FeatureTree, speedup) triples.  Returns weights and a
    per-epoch history of train/validation MAPE.  ``on_epoch(record, weights)``
    may return True to stop after the current epoch."""
    if not data:
        raise DataFormatError("empty dataset")
    for d in data:
        if len(d) != 3 or not isinstance(d[1], FeatureTree):
            raise DataFormatError("datapoints must be (pid, FeatureTree, speedup)")
        if not d[2] > 0:
            raise NonPositiveTarget(f"non-positive speedup {d[2]} for program {d[0]}")
    w = init.copy() if init is not None else init_weights(cfg.seed, cfg.dims)
    if cfg.epochs == 0:
        return w, []
    train_ids, val_ids = split if split is not None else split_programs([d[0] for d in data], cfg.val_fraction, cfg.seed)
    et, tt = SeqTable(TOKEN_WIDTH), SeqTable(TRANS_WIDTH)
    enc = [encode(d[1], et, tt) for d in data]
    target = np.array([d[2] for d in data], dtype=np.float64)
    tr = [i for i, d in enumerate(data) if d[0] in train_ids]
    va = [i for i, d in enumerate(data) if d[0] in val_ids]
    rng = np.random.default_rng(cfg.seed + 1)
    opt = _Adam(cfg, w.params)
    history: list[dict] = []
    last_good = w.copy()
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        total, count = 0.0, 0
        for b in _batches(tr, enc, cfg.batch_size, rng):
            net = Net(w)
            loss = ad.mape(net.forward([enc[i] for i in b], et, tt), target[b])
            if not math.isfinite(float(loss.data)):
                raise DivergenceDetected(f"loss became {float(loss.data)} at epoch {epoch}", last_good, history)
            ad.backward(loss)
            opt.step(w.params, {k: t.grad for k, t in net.p.items() if t.grad is not None}, lr)
            total += float(loss.data) * len(b)
            count += len(b)
        if not all(np.isfinite(v).all() for v in w.params.values()):
            raise DivergenceDetected(f"non-finite weights at epoch {epoch}", last_good, history)
        last_good = w.copy()
        rec = {"epoch": epoch + 1, "train_mape": total / max(count, 1)}
        if va:
            pv = _predict_encoded(w, enc, va, et, tt)
            rec["val_mape"] = float(np.mean(np.abs(pv - target[va]) / target[va]))
        history.append(rec)
        log.info("epoch %d train %.4f val %s", epoch + 1, rec["train_mape"], rec.get("val_mape"))
        if on_epoch is not None and on_epoch(rec, w):
            break
    w.params = _round32(w.params)
    return w, history


def _predict_encoded(w, enc, idx, et, tt) -> np.ndarray:
    net = Net(w)
    out = np.zeros(len(idx))
    pos = {i: k for k, i in enumerate(idx)}
    for g in _group([enc[i] for i in idx]):
        members = [idx[j] for j in g]
        vals = net.forward([enc[i] for i in members], et, tt).data[:, 0]
        for i, v in zip(members, vals):
            out[pos[i]] = v
    return out


# -- gradient check -----------------------------------------------------------------

def loss_and_grads(w: ModelWeights, t: FeatureTree, target: float) -> tuple[float, dict[str, np.ndarray]]:
    et, tt = SeqTable(TOKEN_WIDTH), SeqTable(TRANS_WIDTH)
    e = encode(t, et, tt)
    net = Net(w)
    loss = ad.mape(net.forward([e], et, tt), np.array([target]))
    ad.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in net.p.items()}
    return float(loss.data), grads


def _loss_only(w, t, target) -> float:
    return abs(predict(w, t) - target) / target


def grad_check(w: ModelWeights, t: FeatureTree, target: float, *, n_coords: int = 200, step: float = 1e-5,
               seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients
    of the MAPE loss over a random sample of parameter coordinates."""
    _, grads = loss_and_grads(w, t, target)
    names = sorted(w.params)
    sizes = np.array([w.params[k].size for k in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.r_[0, np.cumsum(sizes)]
    worst = 0.0
    probe = w.copy()
    for f in np.sort(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name, j = names[k], int(f - offsets[k])
        arr = probe.params[name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + step
        up = _loss_only(probe, t, target)
        arr[j] = orig - step
        down = _loss_only(probe, t, target)
        arr[j] = orig
        num = (up - down) / (2 * step)
        ana = float(grads[name].reshape(-1)[j])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
