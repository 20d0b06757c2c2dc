"""Segment-level process reward model.

A bias-free two-layer SiLU head reads the encoder state at the last action
token of each segment; training fits the sum of segment scores to the
trajectory outcome.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import nnkit as nk
from .policy import PolicyNet, minibatches
from .trajectory import Segmentation, Trajectory, validate_segmentation

log = logging.getLogger(__name__)

HEAD_WIDTH = 32
BACKBONE_KEYS = ("emb", "enc.wx", "enc.wh", "enc.b")


@dataclass
class SprmModel:
    params: nk.ParamSet  # backbone arrays plus head.w1 [k, d], head.w2 [1, k]
    backbone_frozen: bool = True
    curve: list = field(default_factory=list)

    @classmethod
    def from_policy(cls, ref: PolicyNet, seed: int = 0, width: int = HEAD_WIDTH, frozen: bool = True) -> "SprmModel":
        rng = np.random.default_rng([seed, 0x5B8])
        ps = nk.ParamSet({k: ref.params[k].copy() for k in BACKBONE_KEYS}, version="hisr-sprm/1")
        hidden = ps["enc.wh"].shape[0]
        ps.add("head.w1", nk.init_uniform(rng, (width, hidden), hidden))
        ps.add("head.w2", np.zeros((1, width)))
        return cls(ps, frozen)

    def copy(self) -> "SprmModel":
        return SprmModel(self.params.copy(), self.backbone_frozen, list(self.curve))


@dataclass
class SegmentIndex:
    """Flat lookup of every segment's final action token in a batch."""

    seg_b: np.ndarray
    seg_pos: np.ndarray
    membership: np.ndarray  # [B, S] ones where segment s belongs to trajectory b
    counts: list


def index_segments(batch: enc.SeqBatch, segs: list[Segmentation]) -> SegmentIndex:
    sb, sp, counts = [], [], []
    for b, (t, s) in enumerate(zip(batch.trajs, segs)):
        problems = validate_segmentation(s, t.m)
        if problems:
            raise ValueError(f"invalid segmentation for {t.task_id}: {'; '.join(problems)}")
        for _, end in s.ranges:
            sb.append(b)
            sp.append(batch.turn_last[batch.turn_offsets[b] + end - 1])
        counts.append(len(s))
    member = np.zeros((len(segs), len(sb)))
    member[np.array(sb, dtype=np.int64), np.arange(len(sb))] = 1.0
    return SegmentIndex(np.array(sb, dtype=np.int64), np.array(sp, dtype=np.int64), member, counts)


def segment_features(P: dict, batch: enc.SeqBatch, idx: SegmentIndex) -> nk.Tensor:
    states = enc.run(P, "enc", batch.tokens, batch.mask)
    return enc.gather(states, idx.seg_pos, idx.seg_b)


def head(P: dict, feats: nk.Tensor) -> nk.Tensor:
    return nk.mlp_head(feats, P["head.w1"], P["head.w2"])


def sprm_loss(scores, R):
    """``(R − Σ_i r̂_i)²`` for one trajectory (plain numbers)."""
    return float((R - float(np.sum(scores))) ** 2)


def batch_loss(r: nk.Tensor, idx: SegmentIndex, outcomes: np.ndarray) -> nk.Tensor:
    totals = nk.matmul(nk.Tensor(idx.membership), r)
    return nk.mean(nk.square(nk.sub(nk.Tensor(outcomes), totals)))


def _split(flat: np.ndarray, counts) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(counts)[:-1]) if counts else []


def score_batch(m: SprmModel, trajs, segs, batch_size: int = 256) -> list[np.ndarray]:
    out = []
    P = m.params.consts()
    for i in range(0, len(trajs), batch_size):
        b = enc.make_batch(list(trajs[i : i + batch_size]))
        idx = index_segments(b, list(segs[i : i + batch_size]))
        r = head(P, segment_features(P, b, idx)).value
        out.extend(_split(r, idx.counts))
    return out


def segment_scores(m: SprmModel, t: Trajectory, s: Segmentation) -> np.ndarray:
    return score_batch(m, [t], [s])[0]


def decomposition_error(m: SprmModel, trajs, segs) -> float:
    """Mean |R − Σ r̂_i| over a dataset."""
    if not trajs:
        return 0.0
    sums = np.array([r.sum() for r in score_batch(m, trajs, segs)])
    return float(np.mean(np.abs(np.array([t.outcome for t in trajs]) - sums)))


def dataset_loss(m: SprmModel, trajs, segs) -> float:
    sums = np.array([r.sum() for r in score_batch(m, trajs, segs)])
    return float(np.mean((np.array([t.outcome for t in trajs]) - sums) ** 2))


def train_sprm(
    m: SprmModel,
    trajs: list[Trajectory],
    segs: list[Segmentation],
    epochs: int = 1,
    lr: float = 3e-3,
    batch: int = 16,
    seed: int = 0,
    checkpoints_per_epoch: int = 4,
    max_norm: float | None = 1.0,
) -> SprmModel:
    """Fit segment scores so they sum to the outcome.

    ``curve`` holds the full-dataset loss at the start and at
    ``checkpoints_per_epoch`` evenly spaced points of every epoch.
    """
    if not trajs:
        raise ValueError("SPRM training needs a non-empty dataset")
    m = m.copy()
    rng = np.random.default_rng(seed)
    opt = nk.OptimState(lr=lr)
    outcomes = np.array([t.outcome for t in trajs])
    cached = None
    if m.backbone_frozen:
        # Backbone states never change: compute segment features once.
        P = m.params.consts()
        full = enc.make_batch(trajs)
        cached_idx = index_segments(full, segs)
        feats = segment_features(P, full, cached_idx).value
        cached = (_split(feats, cached_idx.counts), cached_idx.counts)
    m.curve = [dataset_loss(m, trajs, segs)]
    n_batches = -(-len(trajs) // batch)
    marks = {round(n_batches * (q + 1) / checkpoints_per_epoch) for q in range(checkpoints_per_epoch)}
    for epoch in range(epochs):
        for step, idx in enumerate(minibatches(len(trajs), batch, rng), start=1):
            if cached is not None:
                feats = nk.Tensor(np.concatenate([cached[0][i] for i in idx]))
                counts = [cached[1][i] for i in idx]
                member = np.zeros((len(idx), int(sum(counts))))
                member[np.repeat(np.arange(len(idx)), counts), np.arange(int(sum(counts)))] = 1.0
                leaves = m.params.leaves(["head.w1", "head.w2"])
                r = head(leaves, feats)
                loss = nk.mean(nk.square(nk.sub(nk.Tensor(outcomes[idx]), nk.matmul(nk.Tensor(member), r))))
            else:
                b = enc.make_batch([trajs[i] for i in idx])
                sidx = index_segments(b, [segs[i] for i in idx])
                leaves = m.params.leaves()
                loss = batch_loss(head(leaves, segment_features(leaves, b, sidx)), sidx, outcomes[idx])
            nk.adam_step(m.params, nk.grad(loss, leaves), opt, max_norm)
            if step in marks:
                m.curve.append(dataset_loss(m, trajs, segs))
        log.info("sprm epoch %d loss %.5f", epoch + 1, m.curve[-1])
    return m
