"""Hindsight model and likelihood-ratio action importance.

The hindsight model scores a masked action given everything else in the
trajectory plus its outcome. Its forward half is the policy encoder (so it
starts out identical to the policy it was copied from); a second encoder reads
the future in reverse, beginning with the outcome token, and feeds the output
head through an extra projection that is zero at initialisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import nnkit as nk
from . import vocab
from .policy import ActionLogProb, PolicyNet, action_logprobs, minibatches, split_by_turn, token_logprobs
from .trajectory import Segmentation, Trajectory

log = logging.getLogger(__name__)

LOG_RATIO_CLIP = 20.0
DEGENERATE_LOGP = -700.0


@dataclass
class HindsightNet:
    params: nk.ParamSet
    curve: list = field(default_factory=list)

    @classmethod
    def from_policy(cls, ref: PolicyNet, seed: int = 0) -> "HindsightNet":
        rng = np.random.default_rng([seed, 0x41D])
        ps = ref.params.copy()
        ps.version = "hisr-hindsight/1"
        embed, hidden = ps["enc.wx"].shape[0], ps["enc.wh"].shape[0]
        enc.init_encoder(ps, rng, "benc", embed, hidden, embedding=False)
        ps.add("out.u", np.zeros((hidden, vocab.VOCAB_SIZE)))
        return cls(ps)

    def copy(self) -> "HindsightNet":
        return HindsightNet(self.params.copy(), list(self.curve))


def outcome_tokens(trajs) -> list[int]:
    return [vocab.outcome_token(t.outcome) for t in trajs]


def hindsight_token_logprobs(P: dict, batch: enc.SeqBatch) -> nk.Tensor:
    """log π_hind(a_k^j | o, a_{<k}, a_{>k}, a_k^{<j}, R) for every action token, shape [N]."""
    fwd = enc.run(P, "enc", batch.tokens, batch.mask)
    rev, rmask = enc.reversed_batch(batch, outcome_tokens(batch.trajs))
    bwd = enc.run(P, "benc", rev, rmask)
    hf = enc.gather(fwd, batch.tok_pos - 1, batch.tok_b)
    rpos = batch.lengths[batch.tok_b] - batch.turn_tail[batch.tok_turn]
    hb = enc.gather(bwd, rpos, batch.tok_b)
    logits = hf @ P["out.w"] + hb @ P["out.u"] + P["out.b"]
    return nk.pick(nk.log_softmax(logits), batch.tok_target)


def masked_stream(t: Trajectory, k: int) -> list[int]:
    """Full stream of ``t`` with action ``k`` (1-based) replaced by MASK and the outcome appended."""
    out = []
    for i, turn in enumerate(t.turns, start=1):
        out.extend(turn.obs)
        out.append(vocab.SEP)
        out.extend((vocab.MASK,) if i == k else turn.act)
        out.append(vocab.SEP)
    out.append(vocab.outcome_token(t.outcome))
    return out


def masked_action_logprobs(net: HindsightNet, stream, action) -> ActionLogProb:
    """Score ``action`` in the MASK slot of a masked stream (see ``masked_stream``)."""
    stream, action = list(stream), list(action)
    enc.check_tokens(stream + action)
    if stream.count(vocab.MASK) != 1:
        raise ValueError("stream must contain exactly one MASK")
    i = stream.index(vocab.MASK)
    prefix, future = stream[:i], stream[i + 1 :]
    P = net.params.consts()
    fwd_tokens = np.array([prefix + action])
    fwd = enc.run(P, "enc", fwd_tokens, np.ones(fwd_tokens.shape))
    bwd_tokens = np.array([future[::-1]])
    hb = enc.run(P, "benc", bwd_tokens, np.ones(bwd_tokens.shape))[-1]
    pos = np.arange(len(prefix) - 1, len(prefix) - 1 + len(action))
    hf = enc.gather(fwd, pos, np.zeros(len(action), dtype=np.int64))
    logits = hf @ P["out.w"] + hb @ P["out.u"] + P["out.b"]
    lp = nk.log_softmax(logits).value
    return ActionLogProb(lp[np.arange(len(action)), action])


def hindsight_loss(P: dict, batch: enc.SeqBatch) -> nk.Tensor:
    return nk.neg(nk.mean(hindsight_token_logprobs(P, batch)))


def masked_nll(net: HindsightNet, trajs, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(trajs), batch_size):
        lp = hindsight_token_logprobs(net.params.consts(), enc.make_batch(trajs[i : i + batch_size])).value
        total -= lp.sum()
        count += lp.size
    return total / max(count, 1)


def hindsight_train(
    net: HindsightNet,
    data: list[Trajectory],
    epochs: int = 1,
    lr: float = 3e-3,
    batch: int = 32,
    seed: int = 0,
    max_norm: float | None = 1.0,
) -> HindsightNet:
    """Masked-action recovery over every turn of every trajectory."""
    if not data:
        raise ValueError("hindsight training needs a non-empty dataset")
    net = net.copy()
    rng = np.random.default_rng(seed)
    opt = nk.OptimState(lr=lr)
    net.curve = [masked_nll(net, data)]
    for epoch in range(epochs):
        for idx in minibatches(len(data), batch, rng):
            b = enc.make_batch([data[i] for i in idx])
            leaves = net.params.leaves()
            g = nk.grad(hindsight_loss(leaves, b), leaves)
            nk.adam_step(net.params, g, opt, max_norm)
        net.curve.append(masked_nll(net, data))
        log.info("hindsight epoch %d masked nll %.5f", epoch + 1, net.curve[-1])
    return net


# ---------------------------------------------------------------- importance


@dataclass
class ImportanceScores:
    z_turn: np.ndarray
    z_seg: np.ndarray
    degenerate: bool = False


def importance_from_logprobs(hind_lp, pol_lp, beta: float = 0.3, clip: float | None = LOG_RATIO_CLIP) -> tuple[float, bool]:
    """``exp(mean_j log r_j / β)`` computed in log space; returns (z, degenerate)."""
    if beta <= 0:
        raise ValueError("β must be > 0")
    hind_lp, pol_lp = np.asarray(hind_lp, dtype=np.float64), np.asarray(pol_lp, dtype=np.float64)
    degenerate = bool(np.any(pol_lp < DEGENERATE_LOGP) or np.any(hind_lp < DEGENERATE_LOGP))
    log_r = hind_lp - pol_lp
    if clip is not None:
        log_r = np.clip(log_r, -clip, clip)
    return float(np.exp(log_r.mean() / beta)), degenerate


def turn_importance(hind: HindsightNet, pol: PolicyNet, t: Trajectory, k: int, beta: float = 0.3) -> float:
    """Importance z(a_k) of turn ``k`` (1-based) of ``t``."""
    if not 1 <= k <= t.m:
        raise ValueError(f"turn {k} outside 1..{t.m}")
    action = t.turns[k - 1].act
    h = masked_action_logprobs(hind, masked_stream(t, k), action).terms
    p = action_logprobs(pol, enc.history_tokens(t, k), action).terms
    return importance_from_logprobs(h, p, beta)[0]


def turn_importances(hind: HindsightNet, pol: PolicyNet, trajs, beta: float = 0.3, clip=LOG_RATIO_CLIP, batch_size: int = 256):
    """Batched z for every turn of every trajectory; returns (list of arrays, degenerate flags)."""
    zs, flags = [], []
    for i in range(0, len(trajs), batch_size):
        b = enc.make_batch(list(trajs[i : i + batch_size]))
        h = split_by_turn(b, hindsight_token_logprobs(hind.params.consts(), b).value)
        p = split_by_turn(b, token_logprobs(pol.params.consts(), b).value)
        for ht, pt in zip(h, p):
            vals = [importance_from_logprobs(x, y, beta, clip) for x, y in zip(ht, pt)]
            zs.append(np.array([v[0] for v in vals]))
            flags.append(any(v[1] for v in vals))
    return zs, flags


def segment_importance(z, s: Segmentation) -> np.ndarray:
    """Sum turn importances within each segment, then normalise to unit total."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) != s.ranges[-1][1]:
        raise ValueError(f"{len(z)} turn scores for a segmentation of {s.ranges[-1][1]} turns")
    raw = np.array([z[a - 1 : b].sum() for a, b in s.ranges])
    return raw / raw.sum()


def importance_scores(hind, pol, trajs, segs, beta: float = 0.3) -> list[ImportanceScores]:
    zs, flags = turn_importances(hind, pol, trajs, beta)
    return [ImportanceScores(z, segment_importance(z, s), f) for z, s, f in zip(zs, segs, flags)]
