"""Gated recurrent context encoder and the token-stream layout shared by all models.

A trajectory is flattened as ``o_1 SEP a_1 SEP o_2 SEP a_2 SEP …``. Models read
the encoder state after a position to predict or score what follows it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnkit as nk
from . import vocab
from .trajectory import Trajectory

EMBED = 32
HIDDEN = 64
GATE_BIAS = -2.0


def init_encoder(ps: nk.ParamSet, rng: np.random.Generator, prefix: str, embed: int, hidden: int, embedding=True):
    if embedding:
        ps.add("emb", rng.normal(0.0, 0.3, size=(vocab.VOCAB_SIZE, embed)))
    ps.add(f"{prefix}.wx", nk.init_uniform(rng, (embed, 2 * hidden), embed))
    ps.add(f"{prefix}.wh", nk.init_uniform(rng, (hidden, 2 * hidden), hidden))
    # Update gate starts mostly closed so early context survives long histories.
    b = np.zeros(2 * hidden)
    b[:hidden] = GATE_BIAS
    ps.add(f"{prefix}.b", b)


def cell(P: dict, prefix: str, h: nk.Tensor, tok: np.ndarray, m: np.ndarray | None) -> nk.Tensor:
    """One recurrent step; rows with ``m == 0`` keep their previous state."""
    hidden = P[f"{prefix}.wh"].shape[0]
    x = nk.getitem(P["emb"], tok)
    a = x @ P[f"{prefix}.wx"] + h @ P[f"{prefix}.wh"] + P[f"{prefix}.b"]
    z = nk.sigmoid(a[:, :hidden])
    c = nk.tanh(a[:, hidden:])
    upd = z * (c - h)
    if m is not None:
        upd = upd * m[:, None]
    return h + upd


def run(P: dict, prefix: str, tokens: np.ndarray, mask: np.ndarray, h0=None) -> nk.Tensor:
    """States after consuming each position of a right-padded ``[B, T]`` batch, shape ``[T, B, H]``.

    Same recurrence as ``cell``, fused into one differentiable node.
    """
    return nk.gated_scan(P["emb"], P[f"{prefix}.wx"], P[f"{prefix}.wh"], P[f"{prefix}.b"], tokens, mask, h0)


def gather(states: nk.Tensor, pos: np.ndarray, rows: np.ndarray) -> nk.Tensor:
    """Rows ``states[pos[i], rows[i]]`` stacked into ``[N, H]``."""
    return nk.getitem(states, (np.asarray(pos), np.asarray(rows)))


# ---------------------------------------------------------------- stream layout


@dataclass
class Layout:
    """Positions of one trajectory's tokens in its flattened stream."""

    tokens: list[int]
    ctx_pos: list[int]  # SEP after o_k: state here conditions a_k
    act_pos: list[list[int]]  # positions of a_k's tokens
    tail_pos: list[int]  # SEP after a_k


def layout(t: Trajectory, upto: int | None = None) -> Layout:
    tokens, ctx, acts, tails = [], [], [], []
    for turn in t.turns[:upto]:
        tokens.extend(turn.obs)
        ctx.append(len(tokens))
        tokens.append(vocab.SEP)
        acts.append(list(range(len(tokens), len(tokens) + len(turn.act))))
        tokens.extend(turn.act)
        tails.append(len(tokens))
        tokens.append(vocab.SEP)
    return Layout(tokens, ctx, acts, tails)


def history_tokens(t: Trajectory, k: int) -> list[int]:
    """Stream prefix o_{≤k}, a_{<k} (1-based k) ending with the SEP after o_k."""
    lay = layout(t, k)
    return lay.tokens[: lay.ctx_pos[-1] + 1]


@dataclass
class SeqBatch:
    """Padded streams plus flat indices of every action token and every turn."""

    trajs: list[Trajectory]
    tokens: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    # per action token
    tok_b: np.ndarray
    tok_pos: np.ndarray
    tok_target: np.ndarray
    tok_turn: np.ndarray  # flat turn index into the turn table
    tok_allowed: np.ndarray  # grammar mask [N, V]
    # per turn
    turn_b: np.ndarray
    turn_k: np.ndarray  # 0-based turn index within its trajectory
    turn_ctx: np.ndarray
    turn_last: np.ndarray  # position of the final action token
    turn_tail: np.ndarray
    turn_offsets: np.ndarray  # start of each trajectory's rows in the turn table

    @property
    def n_tokens(self) -> int:
        return len(self.tok_target)


def make_batch(trajs: list[Trajectory]) -> SeqBatch:
    lays = [layout(t) for t in trajs]
    B = len(trajs)
    T = max((len(l.tokens) for l in lays), default=0)
    tokens = np.full((B, T), vocab.PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    tb, tp, tt, tturn, allowed = [], [], [], [], []
    ub, uk, uctx, ulast, utail, offsets = [], [], [], [], [], []
    for b, (t, lay) in enumerate(zip(trajs, lays)):
        tokens[b, : len(lay.tokens)] = lay.tokens
        mask[b, : len(lay.tokens)] = 1.0
        offsets.append(len(ub))
        for k, turn in enumerate(t.turns):
            flat_turn = len(ub)
            ub.append(b)
            uk.append(k)
            uctx.append(lay.ctx_pos[k])
            ulast.append(lay.act_pos[k][-1])
            utail.append(lay.tail_pos[k])
            for j, p in enumerate(lay.act_pos[k]):
                tb.append(b)
                tp.append(p)
                tt.append(turn.act[j])
                tturn.append(flat_turn)
                row = np.zeros(vocab.VOCAB_SIZE, dtype=bool)
                row[vocab.allowed_next(turn.act[:j])] = True
                allowed.append(row)
    offsets.append(len(ub))
    i64 = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return SeqBatch(
        trajs=list(trajs),
        tokens=tokens,
        mask=mask,
        lengths=i64([len(l.tokens) for l in lays]),
        tok_b=i64(tb),
        tok_pos=i64(tp),
        tok_target=i64(tt),
        tok_turn=i64(tturn),
        tok_allowed=np.asarray(allowed, dtype=bool).reshape(-1, vocab.VOCAB_SIZE),
        turn_b=i64(ub),
        turn_k=i64(uk),
        turn_ctx=i64(uctx),
        turn_last=i64(ulast),
        turn_tail=i64(utail),
        turn_offsets=i64(offsets),
    )


def reversed_batch(batch: SeqBatch, outcome_tokens: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-row reversed streams with the outcome token read first.

    Stream position ``p`` of a row of length ``L`` sits at reversed index ``L - p``.
    """
    B, T = batch.tokens.shape
    rev = np.full((B, T + 1), vocab.PAD, dtype=np.int64)
    mask = np.zeros((B, T + 1))
    for b in range(B):
        L = batch.lengths[b]
        rev[b, 0] = outcome_tokens[b]
        rev[b, 1 : L + 1] = batch.tokens[b, :L][::-1]
        mask[b, : L + 1] = 1.0
    return rev, mask


def check_tokens(tokens) -> None:
    bad = [t for t in tokens if not 0 <= int(t) < vocab.VOCAB_SIZE]
    if bad:
        raise ValueError(f"token ids out of vocabulary: {bad}")
