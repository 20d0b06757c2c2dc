"""Autoregressive action policy: likelihoods, behaviour cloning, sampling and rollouts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import env as envmod
from . import nnkit as nk
from . import vocab
from .trajectory import Trajectory, Turn, filter_collection

log = logging.getLogger(__name__)


@dataclass
class PolicyNet:
    params: nk.ParamSet
    curve: list = field(default_factory=list)

    @classmethod
    def create(cls, seed: int = 0, embed: int = enc.EMBED, hidden: int = enc.HIDDEN) -> "PolicyNet":
        rng = np.random.default_rng(seed)
        ps = nk.ParamSet(version="hisr-policy/1")
        enc.init_encoder(ps, rng, "enc", embed, hidden)
        ps.add("out.w", nk.init_uniform(rng, (hidden, vocab.VOCAB_SIZE), hidden))
        ps.add("out.b", np.zeros(vocab.VOCAB_SIZE))
        return cls(ps)

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.params.copy(), list(self.curve))


@dataclass
class ActionLogProb:
    terms: np.ndarray

    @property
    def total(self) -> float:
        return float(self.terms.sum())


# ---------------------------------------------------------------- likelihoods


def batch_logits(P: dict, batch: enc.SeqBatch):
    """Encoder states for the batch and next-token logits at every action token."""
    states = enc.run(P, "enc", batch.tokens, batch.mask)
    h = enc.gather(states, batch.tok_pos - 1, batch.tok_b)
    return states, h @ P["out.w"] + P["out.b"]


def token_logprobs(P: dict, batch: enc.SeqBatch, constrained: bool = False) -> nk.Tensor:
    """Teacher-forced log-probability of every action token in the batch, shape [N]."""
    _, logits = batch_logits(P, batch)
    lp = nk.log_softmax(logits, batch.tok_allowed if constrained else None)
    return nk.pick(lp, batch.tok_target)


def trajectory_token_logprobs(net: PolicyNet, trajs, constrained: bool = False) -> list[list[np.ndarray]]:
    """Per trajectory, per turn: array of token log-probabilities."""
    if not trajs:
        return []
    batch = enc.make_batch(list(trajs))
    lp = token_logprobs(net.params.consts(), batch, constrained).value
    return split_by_turn(batch, lp)


def split_by_turn(batch: enc.SeqBatch, per_token: np.ndarray) -> list[list[np.ndarray]]:
    out = [[] for _ in batch.trajs]
    bounds = np.flatnonzero(np.diff(batch.tok_turn)) + 1
    for turn_idx, chunk in zip(np.unique(batch.tok_turn), np.split(per_token, bounds)):
        out[batch.turn_b[turn_idx]].append(chunk)
    return out


def action_logprobs(net: PolicyNet, history, action, constrained: bool = False) -> ActionLogProb:
    """Log-probabilities of ``action``'s tokens given the stream ``history`` (ending in SEP)."""
    history, action = list(history), list(action)
    enc.check_tokens(history + action)
    if not history or history[-1] != vocab.SEP:
        raise ValueError("history must end with the SEP that closes the current observation")
    P = net.params.consts()
    tokens = np.array([history + action])
    states = enc.run(P, "enc", tokens, np.ones(tokens.shape))
    pos = np.arange(len(history) - 1, len(history) - 1 + len(action))
    logits = enc.gather(states, pos, np.zeros(len(action), dtype=np.int64)) @ P["out.w"] + P["out.b"]
    allowed = None
    if constrained:
        allowed = np.zeros((len(action), vocab.VOCAB_SIZE), dtype=bool)
        for j in range(len(action)):
            allowed[j, vocab.allowed_next(action[:j])] = True
    lp = nk.log_softmax(logits, allowed).value
    return ActionLogProb(lp[np.arange(len(action)), action])


# ---------------------------------------------------------------- behaviour cloning


def bc_loss(P: dict, batch: enc.SeqBatch) -> nk.Tensor:
    """Mean negative log-likelihood over action tokens; observations carry no loss."""
    return nk.neg(nk.mean(token_logprobs(P, batch)))


def mean_nll(net: PolicyNet, trajs, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(trajs), batch_size):
        batch = enc.make_batch(trajs[i : i + batch_size])
        lp = token_logprobs(net.params.consts(), batch).value
        total += -lp.sum()
        count += lp.size
    return total / max(count, 1)


def minibatches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch):
        yield perm[i : i + batch]


def bc_train(
    net: PolicyNet,
    data: list[Trajectory],
    epochs: int = 3,
    lr: float = 1e-2,
    batch: int = 32,
    seed: int = 0,
    max_norm: float | None = 1.0,
) -> PolicyNet:
    """Fit the policy to expert demonstrations; ``curve`` holds the mean NLL after each epoch."""
    if not data:
        raise ValueError("behaviour cloning needs a non-empty dataset")
    net = net.copy()
    rng = np.random.default_rng(seed)
    opt = nk.OptimState(lr=lr)
    net.curve = [mean_nll(net, data)]
    for epoch in range(epochs):
        for idx in minibatches(len(data), batch, rng):
            b = enc.make_batch([data[i] for i in idx])
            leaves = net.params.leaves()
            g = nk.grad(bc_loss(leaves, b), leaves)
            nk.adam_step(net.params, g, opt, max_norm)
        net.curve.append(mean_nll(net, data))
        log.info("bc epoch %d nll %.5f", epoch + 1, net.curve[-1])
    return net


# ---------------------------------------------------------------- sampling


def masked_logprobs(logits: np.ndarray, mask: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise log-softmax of ``logits / temperature`` restricted to ``mask`` (-inf elsewhere)."""
    z = np.where(mask, logits / temperature, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def choose_rows(logits: np.ndarray, mask: np.ndarray, temperature: float, rngs) -> np.ndarray:
    """One grammar-masked draw per row; temperature 0 is argmax with ties to the lowest id."""
    if temperature < 0:
        raise ValueError("temperature must be ≥ 0")
    if temperature == 0:
        return np.argmax(np.where(mask, logits, -np.inf), axis=-1)
    cdf = np.cumsum(np.exp(masked_logprobs(logits, mask, temperature)), axis=-1)
    u = np.array([rng.random() for rng in rngs])
    rank = ((cdf <= u[:, None]) & mask).sum(axis=-1)
    live = mask.sum(axis=-1)
    rank = np.minimum(rank, live - 1)
    # token = the rank-th allowed id of each row
    order = np.cumsum(mask, axis=-1) - 1
    return np.argmax((order == rank[:, None]) & mask, axis=-1)


def choose(logits: np.ndarray, allowed, temperature: float, rng: np.random.Generator | None) -> int:
    mask = np.zeros(len(logits), dtype=bool)
    mask[np.asarray(allowed)] = True
    return int(choose_rows(logits[None], mask[None], temperature, [rng])[0])


def constrained_logprob(logits: np.ndarray, allowed, token: int) -> float:
    mask = np.zeros(len(logits), dtype=bool)
    mask[np.asarray(allowed)] = True
    return float(masked_logprobs(logits[None], mask[None])[0, token])


def sample_action(net: PolicyNet, history, temperature: float, rng: np.random.Generator | None) -> tuple[int, ...]:
    """Decode one grammatical action after ``history`` (verb slot first, then its arguments)."""
    history = list(history)
    enc.check_tokens(history)
    P = net.params.consts()
    h = enc.run(P, "enc", np.array([history]), np.ones((1, len(history))))[-1]
    action: list[int] = []
    while allowed := vocab.allowed_next(action):
        logits = (h @ P["out.w"] + P["out.b"]).value[0]
        tok = choose(logits, allowed, temperature, rng)
        action.append(tok)
        h = enc.cell(P, "enc", h, np.array([tok]), None)
    return tuple(action)


@dataclass
class Episode:
    spec: envmod.TaskSpec
    env_seed: int
    rng: np.random.Generator | None
    state: envmod.EnvState = None
    obs: tuple = ()
    turns: list = field(default_factory=list)
    logps: list = field(default_factory=list)  # per turn: constrained token log-probs at temperature 1
    outcome: float | None = None

    @property
    def done(self) -> bool:
        return self.outcome is not None

    def trajectory(self) -> Trajectory:
        return Trajectory(
            self.spec.task_id, tuple(self.turns), self.outcome, env_seed=self.env_seed, env_version=envmod.ENV_VERSION
        )


def _feed(P, h, seqs, active):
    """Advance rows of ``h`` through their token lists (masked where inactive)."""
    width = max((len(s) for s, a in zip(seqs, active) if a), default=0)
    if width == 0:
        return h
    tok = np.full((len(seqs), width), vocab.PAD, dtype=np.int64)
    m = np.zeros((len(seqs), width))
    for b, (s, a) in enumerate(zip(seqs, active)):
        if a:
            tok[b, : len(s)] = s
            m[b, : len(s)] = 1.0
    return enc.run(P, "enc", tok, m, h)[-1]


def run_episodes(net: PolicyNet, episodes: list[Episode], temperature: float) -> list[Episode]:
    """Play all episodes to termination in lock-step, batching the network calls."""
    P = net.params.consts()
    B = len(episodes)
    hidden = P["enc.wh"].shape[0]
    h = nk.Tensor(np.zeros((B, hidden)))
    for ep in episodes:
        ep.state, ep.obs = envmod.reset(ep.spec, ep.env_seed)
    while True:
        active = [not ep.done for ep in episodes]
        if not any(active):
            break
        h = _feed(P, h, [list(ep.obs) + [vocab.SEP] for ep in episodes], active)
        actions = [[] for _ in episodes]
        logps = [[] for _ in episodes]
        rngs = [ep.rng for ep in episodes]
        while True:
            need = np.array([a and bool(vocab.allowed_next(actions[b])) for b, a in enumerate(active)])
            if not need.any():
                break
            rows = np.flatnonzero(need)
            logits = (h @ P["out.w"] + P["out.b"]).value[rows]
            mask = np.stack([vocab.allowed_mask(actions[b]) for b in rows])
            toks = choose_rows(logits, mask, temperature, [rngs[b] for b in rows])
            lps = masked_logprobs(logits, mask)[np.arange(len(rows)), toks]
            chosen = np.full(B, vocab.PAD, dtype=np.int64)
            for b, tok, lp in zip(rows, toks, lps):
                actions[b].append(int(tok))
                logps[b].append(float(lp))
                chosen[b] = tok
            h = enc.cell(P, "enc", h, chosen, need.astype(float))
        h = _feed(P, h, [[vocab.SEP]] * B, active)
        for b, ep in enumerate(episodes):
            if not active[b]:
                continue
            act = tuple(actions[b])
            ep.state, res = envmod.step(ep.spec, ep.state, act)
            ep.turns.append(Turn(ep.obs, act, res.grounded))
            ep.logps.append(np.array(logps[b]))
            ep.obs = res.observation
            if res.done:
                ep.outcome = res.outcome
    return episodes


def task_env_seed(seed: int, task_index: int) -> int:
    return int(np.random.SeedSequence([seed, task_index, 0xE7]).generate_state(1)[0])


def make_episodes(suite, N: int, seed: int, stream: int = 0) -> list[Episode]:
    eps = []
    for i, spec in enumerate(suite):
        env_seed = task_env_seed(seed, i)
        for j in range(N):
            eps.append(Episode(spec, env_seed, np.random.default_rng([seed, stream, i, j])))
    return eps


def collect_rollouts(
    net: PolicyNet,
    suite,
    N: int = 10,
    temperature: float = 0.7,
    rep_threshold: int = 3,
    seed: int = 0,
    filtered: bool = True,
    chunk: int = 256,
) -> list[Trajectory]:
    """``N`` sampled episodes per task (one environment layout per task), optionally filtered."""
    if N < 1:
        raise ValueError("N ≥ 1 required")
    eps = make_episodes(suite, N, seed)
    for i in range(0, len(eps), chunk):
        run_episodes(net, eps[i : i + chunk], temperature)
    trajs = [ep.trajectory() for ep in eps]
    if not filtered:
        return trajs
    max_turns = max((s.max_turns for s in suite), default=1)
    return filter_collection(trajs, rep_threshold, max_turns)


def evaluate(net: PolicyNet, suite, seed: int = 0, chunk: int = 256) -> tuple[float, float]:
    """Greedy success rate and mean outcome over one episode per task."""
    eps = make_episodes(suite, 1, seed, stream=1)
    for i in range(0, len(eps), chunk):
        run_episodes(net, eps[i : i + chunk], 0.0)
    outcomes = np.array([ep.outcome for ep in eps])
    return float(np.mean(outcomes >= 1.0)), float(outcomes.mean())
