"""Turn-level PPO with GAE, a learned critic and a KL penalty to the reference policy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import encoder as enc
from . import nnkit as nk
from .policy import PolicyNet, batch_logits, evaluate, make_episodes, minibatches, run_episodes
from .trajectory import Trajectory, ensure_parent

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("γ and λ must lie in [0, 1]")


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    kl_coeff: float = 1e-2
    lr_policy: float = 1e-3
    lr_critic: float = 3e-3
    epochs: int = 2
    minibatch: int = 32
    gamma: float = 0.99
    lam: float = 0.95
    normalize_adv: bool = True
    max_norm: float | None = 1.0
    tasks_per_iter: int = 16
    episodes_per_task: int = 4
    temperature: float = 1.0
    eval_every: int = 1

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip ε must be > 0")
        GaeConfig(self.gamma, self.lam)


def gae(rewards, values, gamma: float = 0.99, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns; ``values`` carries one extra terminal entry."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(rewards) + 1:
        raise ValueError(f"need {len(rewards) + 1} values for {len(rewards)} rewards, got {len(values)}")
    delta = rewards + gamma * values[1:] - values[:-1]
    adv = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values[:-1]


# ---------------------------------------------------------------- critic


@dataclass
class ValueNet:
    params: nk.ParamSet

    @classmethod
    def from_policy(cls, ref: PolicyNet, seed: int = 0, width: int = 32) -> "ValueNet":
        rng = np.random.default_rng([seed, 0xC41])
        ps = nk.ParamSet({k: ref.params[k].copy() for k in ("emb", "enc.wx", "enc.wh", "enc.b")}, version="hisr-value/1")
        hidden = ps["enc.wh"].shape[0]
        ps.add("v.w1", nk.init_uniform(rng, (hidden, width), hidden))
        ps.add("v.b1", np.zeros(width))
        ps.add("v.w2", np.zeros((width, 1)))
        ps.add("v.b2", np.zeros(1))
        return cls(ps)

    def copy(self) -> "ValueNet":
        return ValueNet(self.params.copy())


def turn_values(P: dict, batch: enc.SeqBatch) -> nk.Tensor:
    """V at the SEP closing each turn's observation, shape [turns]."""
    states = enc.run(P, "enc", batch.tokens, batch.mask)
    h = enc.gather(states, batch.turn_ctx, batch.turn_b)
    v = nk.silu(h @ P["v.w1"] + P["v.b1"]) @ P["v.w2"] + P["v.b2"]
    return nk.reshape(v, (len(batch.turn_b),))


def predict_values(vn: ValueNet, trajs, batch_size: int = 256) -> list[np.ndarray]:
    """Per trajectory: values for every turn plus a terminal 0."""
    out = []
    for i in range(0, len(trajs), batch_size):
        b = enc.make_batch(list(trajs[i : i + batch_size]))
        v = turn_values(vn.params.consts(), b).value
        for j in range(len(b.trajs)):
            out.append(np.append(v[b.turn_offsets[j] : b.turn_offsets[j + 1]], 0.0))
    return out


# ---------------------------------------------------------------- objective


@dataclass
class RolloutBatch:
    trajs: list[Trajectory]
    old_logp: list[np.ndarray]  # per trajectory, per turn: summed token log-probs at collection time
    rewards: list[np.ndarray]
    values: list[np.ndarray]
    advantages: list[np.ndarray]
    returns: list[np.ndarray]


def build_rollout_batch(trajs, old_logp, rewards, values, gamma, lam, normalize: bool = True) -> RolloutBatch:
    adv, ret = [], []
    for r, v in zip(rewards, values):
        a, g = gae(r, v, gamma, lam)
        adv.append(a)
        ret.append(g)
    if normalize and adv:
        flat = np.concatenate(adv)
        mu, sd = flat.mean(), flat.std()
        adv = [(a - mu) / (sd + 1e-8) for a in adv]
    return RolloutBatch(list(trajs), [np.asarray(x, dtype=np.float64) for x in old_logp], rewards, values, adv, ret)


def turn_membership(batch: enc.SeqBatch) -> np.ndarray:
    m = np.zeros((len(batch.turn_b), batch.n_tokens))
    m[batch.tok_turn, np.arange(batch.n_tokens)] = 1.0
    return m


def reference_logprobs(ref: PolicyNet, batch: enc.SeqBatch) -> np.ndarray:
    _, logits = batch_logits(ref.params.consts(), batch)
    return nk.log_softmax(logits, batch.tok_allowed).value


def policy_objective(P: dict, batch: enc.SeqBatch, old_turn_logp, adv, ref_lp, clip_eps: float, kl_coeff: float):
    """Clipped surrogate plus token-level KL to the reference; returns (loss, stats)."""
    _, logits = batch_logits(P, batch)
    lp = nk.log_softmax(logits, batch.tok_allowed)
    turn_lp = nk.matmul(nk.Tensor(turn_membership(batch)), nk.pick(lp, batch.tok_target))
    ratio = nk.exp(nk.sub(turn_lp, nk.Tensor(old_turn_logp)))
    A = nk.Tensor(adv)
    surr = nk.mean(nk.minimum(ratio * A, nk.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * A))
    kl = nk.mean(nk.kl_rows(lp, ref_lp))
    loss = nk.add(nk.neg(surr), nk.mul(kl, kl_coeff))
    rv = ratio.value
    stats = {
        "ratio": float(rv.mean()),
        "clip_frac": float(np.mean(np.abs(rv - 1.0) > clip_eps)),
        "kl": float(kl.value),
        "surrogate": float(surr.value),
    }
    return loss, stats


def value_loss(P: dict, batch: enc.SeqBatch, returns) -> nk.Tensor:
    return nk.mean(nk.square(nk.sub(turn_values(P, batch), nk.Tensor(returns))))


@dataclass
class PpoState:
    opt_policy: nk.OptimState
    opt_critic: nk.OptimState

    @classmethod
    def fresh(cls, cfg: PpoConfig) -> "PpoState":
        return cls(nk.OptimState(lr=cfg.lr_policy), nk.OptimState(lr=cfg.lr_critic))


def ppo_update(
    pol: PolicyNet,
    vn: ValueNet,
    rb: RolloutBatch,
    cfg: PpoConfig,
    ref: PolicyNet,
    rng: np.random.Generator,
    state: PpoState | None = None,
) -> dict:
    """Update ``pol`` and ``vn`` in place; returns stats averaged over minibatches."""
    state = state or PpoState.fresh(cfg)
    acc = {"ratio": [], "clip_frac": [], "kl": [], "surrogate": [], "value_loss": []}
    for _ in range(cfg.epochs):
        for idx in minibatches(len(rb.trajs), cfg.minibatch, rng):
            b = enc.make_batch([rb.trajs[i] for i in idx])
            old = np.concatenate([rb.old_logp[i] for i in idx])
            adv = np.concatenate([rb.advantages[i] for i in idx])
            ret = np.concatenate([rb.returns[i] for i in idx])
            leaves = pol.params.leaves()
            loss, stats = policy_objective(leaves, b, old, adv, reference_logprobs(ref, b), cfg.clip_eps, cfg.kl_coeff)
            nk.adam_step(pol.params, nk.grad(loss, leaves), state.opt_policy, cfg.max_norm)
            vleaves = vn.params.leaves()
            vloss = value_loss(vleaves, b, ret)
            nk.adam_step(vn.params, nk.grad(vloss, vleaves), state.opt_critic, cfg.max_norm)
            for k, v in stats.items():
                acc[k].append(v)
            acc["value_loss"].append(float(vloss.value))
    return {k: float(np.mean(v)) if v else 0.0 for k, v in acc.items()}


# ---------------------------------------------------------------- loop

CURVE_COLUMNS = ["iteration", "mean_outcome", "success_rate", "eval_success", "eval_outcome", "mean_kl", "clip_frac"]

RewardFn = Callable[[list, PolicyNet], list]


@dataclass
class TrainResult:
    policy: PolicyNet
    value: ValueNet
    curve: list = field(default_factory=list)

    @property
    def final_success(self) -> float:
        return self.curve[-1]["eval_success"]


def train_loop(
    pol: PolicyNet,
    vn: ValueNet,
    suite,
    reward_fn: RewardFn,
    iters: int,
    cfg: PpoConfig = PpoConfig(),
    seed: int = 0,
    ref: PolicyNet | None = None,
    eval_suite=None,
    curve_path=None,
    ckpt_dir=None,
) -> TrainResult:
    """Collect on-policy episodes, score them with ``reward_fn(trajs, pol)`` and apply PPO, ``iters`` times.

    Row 0 of the curve evaluates the starting policy; later rows carry a greedy
    evaluation every ``cfg.eval_every`` iterations and always on the last one
    (NaN otherwise).
    """
    pol, vn = pol.copy(), vn.copy()
    ref = ref if ref is not None else pol.copy()
    eval_suite = eval_suite if eval_suite is not None else suite
    rng = np.random.default_rng([seed, 0x990])
    state = PpoState.fresh(cfg)
    es, eo = evaluate(pol, eval_suite, seed)
    curve = [dict(iteration=0, mean_outcome=float("nan"), success_rate=float("nan"), eval_success=es, eval_outcome=eo, mean_kl=0.0, clip_frac=0.0)]
    for it in range(1, iters + 1):
        pick = np.sort(rng.choice(len(suite), size=min(cfg.tasks_per_iter, len(suite)), replace=False))
        eps = make_episodes([suite[i] for i in pick], cfg.episodes_per_task, seed=seed * 100003 + it, stream=2)
        run_episodes(pol, eps, cfg.temperature)
        trajs = [ep.trajectory() for ep in eps]
        rewards = [np.asarray(r, dtype=np.float64) for r in reward_fn(trajs, pol)]
        old = [np.array([lp.sum() for lp in ep.logps]) for ep in eps]
        rb = build_rollout_batch(trajs, old, rewards, predict_values(vn, trajs), cfg.gamma, cfg.lam, cfg.normalize_adv)
        stats = ppo_update(pol, vn, rb, cfg, ref, rng, state)
        if it % max(cfg.eval_every, 1) == 0 or it == iters:
            es, eo = evaluate(pol, eval_suite, seed)
        else:
            es = eo = float("nan")
        outcomes = np.array([t.outcome for t in trajs])
        curve.append(
            dict(
                iteration=it,
                mean_outcome=float(outcomes.mean()),
                success_rate=float(np.mean(outcomes >= 1.0)),
                eval_success=es,
                eval_outcome=eo,
                mean_kl=stats["kl"],
                clip_frac=stats["clip_frac"],
            )
        )
        log.info("ppo iter %d outcome %.3f eval %.3f kl %.4f", it, outcomes.mean(), es, stats["kl"])
        if ckpt_dir is not None:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
            nk.save_params(pol.params, Path(ckpt_dir) / f"policy_{it:04d}.ckpt")
            nk.save_params(vn.params, Path(ckpt_dir) / f"value_{it:04d}.ckpt")
    if curve_path is not None:
        write_curve(curve, curve_path)
    return TrainResult(pol, vn, curve)


def write_curve(curve, path) -> None:
    with open(ensure_parent(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row[c] if c == "iteration" else repr(float(row[c])) for c in CURVE_COLUMNS])
