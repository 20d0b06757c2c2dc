"""Pipeline stages, reward variants and report emission.

Every stage reads and writes fixed paths under the run directory, so stages
can be rerun individually; a missing input names the stage that produces it.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import credit, hindsight, nnkit as nk, ppo, segment, sprm, vocab
from . import env as envmod
from .config import Config
from .policy import PolicyNet, bc_train, collect_rollouts, evaluate, make_episodes, mean_nll, run_episodes, task_env_seed
from .trajectory import (
    Segmentation,
    ensure_parent,
    read_jsonl,
    read_records_jsonl,
    read_segments_jsonl,
    write_jsonl,
    write_records_jsonl,
    write_segments_jsonl,
)

log = logging.getLogger(__name__)

STAGES = ("bc-train", "collect", "segment", "train-sprm", "train-hindsight", "score", "ppo-train", "eval", "report")

ARTIFACTS = {
    "bc_suite": ("suites/bc.jsonl", "bc-train"),
    "demos": ("data/demos.jsonl", "bc-train"),
    "policy_ref": ("models/policy_ref.ckpt", "bc-train"),
    "bc_curve": ("reports/bc_curve.csv", "bc-train"),
    "collect_suite": ("suites/collect.jsonl", "collect"),
    "rollouts": ("data/rollouts.jsonl", "collect"),
    "holdout_suite": ("suites/holdout.jsonl", "collect"),
    "holdout": ("data/holdout.jsonl", "collect"),
    "segments": ("data/segments.jsonl", "segment"),
    "holdout_segments": ("data/holdout_segments.jsonl", "segment"),
    "segment_sizes": ("reports/segment_sizes.csv", "segment"),
    "sprm": ("models/sprm.ckpt", "train-sprm"),
    "sprm_curve": ("reports/sprm_curve.csv", "train-sprm"),
    "sprm_eval": ("reports/sprm_eval.csv", "train-sprm"),
    "hindsight": ("models/hindsight.ckpt", "train-hindsight"),
    "hindsight_curve": ("reports/hindsight_curve.csv", "train-hindsight"),
    "hindsight_eval": ("reports/hindsight_eval.csv", "train-hindsight"),
    "scores": ("data/scores.jsonl", "score"),
    "rewards": ("reports/rewards.csv", "score"),
    "eval": ("reports/eval.csv", "eval"),
    "task_success": ("reports/task_success.csv", "eval"),
    "reward_shares": ("reports/reward_shares.csv", "report"),
    "case_study": ("reports/case_study.csv", "report"),
    "summary": ("reports/summary.txt", "report"),
}

VARIANT_NEEDS = {
    "full": ("sprm", "hindsight"),
    "no-him": ("sprm",),
    "no-spr": ("hindsight",),
    "no-both": (),
    "no-ags": ("sprm", "hindsight"),
    "sparse": (),
}

NO_SPR_NOTE = "no-spr uses R times normalised turn importance fused per turn with grounding (interpretation)"


class MissingArtifactError(RuntimeError):
    def __init__(self, stage: str, path: Path, producer: str):
        super().__init__(f"stage {stage!r} needs {path} (run stage {producer!r} first)")
        self.stage, self.path, self.producer = stage, path, producer


def sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k, 0x415]).generate_state(1)[0])


# ---------------------------------------------------------------- rewards


@dataclass
class RewardContext:
    cfg: Config
    specs: dict
    ref: PolicyNet
    sprm: sprm.SprmModel | None = None
    hind: hindsight.HindsightNet | None = None


@dataclass
class RewardVectors:
    seg: Segmentation
    r_hat: np.ndarray
    z_turn: np.ndarray
    z_seg: np.ndarray
    r_him: credit.ModulatedRewards
    fused: credit.FusedRewards
    turn: np.ndarray
    degenerate: bool


def segment_batch(ctx: RewardContext, trajs) -> list[Segmentation]:
    if ctx.cfg.segmenter == "oracle":
        return [segment.segment_oracle(ctx.specs[t.task_id], t) for t in trajs]
    # External segmentations only exist for stored datasets; fresh rollouts use the heuristic.
    return [segment.segment_heuristic(t, ctx.cfg.segment_threshold) for t in trajs]


def _importances(ctx: RewardContext, trajs, denominator: PolicyNet | None):
    pol = denominator if denominator is not None else ctx.ref
    return hindsight.turn_importances(ctx.hind, pol, trajs, ctx.cfg.beta, ctx.cfg.log_ratio_clip)


def _place(ctx: RewardContext, r_him, t, s: Segmentation, alpha: float):
    if ctx.cfg.grounding == "turn":
        g = credit.segment_grounding(t, s)
        turn = credit.fuse_per_turn(credit.to_turn_rewards(r_him, s, t.m), t, alpha)
        fused = credit.FusedRewards(np.array([turn[b - 1] for _, b in s.ranges]), g, alpha)
        return fused, turn
    fused = credit.fuse_grounding(r_him, t, s, alpha)
    return fused, credit.to_turn_rewards(fused, s, t.m)


def score_trajectories(ctx: RewardContext, trajs, segs=None, uniform_z: bool = False, alpha=None, denominator=None) -> list[RewardVectors]:
    """Full reward computation: SPRM scores, importance, modulation, fusion and turn placement."""
    cfg = ctx.cfg
    alpha = cfg.alpha if alpha is None else alpha
    segs = segment_batch(ctx, trajs) if segs is None else segs
    r_hats = sprm.score_batch(ctx.sprm, trajs, segs)
    if uniform_z:
        zs, flags = [np.ones(t.m) for t in trajs], [False] * len(trajs)
    else:
        zs, flags = _importances(ctx, trajs, denominator)
    out = []
    for t, s, r, z, flag in zip(trajs, segs, r_hats, zs, flags):
        zh = np.full(len(s), 1.0 / len(s)) if uniform_z else hindsight.segment_importance(z, s)
        mod = credit.modulate(r, zh, cfg.scale_mode, t.outcome, cfg.norm_mode)
        fused, turn = _place(ctx, mod, t, s, alpha)
        out.append(RewardVectors(s, r, z, zh, mod, fused, turn, flag or mod.degenerate))
    return out


def sparse_rewards(trajs) -> list[np.ndarray]:
    out = []
    for t in trajs:
        r = np.zeros(t.m)
        r[-1] = t.outcome
        out.append(r)
    return out


def ablate(variant: str, ctx: RewardContext):
    """Reward function ``(trajectories, live policy) -> per-turn rewards`` for one variant."""
    if variant not in VARIANT_NEEDS:
        raise ValueError(f"unknown reward variant {variant!r}")
    cfg = ctx.cfg
    missing = [m for m in VARIANT_NEEDS[variant] if getattr(ctx, "hind" if m == "hindsight" else m) is None]
    if missing:
        raise ValueError(f"variant {variant!r} needs {', '.join(missing)}")

    def denominator(pol):
        return pol if cfg.denominator == "live" else None

    if variant == "sparse":
        return lambda trajs, pol=None: sparse_rewards(trajs)
    if variant == "no-both":

        def no_both(trajs, pol=None):
            out = []
            for t in trajs:
                g = np.mean([turn.grounded for turn in t.turns])
                r = np.zeros(t.m)
                r[-1] = (1.0 - cfg.alpha) * t.outcome + cfg.alpha * g
                out.append(r)
            return out

        return no_both
    if variant == "no-spr":

        def no_spr(trajs, pol=None):
            zs, _ = _importances(ctx, trajs, denominator(pol))
            out = []
            for t, z in zip(trajs, zs):
                share = z / z.sum()
                r = share if cfg.scale_mode == "unit" else t.outcome * share
                out.append(credit.fuse_per_turn(r, t, cfg.alpha))
            return out

        return no_spr
    alpha = 0.0 if variant == "no-ags" else cfg.alpha
    uniform = variant == "no-him"
    return lambda trajs, pol=None: [
        v.turn for v in score_trajectories(ctx, trajs, alpha=alpha, uniform_z=uniform, denominator=denominator(pol))
    ]


# ---------------------------------------------------------------- pipeline


def _write_csv(path, header, rows) -> None:
    with open(ensure_parent(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    return repr(float(x))


def kind_table(results) -> list[list]:
    """Rows (policy, task kind, episodes, success rate) from (name, [(spec, outcome)])."""
    rows = []
    for name, pairs in results:
        kinds = sorted({s.kind for s, _ in pairs})
        for kind in kinds + ["all"]:
            sel = [o for s, o in pairs if kind in ("all", s.kind)]
            rows.append([name, kind, len(sel), _num(np.mean(np.array(sel) >= 1.0)) if sel else ""])
    return rows


def greedy_outcomes(pol: PolicyNet, suite, seed: int) -> list[tuple]:
    eps = make_episodes(suite, 1, seed, stream=1)
    run_episodes(pol, eps, 0.0)
    return [(ep.spec, ep.outcome) for ep in eps]


class Pipeline:
    def __init__(self, cfg: Config):
        cfg.check()
        self.cfg = cfg
        self.root = Path(cfg.out)

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name][0]

    def need(self, stage: str, *names) -> None:
        for n in names:
            p = self.path(n)
            if not p.exists():
                raise MissingArtifactError(stage, p, ARTIFACTS[n][1])

    def s(self, k: int) -> int:
        return sub_seed(self.cfg.seed, k)

    # -- loaders

    def policy_ref(self) -> PolicyNet:
        return PolicyNet(nk.load_params(self.path("policy_ref")))

    def suite(self, name: str):
        return envmod.read_suite(self.path(name))

    def rl_suite(self):
        return envmod.generate_task_suite(self.s(10), self.cfg.rl_tasks, self.cfg.mode, self.cfg.max_turns, "rl")

    def eval_suite(self):
        return envmod.generate_task_suite(self.s(11), self.cfg.eval_tasks, self.cfg.mode, self.cfg.max_turns, "ev")

    def sprm_model(self) -> sprm.SprmModel:
        return sprm.SprmModel(nk.load_params(self.path("sprm")), self.cfg.sprm_frozen)

    def hindsight_model(self) -> hindsight.HindsightNet:
        return hindsight.HindsightNet(nk.load_params(self.path("hindsight")))

    def segments(self, name: str, trajs) -> list[Segmentation]:
        recs = read_segments_jsonl(self.path(name))
        if len(recs) != len(trajs):
            raise ValueError(f"{self.path(name)} has {len(recs)} entries for {len(trajs)} trajectories")
        return [s for _, _, s in recs]

    def context(self, specs, variant: str = "full") -> RewardContext:
        needs = VARIANT_NEEDS[variant]
        self.need("ppo-train", "policy_ref", *needs)
        return RewardContext(
            self.cfg,
            {s.task_id: s for s in specs},
            self.policy_ref(),
            self.sprm_model() if "sprm" in needs else None,
            self.hindsight_model() if "hindsight" in needs else None,
        )

    # -- stages

    def bc_train(self) -> None:
        cfg = self.cfg
        suite = envmod.generate_task_suite(self.s(1), cfg.bc_tasks, cfg.mode, cfg.max_turns, "bc")
        rng = np.random.default_rng(self.s(2))
        demos = []
        for i, spec in enumerate(suite):
            for j in range(cfg.bc_demos_per_task):
                seed = task_env_seed(self.s(2), i * cfg.bc_demos_per_task + j)
                t = envmod.expert_episode(spec, seed, rng, cfg.bc_detour, cfg.bc_noise)
                if t.outcome >= 1.0:
                    demos.append(t)
        net = bc_train(PolicyNet.create(self.s(3)), demos, cfg.bc_epochs, cfg.bc_lr, cfg.bc_batch, self.s(4))
        envmod.write_suite(suite, ensure_parent(self.path("bc_suite")))
        write_jsonl(demos, ensure_parent(self.path("demos")))
        nk.save_params(net.params, ensure_parent(self.path("policy_ref")))
        _write_csv(self.path("bc_curve"), ["epoch", "mean_nll"], [[i, _num(v)] for i, v in enumerate(net.curve)])
        log.info("bc-train: %d demos, nll %.4f -> %.4f", len(demos), net.curve[0], net.curve[-1])

    def collect(self) -> None:
        cfg = self.cfg
        self.need("collect", "policy_ref")
        net = self.policy_ref()
        suite = envmod.generate_task_suite(self.s(5), cfg.collect_tasks, cfg.mode, cfg.max_turns, "ct")
        held = envmod.generate_task_suite(self.s(7), cfg.holdout_tasks, cfg.mode, cfg.max_turns, "ho")
        trajs = collect_rollouts(net, suite, cfg.N, cfg.temperature, cfg.rep_threshold, self.s(6))
        held_trajs = collect_rollouts(net, held, cfg.N, cfg.temperature, cfg.rep_threshold, self.s(8))
        envmod.write_suite(suite, ensure_parent(self.path("collect_suite")))
        envmod.write_suite(held, ensure_parent(self.path("holdout_suite")))
        write_jsonl(trajs, ensure_parent(self.path("rollouts")))
        write_jsonl(held_trajs, ensure_parent(self.path("holdout")))
        log.info("collect: %d trajectories (%.3f success), %d held out", len(trajs), np.mean([t.success for t in trajs]), len(held_trajs))

    def segment(self) -> None:
        cfg = self.cfg
        self.need("segment", "rollouts", "holdout", "collect_suite", "holdout_suite")
        trajs, held = read_jsonl(self.path("rollouts")), read_jsonl(self.path("holdout"))
        specs = {s.task_id: s for s in self.suite("collect_suite") + self.suite("holdout_suite")}
        ctx = RewardContext(cfg, specs, None)
        if cfg.segmenter == "external":
            segs = segment.load_external_segments(cfg.segments_path, trajs)
        else:
            segs = segment_batch(ctx, trajs)
        held_cfg = cfg if cfg.segmenter != "external" else cfg.replace(segmenter="heuristic")
        held_segs = segment_batch(RewardContext(held_cfg, specs, None), held)
        write_segments_jsonl([(t.task_id, i, s) for i, (t, s) in enumerate(zip(trajs, segs))], ensure_parent(self.path("segments")))
        write_segments_jsonl([(t.task_id, i, s) for i, (t, s) in enumerate(zip(held, held_segs))], self.path("holdout_segments"))
        segment.write_stats_csv(segment.segment_stats(trajs, segs), self.path("segment_sizes"))

    def train_sprm(self) -> None:
        cfg = self.cfg
        self.need("train-sprm", "policy_ref", "rollouts", "segments", "holdout", "holdout_segments")
        trajs, held = read_jsonl(self.path("rollouts")), read_jsonl(self.path("holdout"))
        segs, held_segs = self.segments("segments", trajs), self.segments("holdout_segments", held)
        init = sprm.SprmModel.from_policy(self.policy_ref(), self.s(9), cfg.sprm_width, cfg.sprm_frozen)
        m = sprm.train_sprm(init, trajs, segs, cfg.sprm_epochs, cfg.sprm_lr, cfg.sprm_batch, self.s(12), max_norm=None)
        nk.save_params(m.params, ensure_parent(self.path("sprm")))
        _write_csv(self.path("sprm_curve"), ["checkpoint", "loss"], [[i, _num(v)] for i, v in enumerate(m.curve)])
        sums = np.array([r.sum() for r in sprm.score_batch(m, held, held_segs)])
        succ = np.array([t.success for t in held], dtype=bool)
        rows = [
            ["heldout_abs_error", _num(sprm.decomposition_error(m, held, held_segs))],
            ["init_abs_error", _num(sprm.decomposition_error(init, held, held_segs))],
            ["success_mean_sum", _num(sums[succ].mean()) if succ.any() else ""],
            ["failure_mean_sum", _num(sums[~succ].mean()) if (~succ).any() else ""],
        ]
        _write_csv(self.path("sprm_eval"), ["metric", "value"], rows)

    def train_hindsight(self) -> None:
        cfg = self.cfg
        self.need("train-hindsight", "policy_ref", "rollouts", "holdout")
        trajs, held = read_jsonl(self.path("rollouts")), read_jsonl(self.path("holdout"))
        ref = self.policy_ref()
        h = hindsight.hindsight_train(
            hindsight.HindsightNet.from_policy(ref, self.s(13)), trajs, cfg.hindsight_epochs, cfg.hindsight_lr, cfg.hindsight_batch, self.s(14)
        )
        nk.save_params(h.params, ensure_parent(self.path("hindsight")))
        _write_csv(self.path("hindsight_curve"), ["epoch", "masked_nll"], [[i, _num(v)] for i, v in enumerate(h.curve)])
        ok = [t for t in held if t.success]
        rows = [
            ["heldout_success_masked_nll", _num(hindsight.masked_nll(h, ok)) if ok else ""],
            ["heldout_success_policy_nll", _num(mean_nll(ref, ok)) if ok else ""],
        ]
        _write_csv(self.path("hindsight_eval"), ["metric", "value"], rows)

    def score(self) -> None:
        self.need("score", "policy_ref", "sprm", "hindsight", "rollouts", "segments", "collect_suite")
        trajs = read_jsonl(self.path("rollouts"))
        segs = self.segments("segments", trajs)
        ctx = self.context(self.suite("collect_suite"))
        vecs = score_trajectories(ctx, trajs, segs)
        recs, rows = [], []
        for i, (t, v) in enumerate(zip(trajs, vecs)):
            recs.append(
                {
                    "task_id": t.task_id,
                    "traj_index": i,
                    "outcome": t.outcome,
                    "ranges": [list(r) for r in v.seg.ranges],
                    "r_hat": v.r_hat.tolist(),
                    "z_turn": v.z_turn.tolist(),
                    "z_seg": v.z_seg.tolist(),
                    "r_him": v.r_him.values.tolist(),
                    "g": v.fused.grounding.tolist(),
                    "r_fuse": v.fused.values.tolist(),
                    "turn_rewards": v.turn.tolist(),
                    "degenerate": v.degenerate,
                }
            )
            rows.extend(credit.report_rows(t.task_id, i, v.r_hat, v.z_seg, v.r_him, v.fused))
        write_records_jsonl(recs, ensure_parent(self.path("scores")))
        credit.write_reward_report(rows, self.path("rewards"))

    def ppo_train(self, variant: str | None = None, seed: int | None = None, iters: int | None = None) -> ppo.TrainResult:
        cfg = self.cfg
        variant = variant or cfg.reward
        rl, ev = self.rl_suite(), self.eval_suite()
        ctx = self.context(rl, variant)
        out = self.root / "models" / f"ppo-{variant}"
        res = train_variant(ctx, variant, rl, ev, self.s(15) if seed is None else seed, iters, ckpt_dir=out / "iters")
        ppo.write_curve(res.curve, self.root / "reports" / f"ppo-{variant}_curve.csv")
        nk.save_params(res.policy.params, out / "policy_final.ckpt")
        nk.save_params(res.value.params, out / "value_final.ckpt")
        return res

    def eval(self) -> None:
        self.need("eval", "policy_ref")
        suite = self.eval_suite()
        seed = self.s(11)
        policies = [("bc", self.policy_ref())]
        for d in sorted((self.root / "models").glob("ppo-*/policy_final.ckpt")):
            policies.append((d.parent.name, PolicyNet(nk.load_params(d))))
        results = [(name, greedy_outcomes(pol, suite, seed)) for name, pol in policies]
        rows = []
        for name, pairs in results:
            o = np.array([x for _, x in pairs])
            rows.append([name, len(o), _num(np.mean(o >= 1.0)), _num(o.mean())])
        _write_csv(self.path("eval"), ["policy", "episodes", "success_rate", "mean_outcome"], rows)
        _write_csv(self.path("task_success"), ["policy", "task_kind", "episodes", "success_rate"], kind_table(results))

    def report(self) -> None:
        self.need("report", "scores", "rollouts", "segments")
        trajs = read_jsonl(self.path("rollouts"))
        segs = self.segments("segments", trajs)
        segment.write_stats_csv(segment.segment_stats(trajs, segs), self.path("segment_sizes"))
        scores = read_records_jsonl(self.path("scores"))
        _write_csv(self.path("reward_shares"), ["n_segments", "position", "trajectories", "mean_share"], reward_share_rows(scores))
        _write_csv(self.path("case_study"), CASE_COLUMNS, case_study_rows(scores, trajs))
        if not self.path("task_success").exists():
            _write_csv(self.path("task_success"), ["policy", "task_kind", "episodes", "success_rate"], [])
        lines = [f"{NO_SPR_NOTE}\n"]
        for name in ("sprm_eval", "hindsight_eval", "eval"):
            p = self.path(name)
            if p.exists():
                lines.append(f"[{name}]\n{p.read_text()}")
        ensure_parent(self.path("summary")).write_text("".join(lines))

    def run(self, stage: str, **kw):
        if stage == "all":
            for st in STAGES:
                self.run(st, **kw)
            return None
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        log.info("stage %s", stage)
        fn = getattr(self, stage.replace("-", "_"))
        return fn(**kw) if stage == "ppo-train" else fn()


def train_variant(ctx: RewardContext, variant: str, rl_suite, eval_suite, seed: int, iters: int | None = None, ckpt_dir=None) -> ppo.TrainResult:
    """PPO from the reference policy with the given reward variant."""
    cfg = ctx.cfg
    pcfg = ppo.PpoConfig(
        clip_eps=cfg.clip_eps,
        kl_coeff=cfg.kl_coeff,
        lr_policy=cfg.lr_policy,
        lr_critic=cfg.lr_critic,
        epochs=cfg.ppo_epochs,
        minibatch=cfg.ppo_minibatch,
        gamma=cfg.gamma,
        lam=cfg.lam,
        normalize_adv=cfg.normalize_adv,
        tasks_per_iter=cfg.tasks_per_iter,
        episodes_per_task=cfg.episodes_per_task,
        temperature=cfg.ppo_temperature,
        eval_every=cfg.eval_every,
    )
    vn = ppo.ValueNet.from_policy(ctx.ref, seed)
    return ppo.train_loop(
        ctx.ref, vn, rl_suite, ablate(variant, ctx), cfg.ppo_iters if iters is None else iters, pcfg, seed, ctx.ref, eval_suite, ckpt_dir=ckpt_dir
    )


# ---------------------------------------------------------------- reports

CASE_COLUMNS = ["task_id", "traj_index", "segment", "turns", "actions", "r_hat", "z_hat", "r_him"]


def reward_share_rows(scores) -> list[list]:
    """Mean share of modulated reward per segment position, grouped by segment count."""
    acc: dict[tuple[int, int], list[float]] = {}
    for rec in scores:
        r = np.array(rec["r_him"])
        total = r.sum()
        if rec["outcome"] <= 0 or abs(total) < 1e-12:
            continue
        for pos, v in enumerate(r / total, start=1):
            acc.setdefault((len(r), pos), []).append(float(v))
    return [[n, pos, len(v), _num(np.mean(v))] for (n, pos), v in sorted(acc.items())]


def case_study_rows(scores, trajs, limit: int = 5) -> list[list]:
    rows = []
    picked = [rec for rec in scores if rec["outcome"] >= 1.0][:limit]
    for rec in picked:
        t = trajs[rec["traj_index"]]
        for i, (a, b) in enumerate(rec["ranges"]):
            acts = " | ".join(vocab.render(turn.act) for turn in t.turns[a - 1 : b])
            rows.append([rec["task_id"], rec["traj_index"], i + 1, f"{a}-{b}", acts, _num(rec["r_hat"][i]), _num(rec["z_seg"][i]), _num(rec["r_him"][i])])
    return rows
