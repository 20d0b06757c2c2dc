"""Flat ``key = value`` run configuration with typed, documented defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 0
    out: str = "runs/default"
    mode: str = "binary"  # binary | fractional
    max_turns: int = 12

    # behaviour cloning
    bc_tasks: int = 2400
    bc_demos_per_task: int = 5
    bc_detour: float = 0.5
    bc_noise: float = 0.05
    bc_epochs: int = 3
    bc_lr: float = 1e-2
    bc_batch: int = 32

    # rollout collection
    collect_tasks: int = 500
    holdout_tasks: int = 100
    N: int = 10
    temperature: float = 0.7
    rep_threshold: int = 3

    # segmentation
    segmenter: str = "oracle"  # oracle | heuristic | external
    segments_path: str = ""
    short_threshold: int = -1  # -1: 4 in fractional mode, 0 in binary mode

    # segmental process reward model
    sprm_epochs: int = 1
    sprm_lr: float = 2e-3
    sprm_batch: int = 16
    sprm_width: int = 32
    sprm_frozen: bool = False

    # hindsight model
    hindsight_epochs: int = 1
    hindsight_lr: float = 3e-3
    hindsight_batch: int = 32

    # credit
    beta: float = 0.3
    alpha: float = 0.3
    log_ratio_clip: float = 20.0
    scale_mode: str = "outcome"  # outcome | unit
    norm_mode: str = "l1"  # l1 | l2
    grounding: str = "segment"  # segment | turn
    denominator: str = "reference"  # reference | live

    # PPO
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    kl_coeff: float = 1e-2
    lr_policy: float = 5e-4
    lr_critic: float = 3e-3
    ppo_epochs: int = 2
    ppo_minibatch: int = 64
    ppo_iters: int = 40
    tasks_per_iter: int = 32
    episodes_per_task: int = 4
    ppo_temperature: float = 1.0
    normalize_adv: bool = True
    reward: str = "full"
    rl_tasks: int = 200
    eval_tasks: int = 500
    eval_every: int = 5

    def replace(self, **kw) -> "Config":
        d = asdict(self)
        for k, v in kw.items():
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = _coerce(k, v)
        cfg = Config(**d)
        cfg.check()
        return cfg

    def check(self) -> None:
        choices = {
            "mode": ("binary", "fractional"),
            "segmenter": ("oracle", "heuristic", "external"),
            "scale_mode": ("outcome", "unit"),
            "norm_mode": ("l1", "l2"),
            "grounding": ("segment", "turn"),
            "denominator": ("reference", "live"),
            "reward": REWARD_VARIANTS,
        }
        for k, allowed in choices.items():
            if getattr(self, k) not in allowed:
                raise ConfigError(f"{k} must be one of {', '.join(allowed)} (got {getattr(self, k)!r})")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.rep_threshold < 2:
            raise ConfigError("rep_threshold must be ≥ 2")
        if self.segmenter == "external" and not self.segments_path:
            raise ConfigError("segmenter = external needs segments_path")

    @property
    def segment_threshold(self) -> int:
        if self.short_threshold >= 0:
            return self.short_threshold
        return 4 if self.mode == "fractional" else 0

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


REWARD_VARIANTS = ("full", "sparse", "no-him", "no-spr", "no-both", "no-ags")
_TYPES = {f.name: f.type for f in fields(Config)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw):
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw


def parse(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (x.strip() for x in line.split("=", 1))
        if k not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {k!r}")
        out[k] = v
    return out


def load(path=None, **overrides) -> Config:
    values = parse(Path(path).read_text(), str(path)) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Config().replace(**values)
