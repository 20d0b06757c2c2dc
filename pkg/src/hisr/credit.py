"""Reward modulation by segment importance, grounding fusion and turn placement."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .trajectory import Segmentation, Trajectory, ensure_parent, validate_segmentation

DEGENERATE_MASS = 1e-12


@dataclass(frozen=True)
class ModulatedRewards:
    values: np.ndarray
    scale_mode: str
    degenerate: bool = False


@dataclass(frozen=True)
class FusedRewards:
    values: np.ndarray
    grounding: np.ndarray
    alpha: float


def modulate(r_hat, z_hat, scale_mode: str = "outcome", R: float = 1.0, norm: str = "l1") -> ModulatedRewards:
    """Elementwise product of scores and importances, normalised.

    ``unit`` mode returns the normalised vector; ``outcome`` mode rescales it by ``R``.
    """
    r_hat = np.asarray(r_hat, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if r_hat.shape != z_hat.shape or r_hat.ndim != 1:
        raise ValueError(f"score and importance lengths differ: {r_hat.shape} vs {z_hat.shape}")
    if scale_mode not in ("unit", "outcome"):
        raise ValueError(f"unknown scale mode {scale_mode!r}")
    p = r_hat * z_hat
    mass = np.abs(p).sum()
    if mass < DEGENERATE_MASS:
        return ModulatedRewards(p, scale_mode, True)
    if norm == "l1":
        out = p / mass
    elif norm == "l2":
        out = p / np.sqrt(np.sum(p * p))
    else:
        raise ValueError(f"unknown norm {norm!r}")
    if scale_mode == "outcome":
        out = R * out
    return ModulatedRewards(out, scale_mode)


def segment_grounding(t: Trajectory, s: Segmentation) -> np.ndarray:
    g = np.array([turn.grounded for turn in t.turns], dtype=np.float64)
    return np.array([g[a - 1 : b].mean() for a, b in s.ranges])


def fuse_grounding(r_him, t: Trajectory, s: Segmentation, alpha: float = 0.3) -> FusedRewards:
    """Blend ``(1 − α)·r_him + α·g`` with g the grounded fraction of each segment."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("α must lie in [0, 1]")
    r_him = np.asarray(getattr(r_him, "values", r_him), dtype=np.float64)
    if len(r_him) != len(s):
        raise ValueError(f"{len(r_him)} rewards for {len(s)} segments")
    g = segment_grounding(t, s)
    return FusedRewards((1.0 - alpha) * r_him + alpha * g, g, alpha)


def fuse_per_turn(turn_rewards, t: Trajectory, alpha: float = 0.3) -> np.ndarray:
    """Turn-level variant: every turn gets its own grounding bonus."""
    g = np.array([turn.grounded for turn in t.turns], dtype=np.float64)
    return (1.0 - alpha) * np.asarray(turn_rewards, dtype=np.float64) + alpha * g


def to_turn_rewards(fused, s: Segmentation, m: int) -> np.ndarray:
    """Place each segment's reward on its final turn."""
    values = np.asarray(getattr(fused, "values", fused), dtype=np.float64)
    problems = validate_segmentation(s, m)
    if problems:
        raise ValueError("; ".join(problems))
    if len(values) != len(s):
        raise ValueError(f"{len(values)} rewards for {len(s)} segments")
    out = np.zeros(m)
    for v, (_, end) in zip(values, s.ranges):
        out[end - 1] = v
    return out


REPORT_COLUMNS = ["task_id", "traj_index", "segment", "r_hat", "z_hat", "r_him", "g", "r_fuse"]


def report_rows(task_id: str, traj_index: int, r_hat, z_hat, r_him, fused: FusedRewards) -> list[list]:
    r_him = getattr(r_him, "values", r_him)
    return [
        [task_id, traj_index, i + 1, float(a), float(b), float(c), float(g), float(f)]
        for i, (a, b, c, g, f) in enumerate(zip(r_hat, z_hat, r_him, fused.grounding, fused.values))
    ]


def write_reward_report(rows, path) -> None:
    with open(ensure_parent(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
