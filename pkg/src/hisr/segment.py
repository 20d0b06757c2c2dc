"""Trajectory segmentation: environment oracle, label-free heuristic and external sidecars."""

from __future__ import annotations

import csv
from collections import Counter

from . import vocab
from .env import TaskSpec, oracle_segment_labels
from .trajectory import Segmentation, Trajectory, ensure_parent, read_segments_jsonl, validate_segmentation

# Verbs that only set up the next action; they take on that action's class.
PREPARATORY_VERBS = {"go", "look", "open"}


class SegmentationError(ValueError):
    pass


def segment_oracle(spec: TaskSpec, t: Trajectory) -> Segmentation:
    return oracle_segment_labels(spec, t)


def _effective_classes(t: Trajectory) -> list[str | None]:
    """Class per turn; ungrounded turns get None, set-up turns borrow the next effect's class."""
    out: list[str | None] = [None] * t.m
    pending = []
    for k, turn in enumerate(t.turns):
        if not turn.grounded:
            continue
        if vocab.sym(turn.act[0]) in PREPARATORY_VERBS:
            pending.append(k)
            continue
        cls = vocab.verb_class(turn.act)
        for p in pending:
            out[p] = cls
        pending = []
        out[k] = cls
    for p in pending:
        out[p] = "navigate"
    return out


def segment_heuristic(t: Trajectory, short_threshold: int = 0) -> Segmentation:
    """Boundaries where the verb class changes between grounded turns or a failure run ends.

    Trajectories of at most ``short_threshold`` turns get one turn per segment.
    """
    m = t.m
    if m <= short_threshold:
        return Segmentation.per_turn(m)
    cls = _effective_classes(t)
    ends = []
    for k in range(m - 1):
        a, b = t.turns[k], t.turns[k + 1]
        if a.grounded and b.grounded and cls[k] != cls[k + 1]:
            ends.append(k + 1)
        elif not a.grounded and b.grounded:
            ends.append(k + 1)
    return Segmentation.from_boundaries(m, ends)


def boundary_agreement(a: Segmentation, b: Segmentation) -> float:
    """Fraction of candidate cut points (between consecutive turns) on which both agree."""
    m = a.ranges[-1][1]
    if m < 2:
        return 1.0
    ea = {e for _, e in a.ranges[:-1]}
    eb = {e for _, e in b.ranges[:-1]}
    return sum((k in ea) == (k in eb) for k in range(1, m)) / (m - 1)


def load_external_segments(path, ts: list[Trajectory]) -> list[Segmentation]:
    """Read a sidecar keyed by (task_id, traj_index) and check it against ``ts``."""
    table = {}
    for task_id, idx, seg in read_segments_jsonl(path):
        if (task_id, idx) in table:
            raise SegmentationError(f"duplicate sidecar entry for {task_id}#{idx}")
        table[(task_id, idx)] = seg
    out = []
    for i, t in enumerate(ts):
        seg = table.pop((t.task_id, i), None)
        if seg is None:
            raise SegmentationError(f"no segmentation for trajectory {t.task_id}#{i}")
        problems = validate_segmentation(seg, t.m)
        if problems:
            raise SegmentationError(f"trajectory {t.task_id}#{i}: {'; '.join(problems)}")
        out.append(seg)
    if table:
        task_id, idx = next(iter(table))
        raise SegmentationError(f"sidecar entry {task_id}#{idx} matches no trajectory")
    return out


def segment_stats(trajs, segs) -> dict[str, Counter]:
    """Turns-per-segment counts split by outcome class (success / failure)."""
    stats = {"success": Counter(), "failure": Counter()}
    for t, s in zip(trajs, segs):
        stats["success" if t.success else "failure"].update(s.sizes())
    return stats


def stats_rows(stats: dict[str, Counter]) -> list[tuple[int, int, str]]:
    return [(size, n, cls) for cls in ("success", "failure") for size, n in sorted(stats[cls].items())]


def write_stats_csv(stats: dict[str, Counter], path) -> None:
    with open(ensure_parent(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment_size", "count", "outcome_class"])
        w.writerows(stats_rows(stats))
