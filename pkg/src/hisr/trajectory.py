"""Trajectory data model, validation, filtering and JSONL persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import vocab


class TrajectoryParseError(ValueError):
    """Malformed JSONL record; ``lineno`` is 1-based."""

    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno
        self.reason = reason


@dataclass(frozen=True)
class Turn:
    obs: tuple[int, ...]
    act: tuple[int, ...]
    grounded: bool

    def __post_init__(self):
        object.__setattr__(self, "obs", tuple(int(t) for t in self.obs))
        object.__setattr__(self, "act", tuple(int(t) for t in self.act))
        object.__setattr__(self, "grounded", bool(self.grounded))


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    turns: tuple[Turn, ...]
    outcome: float
    # Set on imported records whose actions did not parse; never set by sampling.
    invalid_format: bool = False
    # Environment reset seed and dynamics version; needed to replay the episode.
    env_seed: int | None = None
    env_version: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "outcome", float(self.outcome))

    @property
    def m(self) -> int:
        return len(self.turns)

    @property
    def success(self) -> bool:
        return self.outcome >= 1.0

    def actions(self) -> list[tuple[int, ...]]:
        return [t.act for t in self.turns]


@dataclass(frozen=True)
class Segmentation:
    """Ordered 1-based inclusive turn ranges, one per sub-goal segment."""

    ranges: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple((int(a), int(b)) for a, b in self.ranges))

    def __len__(self):
        return len(self.ranges)

    def __iter__(self):
        return iter(self.ranges)

    def sizes(self) -> list[int]:
        return [b - a + 1 for a, b in self.ranges]

    def segment_of_turn(self) -> list[int]:
        """0-based segment index for each turn (turns indexed from 0)."""
        out = []
        for i, (a, b) in enumerate(self.ranges):
            out.extend([i] * (b - a + 1))
        return out

    @classmethod
    def from_boundaries(cls, m: int, ends: Iterable[int]) -> "Segmentation":
        """Build from the set of segment-final turns (1-based); ``m`` is always an end."""
        ends = sorted(set(e for e in ends if 1 <= e < m) | {m})
        start, ranges = 1, []
        for e in ends:
            ranges.append((start, e))
            start = e + 1
        return cls(tuple(ranges))

    @classmethod
    def per_turn(cls, m: int) -> "Segmentation":
        return cls(tuple((k, k) for k in range(1, m + 1)))


def validate_trajectory(t: Trajectory, max_turns: int) -> list[str]:
    """Every violated invariant of ``t``; an empty list means the trajectory is valid."""
    problems = []
    if t.m < 1:
        problems.append("m ≥ 1")
    if t.m > max_turns:
        problems.append(f"m ≤ max ({t.m} > {max_turns})")
    if not (0.0 <= t.outcome <= 1.0) or math.isnan(t.outcome):
        problems.append(f"outcome in [0,1] (got {t.outcome})")
    if t.invalid_format:
        problems.append("wrong format")
    for k, turn in enumerate(t.turns, start=1):
        if not turn.obs:
            problems.append(f"observation non-empty (turn {k})")
        if not 1 <= len(turn.act) <= 3:
            problems.append(f"action length in [1,3] (turn {k})")
        if any(not 0 <= tok < vocab.VOCAB_SIZE for tok in turn.obs + turn.act):
            problems.append(f"token id < vocabulary size (turn {k})")
        elif 1 <= len(turn.act) <= 3 and not vocab.is_grammatical(turn.act):
            problems.append(f"action grammar (turn {k})")
    return problems


def has_repetition(t: Trajectory, rep_threshold: int) -> bool:
    run = 1
    for prev, cur in zip(t.turns, t.turns[1:]):
        run = run + 1 if cur.act == prev.act else 1
        if run >= rep_threshold:
            return True
    return False


def filter_collection(ts: Sequence[Trajectory], rep_threshold: int = 3, max_turns: int = 40) -> list[Trajectory]:
    """Drop trajectories with ``rep_threshold`` identical consecutive actions or invalid structure."""
    if rep_threshold < 2:
        raise ValueError("rep_threshold must be ≥ 2")
    return [t for t in ts if not has_repetition(t, rep_threshold) and not validate_trajectory(t, max_turns)]


def validate_segmentation(s: Segmentation, m: int) -> list[str]:
    if m < 1:
        raise ValueError("m must be ≥ 1")
    problems = []
    if not s.ranges:
        return ["no segments"]
    expected = 1
    for a, b in s.ranges:
        if b < a:
            problems.append(f"empty range ({a},{b})")
        if a > expected:
            gap = f"{expected}" if a - 1 == expected else f"{expected}-{a - 1}"
            problems.append(f"gap at turn {gap}")
        elif a < expected:
            problems.append(f"overlap at turn {a}")
        expected = max(expected, b + 1)
    last = s.ranges[-1][1]
    if last < m:
        problems.append(f"turns {last + 1}-{m} not covered")
    elif last > m:
        problems.append(f"range end {last} beyond m={m}")
    return problems


# ---------------------------------------------------------------- persistence


def trajectory_to_dict(t: Trajectory) -> dict:
    d = {
        "task_id": t.task_id,
        "outcome": t.outcome,
        "turns": [{"obs": list(u.obs), "act": list(u.act), "grounded": u.grounded} for u in t.turns],
    }
    if t.invalid_format:
        d["invalid_format"] = True
    if t.env_seed is not None or t.env_version is not None:
        d["env"] = {"version": t.env_version, "seed": t.env_seed}
    return d


def trajectory_from_dict(d: dict) -> Trajectory:
    for key in ("task_id", "outcome", "turns"):
        if key not in d:
            raise KeyError(f"missing field {key!r}")
    turns = []
    for u in d["turns"]:
        for key in ("obs", "act", "grounded"):
            if key not in u:
                raise KeyError(f"missing turn field {key!r}")
        turns.append(Turn(u["obs"], u["act"], u["grounded"]))
    env = d.get("env") or {}
    return Trajectory(
        str(d["task_id"]),
        tuple(turns),
        float(d["outcome"]),
        bool(d.get("invalid_format", False)),
        env.get("seed"),
        env.get("version"),
    )


def _dump(d: dict) -> str:
    return json.dumps(d, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(ts: Iterable[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in ts:
            fh.write(_dump(trajectory_to_dict(t)) + "\n")


def _read_records(path, convert):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(convert(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise TrajectoryParseError(path, lineno, str(exc)) from exc
    return out


def read_jsonl(path) -> list[Trajectory]:
    return _read_records(path, trajectory_from_dict)


def write_segments_jsonl(records: Iterable[tuple[str, int, Segmentation]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task_id, idx, seg in records:
            fh.write(_dump({"task_id": task_id, "traj_index": idx, "ranges": [list(r) for r in seg.ranges]}) + "\n")


def read_segments_jsonl(path) -> list[tuple[str, int, Segmentation]]:
    def convert(d):
        return str(d["task_id"]), int(d["traj_index"]), Segmentation(tuple(tuple(r) for r in d["ranges"]))

    return _read_records(path, convert)


def write_records_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_dump(r) + "\n")


def read_records_jsonl(path) -> list[dict]:
    return _read_records(path, lambda d: d)


def ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path
