import json

import numpy as np
import pytest
from conftest import random_traj, traj
from hypothesis import given, settings
from hypothesis import strategies as st

from hisr.trajectory import (
    Segmentation,
    Trajectory,
    TrajectoryParseError,
    Turn,
    filter_collection,
    read_jsonl,
    read_segments_jsonl,
    validate_segmentation,
    validate_trajectory,
    write_jsonl,
    write_segments_jsonl,
)


def test_valid_seven_turn_trajectory():
    t = traj(["go fridge"] * 7)
    assert validate_trajectory(t, 40) == []


def test_empty_and_too_long():
    assert "m ≥ 1" in validate_trajectory(Trajectory("x", (), 1.0), 40)
    long = traj(["go fridge", "go shelf"] * 20 + ["look"], outcome=0.0)
    assert long.m == 41
    assert any(p.startswith("m ≤ max") for p in validate_trajectory(long, 40))


def test_outcome_range_and_grammar():
    bad = Trajectory("x", (Turn((1,), (2,), True),), 1.5)
    problems = validate_trajectory(bad, 40)
    assert any("outcome" in p for p in problems)
    assert any("grammar" in p for p in problems)


def test_repetition_filter():
    looped = traj(["go fridge", "go fridge", "go fridge", "look"], outcome=0.0)
    clean = traj(["go fridge", "open fridge", "look"])
    assert filter_collection([looped, clean], 3) == [clean]
    assert filter_collection([], 3) == []
    two = traj(["go fridge", "go fridge", "look"])
    assert filter_collection([two], 3) == [two]
    with pytest.raises(ValueError):
        filter_collection([clean], 1)


def test_filter_is_idempotent(rng):
    ts = [random_traj(rng) for _ in range(300)]
    once = filter_collection(ts, 2, 12)
    assert filter_collection(once, 2, 12) == once
    assert len(once) < len(ts)


def test_jsonl_round_trip_is_byte_identical(tmp_path, rng):
    ts = [random_traj(rng, task_id=f"r{i}") for i in range(100)]
    ts[0] = Trajectory("odd", ts[0].turns, 1 / 3, env_seed=7, env_version="v")
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(ts, p1)
    back = read_jsonl(p1)
    assert back == ts
    write_jsonl(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_parse_error_names_line(tmp_path):
    p = tmp_path / "t.jsonl"
    good = json.dumps({"task_id": "a", "outcome": 1.0, "turns": [{"obs": [1], "act": [20], "grounded": True}]})
    p.write_text(good + "\n" + json.dumps({"task_id": "b", "turns": []}) + "\n")
    with pytest.raises(TrajectoryParseError) as e:
        read_jsonl(p)
    assert e.value.lineno == 2
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert read_jsonl(empty) == []


def test_segmentation_validation():
    assert validate_segmentation(Segmentation(((1, 1), (2, 3), (4, 5), (6, 7))), 7) == []
    assert validate_segmentation(Segmentation(((1, 2), (4, 5))), 5) == ["gap at turn 3"]
    assert validate_segmentation(Segmentation(((1, 5),)), 5) == []
    assert any("overlap" in p for p in validate_segmentation(Segmentation(((1, 3), (3, 5))), 5))
    assert any("not covered" in p for p in validate_segmentation(Segmentation(((1, 3),)), 5))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.sets(st.integers(1, 40)))
def test_from_boundaries_always_valid(m, ends):
    s = Segmentation.from_boundaries(m, ends)
    assert validate_segmentation(s, m) == []
    assert sum(s.sizes()) == m


def test_segment_sidecar_round_trip(tmp_path):
    recs = [("a", 0, Segmentation(((1, 2), (3, 3)))), ("b", 1, Segmentation(((1, 1),)))]
    p = tmp_path / "s.jsonl"
    write_segments_jsonl(recs, p)
    assert read_segments_jsonl(p) == recs
