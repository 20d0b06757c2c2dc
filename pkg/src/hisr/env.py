"""Procedurally generated household tasks with explicit sub-goal structure.

Every task follows locate → acquire → (transform …) → deposit. The target
object's receptacle is drawn from a per-object prior, so a policy that has
only seen the goal tokens must guess where to look; distractor objects are
scattered over the receptacles at reset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import vocab
from .trajectory import Segmentation, Trajectory, Turn
from .vocab import ID

ENV_VERSION = "subgoal-env/1"
NONE = -1

STORAGE = ["fridge", "cabinet", "drawer", "shelf", "countertop", "stoveburner"]

# Where each object tends to be found: (receptacle, weight) pairs.
HOME_PRIOR: dict[str, list[tuple[str, float]]] = {
    "apple": [("fridge", 0.6), ("countertop", 0.3), ("shelf", 0.1)],
    "bowl": [("cabinet", 0.6), ("fridge", 0.3), ("shelf", 0.1)],
    "cup": [("cabinet", 0.6), ("countertop", 0.3), ("drawer", 0.1)],
    "mug": [("shelf", 0.6), ("cabinet", 0.3), ("countertop", 0.1)],
    "plate": [("cabinet", 0.6), ("shelf", 0.3), ("countertop", 0.1)],
    "potato": [("fridge", 0.6), ("countertop", 0.3), ("stoveburner", 0.1)],
    "egg": [("fridge", 0.6), ("countertop", 0.3), ("cabinet", 0.1)],
    "bread": [("countertop", 0.6), ("cabinet", 0.3), ("fridge", 0.1)],
    "lettuce": [("fridge", 0.6), ("countertop", 0.3), ("shelf", 0.1)],
    "tomato": [("fridge", 0.6), ("countertop", 0.3), ("drawer", 0.1)],
    "knife": [("drawer", 0.6), ("countertop", 0.3), ("cabinet", 0.1)],
    "spoon": [("drawer", 0.6), ("countertop", 0.3), ("shelf", 0.1)],
    "soapbar": [("shelf", 0.6), ("cabinet", 0.3), ("countertop", 0.1)],
    "cloth": [("drawer", 0.6), ("shelf", 0.3), ("cabinet", 0.1)],
    "pot": [("stoveburner", 0.6), ("cabinet", 0.3), ("shelf", 0.1)],
    "pan": [("stoveburner", 0.6), ("cabinet", 0.3), ("drawer", 0.1)],
}

# kind -> transform verbs applied between acquire and deposit
TASK_KINDS: dict[str, tuple[str, ...]] = {
    "pick": (),
    "clean": ("clean",),
    "heat": ("heat",),
    "cool": ("cool",),
    "clean_cool": ("clean", "cool"),
}
KIND_WEIGHTS = {"pick": 0.25, "clean": 0.2, "heat": 0.2, "cool": 0.2, "clean_cool": 0.15}


class TaskMismatchError(ValueError):
    """A trajectory does not replay in the environment of the given task."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    target_object: int
    source: int
    target: int
    closed: frozenset
    sub_goal_names: tuple[str, ...]
    sub_goals: tuple[tuple[tuple[int, ...], ...], ...]
    distractor_objects: tuple[int, ...]
    max_turns: int = 12
    mode: str = "binary"

    def __post_init__(self):
        if len(self.sub_goals) < 2:
            raise ValueError("a task needs at least 2 sub-goals")
        for sg in self.sub_goals:
            for a in sg:
                if not vocab.is_grammatical(a):
                    raise ValueError(f"required action {vocab.render(a)!r} is not grammatical")

    @property
    def n_sub_goals(self) -> int:
        return len(self.sub_goals)

    def goal_tokens(self) -> tuple[int, ...]:
        transforms = tuple(ID[v] for v in TASK_KINDS[self.kind])
        return (ID["TASK"],) + transforms + (self.target_object, self.target)

    def expert_actions(self) -> list[tuple[int, ...]]:
        return [a for sg in self.sub_goals for a in sg]

    def to_dict(self) -> dict:
        return {
            "env_version": ENV_VERSION,
            "task_id": self.task_id,
            "kind": self.kind,
            "target_object": vocab.sym(self.target_object),
            "source": vocab.sym(self.source),
            "target": vocab.sym(self.target),
            "closed": sorted(vocab.sym(r) for r in self.closed),
            "distractors": [vocab.sym(o) for o in self.distractor_objects],
            "max_turns": self.max_turns,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        if d.get("env_version", ENV_VERSION) != ENV_VERSION:
            raise ValueError(f"task {d.get('task_id')} was built for {d['env_version']}, not {ENV_VERSION}")
        return build_task(
            d["task_id"],
            d["kind"],
            ID[d["target_object"]],
            ID[d["source"]],
            ID[d["target"]],
            frozenset(ID[r] for r in d["closed"]),
            tuple(ID[o] for o in d["distractors"]),
            d["max_turns"],
            d["mode"],
        )


def build_task(task_id, kind, obj, source, target, closed, distractors, max_turns=12, mode="binary") -> TaskSpec:
    """Derive the ordered required actions for a task by simulating the expert."""
    names, goals = [], []
    location, is_closed = NONE, set(closed)

    def goto(r, acts):
        nonlocal location
        if location != r:
            acts.append((ID["go"], r))
            location = r

    def ensure_open(r, acts):
        if r in is_closed:
            acts.append((ID["open"], r))
            is_closed.discard(r)

    acts = []
    goto(source, acts)
    names.append("locate")
    goals.append(tuple(acts))

    acts = []
    ensure_open(source, acts)
    acts.append((ID["take"], obj, source))
    names.append("acquire")
    goals.append(tuple(acts))

    for verb in TASK_KINDS[kind]:
        acts = []
        site = vocab.TRANSFORM_SITE[ID[verb]]
        goto(site, acts)
        acts.append((ID[verb], obj, site))
        names.append(verb)
        goals.append(tuple(acts))

    acts = []
    goto(target, acts)
    ensure_open(target, acts)
    acts.append((ID["put"], obj, target))
    names.append("deposit")
    goals.append(tuple(acts))

    return TaskSpec(
        task_id=task_id,
        kind=kind,
        target_object=obj,
        source=source,
        target=target,
        closed=frozenset(closed),
        sub_goal_names=tuple(names),
        sub_goals=tuple(goals),
        distractor_objects=tuple(distractors),
        max_turns=max_turns,
        mode=mode,
    )


def generate_task_suite(seed: int, n: int, mode: str = "binary", max_turns: int = 12, prefix: str = "t") -> list[TaskSpec]:
    if n < 1:
        raise ValueError("n ≥ 1 required")
    if mode not in ("binary", "fractional"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    kinds = list(KIND_WEIGHTS)
    kind_p = np.array([KIND_WEIGHTS[k] for k in kinds])
    out = []
    for i in range(n):
        kind = kinds[rng.choice(len(kinds), p=kind_p)]
        obj_name = vocab.OBJECTS[rng.integers(len(vocab.OBJECTS))]
        homes = HOME_PRIOR[obj_name]
        w = np.array([p for _, p in homes])
        source = ID[homes[rng.choice(len(homes), p=w / w.sum())][0]]
        targets = [ID[r] for r in STORAGE if kind != "pick" or ID[r] != source]
        target = targets[rng.integers(len(targets))]
        closed = frozenset(r for r in sorted(vocab.OPENABLE) if rng.random() < 0.5)
        others = [o for o in vocab.OBJECT_IDS if o != ID[obj_name]]
        n_distract = int(rng.integers(4, 7))
        distractors = tuple(sorted(rng.choice(others, size=n_distract, replace=False).tolist()))
        out.append(
            build_task(f"{prefix}{seed}-{i:04d}", kind, ID[obj_name], source, target, closed, distractors, max_turns, mode)
        )
    return out


def write_suite(specs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


def read_suite(path) -> list[TaskSpec]:
    with open(path, encoding="utf-8") as fh:
        return [TaskSpec.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class EnvState:
    sub_goal: int
    progress: int
    location: int
    inventory: frozenset
    contents: tuple  # ((receptacle, frozenset(objects)), ...) in receptacle-id order
    closed: frozenset
    applied: frozenset  # transform verbs already applied to the target object
    rng_seed: int
    turn: int = 0

    def world_key(self) -> tuple:
        """Everything except the turn counter, for state-equality checks."""
        return (
            self.sub_goal,
            self.progress,
            self.location,
            tuple(sorted(self.inventory)),
            tuple((r, tuple(sorted(objs))) for r, objs in self.contents),
            tuple(sorted(self.closed)),
            tuple(sorted(self.applied)),
            self.rng_seed,
        )

    def objects_in(self, r: int) -> frozenset:
        return dict(self.contents)[r]


@dataclass(frozen=True)
class StepResult:
    observation: tuple[int, ...]
    grounded: bool
    done: bool
    outcome: float | None = None


def _layout(spec: TaskSpec, seed: int) -> tuple:
    rng = np.random.default_rng([seed, 0x5EED])
    contents = {r: set() for r in vocab.RECEPTACLE_IDS}
    contents[spec.source].add(spec.target_object)
    for o in spec.distractor_objects:
        contents[vocab.RECEPTACLE_IDS[rng.integers(len(vocab.RECEPTACLE_IDS))]].add(o)
    return tuple((r, frozenset(contents[r])) for r in vocab.RECEPTACLE_IDS)


def reset(spec: TaskSpec, seed: int) -> tuple[EnvState, tuple[int, ...]]:
    state = EnvState(
        sub_goal=0,
        progress=0,
        location=NONE,
        inventory=frozenset(),
        contents=_layout(spec, seed),
        closed=frozenset(spec.closed),
        applied=frozenset(),
        rng_seed=seed,
    )
    return state, spec.goal_tokens()


def _view(state: EnvState, r: int, lead: int) -> tuple[int, ...]:
    if r in state.closed:
        return (lead, r, ID["CLOSED"])
    objs = sorted(state.objects_in(r))
    if not objs:
        return (lead, r, ID["EMPTY"])
    return (lead, r, ID["CONTAINS"], *objs)


def _with_contents(state: EnvState, r: int, objs) -> tuple:
    return tuple((q, frozenset(objs) if q == r else v) for q, v in state.contents)


def _progress(spec: TaskSpec, state: EnvState) -> int:
    """Leading required actions of the current sub-goal whose effects currently hold."""
    if state.sub_goal >= spec.n_sub_goals:
        return 0
    p = 0
    for a in spec.sub_goals[state.sub_goal][:-1]:
        verb = a[0]
        if verb == ID["go"] and state.location == a[1]:
            p += 1
        elif verb == ID["open"] and a[1] not in state.closed:
            p += 1
        else:
            break
    return p


def _apply(spec: TaskSpec, state: EnvState, action) -> tuple[EnvState | None, tuple[int, ...]]:
    """Physical effect of an action, or (None, obs) if it is not executable."""
    verb, args = action[0], action[1:]
    name = vocab.sym(verb)
    here = state.location
    if name == "go":
        (r,) = args
        if r == here:
            return None, ()
        s = replace(state, location=r)
        return s, _view(s, r, ID["AT"])
    if name == "open":
        (r,) = args
        if r != here or r not in state.closed:
            return None, ()
        s = replace(state, closed=state.closed - {r})
        return s, _view(s, r, ID["OPEN"])
    if name == "look":
        if here == NONE:
            return state, (ID["EMPTY"],)
        return state, _view(state, here, ID["AT"])
    o, r = args
    if r != here or r in state.closed and name in ("take", "put"):
        return None, ()
    if name == "take":
        if state.inventory or o not in state.objects_in(r):
            return None, ()
        s = replace(state, inventory=frozenset({o}), contents=_with_contents(state, r, state.objects_in(r) - {o}))
        return s, (ID["HOLDING"], o)
    if name == "put":
        if o not in state.inventory:
            return None, ()
        s = replace(state, inventory=frozenset(), contents=_with_contents(state, r, state.objects_in(r) | {o}))
        return s, (ID["PLACED"], o, r)
    # clean / heat / cool
    if o not in state.inventory or vocab.TRANSFORM_SITE[verb] != r:
        return None, ()
    s = state
    if o == spec.target_object:
        s = replace(state, applied=state.applied | {verb})
    return s, (vocab.TRANSFORM_ATOM[verb], o)


def _outcome(spec: TaskSpec, state: EnvState) -> float:
    if spec.mode == "binary":
        return 1.0 if state.sub_goal >= spec.n_sub_goals else 0.0
    return state.sub_goal / spec.n_sub_goals


def step(spec: TaskSpec, state: EnvState, action) -> tuple[EnvState, StepResult]:
    """Advance one turn. Inadmissible actions leave the world untouched."""
    action = tuple(action)
    if not vocab.is_grammatical(action):
        raise ValueError(f"action {action} does not conform to the grammar")
    new, obs = _apply(spec, state, action)
    grounded = new is not None
    if not grounded:
        new, obs = state, (ID["NOTHING"],)
    elif new.sub_goal < spec.n_sub_goals:
        # A grounded final action implies its preconditions (location, open receptacle, holding).
        if action == spec.sub_goals[new.sub_goal][-1]:
            new = replace(new, sub_goal=new.sub_goal + 1)
        new = replace(new, progress=_progress(spec, new))
    new = replace(new, turn=state.turn + 1)
    done = new.sub_goal >= spec.n_sub_goals or new.turn >= spec.max_turns
    return new, StepResult(obs, grounded, done, _outcome(spec, new) if done else None)


def replay(spec: TaskSpec, t: Trajectory, seed: int | None = None) -> list[int]:
    """Re-run ``t`` from reset; return the active sub-goal index before each turn.

    Raises TaskMismatchError if observations, grounding or outcome differ.
    """
    seed = t.env_seed if seed is None else seed
    if seed is None:
        raise TaskMismatchError(f"trajectory of {t.task_id} carries no environment seed")
    if t.task_id != spec.task_id:
        raise TaskMismatchError(f"trajectory task {t.task_id} != spec {spec.task_id}")
    state, obs = reset(spec, seed)
    labels = []
    res = None
    for k, turn in enumerate(t.turns, start=1):
        if res is not None and res.done:
            raise TaskMismatchError(f"{t.task_id}: episode ended before turn {k}")
        if turn.obs != obs:
            raise TaskMismatchError(f"{t.task_id}: observation mismatch at turn {k}")
        labels.append(state.sub_goal)
        state, res = step(spec, state, turn.act)
        if res.grounded != turn.grounded:
            raise TaskMismatchError(f"{t.task_id}: grounding mismatch at turn {k}")
        obs = res.observation
    if res is not None and res.done and abs(res.outcome - t.outcome) > 0.0:
        raise TaskMismatchError(f"{t.task_id}: outcome {t.outcome} != replayed {res.outcome}")
    return labels


def oracle_segment_labels(spec: TaskSpec, t: Trajectory) -> Segmentation:
    """Assign each turn to the sub-goal active when it was taken; merge equal neighbours."""
    labels = replay(spec, t)
    ends = [k for k in range(1, len(labels)) if labels[k] != labels[k - 1]]
    return Segmentation.from_boundaries(len(labels), ends)


def _where(state: EnvState, obj: int) -> int:
    for r, objs in state.contents:
        if obj in objs:
            return r
    return NONE


def expert_next_action(spec: TaskSpec, state: EnvState) -> tuple[int, ...]:
    """Privileged corrective action from any reachable state."""
    obj = spec.target_object
    sg = spec.sub_goal_names[min(state.sub_goal, spec.n_sub_goals - 1)]
    here = state.location
    if sg == "locate":
        return (ID["go"], spec.source)
    if state.inventory and obj not in state.inventory:
        (other,) = state.inventory
        if here == NONE:
            return (ID["go"], ID["countertop"])
        if here in state.closed:
            return (ID["open"], here)
        return (ID["put"], other, here)
    if obj not in state.inventory:
        r = _where(state, obj)
        if here != r:
            return (ID["go"], r)
        if r in state.closed:
            return (ID["open"], r)
        return (ID["take"], obj, r)
    if sg == "deposit":
        if here != spec.target:
            return (ID["go"], spec.target)
        if here in state.closed:
            return (ID["open"], here)
        return (ID["put"], obj, here)
    verb = ID[sg]
    site = vocab.TRANSFORM_SITE[verb]
    if here != site:
        return (ID["go"], site)
    return (verb, obj, site)


def random_action(rng: np.random.Generator) -> tuple[int, ...]:
    action = []
    while allowed := vocab.allowed_next(action):
        action.append(int(allowed[rng.integers(len(allowed))]))
    return tuple(action)


def expert_episode(
    spec: TaskSpec,
    seed: int,
    rng: np.random.Generator | None = None,
    detour_prob: float = 0.0,
    noise: float = 0.0,
) -> Trajectory:
    """Privileged expert run.

    With probability ``detour_prob`` it first searches a plausible wrong
    receptacle; each later turn is replaced by a random action with
    probability ``noise``, after which the expert corrects course.
    """
    state, obs = reset(spec, seed)
    plan = []
    if rng is not None and rng.random() < detour_prob:
        homes = [ID[r] for r, _ in HOME_PRIOR[vocab.sym(spec.target_object)] if ID[r] != spec.source]
        wrong = homes[rng.integers(len(homes))]
        plan.append((ID["go"], wrong))
        if wrong in spec.closed:
            plan.append((ID["open"], wrong))
    turns, res = [], None
    while res is None or not res.done:
        if plan:
            a = plan.pop(0)
        elif rng is not None and noise > 0 and rng.random() < noise:
            a = random_action(rng)
        else:
            a = expert_next_action(spec, state)
        state, res = step(spec, state, a)
        turns.append(Turn(obs, a, res.grounded))
        obs = res.observation
    return Trajectory(spec.task_id, tuple(turns), res.outcome, env_seed=seed, env_version=ENV_VERSION)


def run_actions(spec: TaskSpec, seed: int, actions) -> Trajectory:
    state, obs = reset(spec, seed)
    turns = []
    res = None
    for a in actions:
        state, res = step(spec, state, a)
        turns.append(Turn(obs, a, res.grounded))
        obs = res.observation
        if res.done:
            break
    outcome = res.outcome if res is not None and res.done else _outcome(spec, state)
    return Trajectory(spec.task_id, tuple(turns), outcome, env_seed=seed, env_version=ENV_VERSION)
